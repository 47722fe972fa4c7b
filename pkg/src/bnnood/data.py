"""Datasets: labeled containers, toy generators, synthetic OOD sets, IDX and CSV I/O."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError


@dataclass
class LabeledSet:
    """Feature matrix with optional hard or soft labels.

    Exactly one of ``y`` (integer class per row) and ``soft`` (probability row
    per example) may be set; both ``None`` means unlabeled.
    """

    X: np.ndarray
    y: np.ndarray = None
    soft: np.ndarray = None
    origin: str = "in"
    n_classes: int = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ConfigurationError(f"features must be a matrix, got shape {self.X.shape}")
        if self.origin not in ("in", "out"):
            raise ConfigurationError(f"origin must be 'in' or 'out', got {self.origin!r}")
        if self.y is not None and self.soft is not None:
            raise ConfigurationError("a set carries hard or soft labels, not both")
        m = self.X.shape[0]
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (m,):
                raise ConfigurationError("need exactly one hard label per row")
            if m and self.y.min() < 0:
                raise ConfigurationError("hard labels must be non-negative")
            if self.n_classes is not None and m and self.y.max() >= self.n_classes:
                raise ConfigurationError("hard label exceeds the class count")
        if self.soft is not None:
            self.soft = np.asarray(self.soft, dtype=np.float64)
            if self.soft.ndim != 2 or self.soft.shape[0] != m:
                raise ConfigurationError("need one soft label row per example")
            if np.any(self.soft < 0) or np.any(np.abs(self.soft.sum(axis=1) - 1.0) > 1e-9):
                raise ConfigurationError("soft labels must lie on the probability simplex")
            if self.n_classes is None:
                self.n_classes = self.soft.shape[1]

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def is_hard(self):
        return self.y is not None

    @property
    def is_soft(self):
        return self.soft is not None

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledSet(
            self.X[idx],
            None if self.y is None else self.y[idx],
            None if self.soft is None else self.soft[idx],
            self.origin,
            self.n_classes,
        )


def concat(a, b):
    if a.dim != b.dim:
        raise ConfigurationError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    y = np.concatenate([a.y, b.y]) if a.is_hard and b.is_hard else None
    soft = np.concatenate([a.soft, b.soft]) if a.is_soft and b.is_soft else None
    return LabeledSet(np.concatenate([a.X, b.X]), y, soft, a.origin, a.n_classes)


@dataclass
class ToyGaussians:
    k: int = 4
    means: tuple = ((-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0), (2.0, 2.0))
    std: float = 0.35
    n_per_class: int = 100
    seed: int = 0


def gen_toy_gaussians(spec=None):
    """Isotropic Gaussian blobs in the plane, label = cluster index, class-major order."""
    spec = spec or ToyGaussians()
    means = np.asarray(spec.means, dtype=np.float64)
    if means.shape != (spec.k, 2):
        raise ConfigurationError(f"need {spec.k} two-dimensional means")
    if spec.std <= 0:
        raise ConfigurationError("std must be positive")
    rng = np.random.default_rng(spec.seed)
    X = np.concatenate([mu + spec.std * rng.standard_normal((spec.n_per_class, 2)) for mu in means])
    y = np.repeat(np.arange(spec.k), spec.n_per_class)
    return LabeledSet(X, y, origin="in", n_classes=spec.k)


def gen_uniform_ood(low, high, dim, m_out, seed=0):
    if not low < high:
        raise ConfigurationError("need low < high")
    rng = np.random.default_rng(seed)
    return LabeledSet(rng.uniform(low, high, size=(m_out, dim)), origin="out")


def gen_ring(r_min, r_max, m, seed=0):
    """Points with radius uniform in [r_min, r_max] and uniform angle."""
    if not 0 <= r_min <= r_max:
        raise ConfigurationError("need 0 <= r_min <= r_max")
    rng = np.random.default_rng(seed)
    r = rng.uniform(r_min, r_max, size=m)
    phi = rng.uniform(0.0, 2 * np.pi, size=m)
    return LabeledSet(np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1), origin="out")


@dataclass
class SmoothNoise:
    blur_sigma_range: tuple = (1.0, 2.5)
    contrast_range: tuple = (0.3, 1.0)
    kernel_radius: int = 2
    seed: int = 0


def _gaussian_kernel(sigma, radius):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(img, kernel):
    r = len(kernel) // 2
    side = img.shape[0]
    padded = np.pad(img, r, mode="edge")
    rows = sum(kernel[i] * padded[:, i:i + side] for i in range(len(kernel)))
    return sum(kernel[i] * rows[i:i + side, :] for i in range(len(kernel)))


def gen_smooth_ood(source, spec=None):
    """Permute the pixels, Gaussian-blur, then rescale each image to [0, kappa]."""
    spec = spec or SmoothNoise()
    lo_s, hi_s = spec.blur_sigma_range
    lo_c, hi_c = spec.contrast_range
    if not (0 < lo_s <= hi_s and 0 < lo_c <= hi_c <= 1) or spec.kernel_radius < 0:
        raise ConfigurationError("smooth-noise ranges must be ordered and positive")
    X = source.X if isinstance(source, LabeledSet) else np.asarray(source, dtype=np.float64)
    side = int(round(np.sqrt(X.shape[1])))
    if side * side != X.shape[1]:
        raise ConfigurationError(f"images of {X.shape[1]} pixels are not square")
    rng = np.random.default_rng(spec.seed)
    out = np.empty_like(X)
    for i, flat in enumerate(X):
        img = flat[rng.permutation(flat.size)].reshape(side, side)
        # constant sources stay constant; decided before blurring so rounding
        # in the convolution cannot fake a contrast
        constant = flat.min() == flat.max()
        img = _blur(img, _gaussian_kernel(rng.uniform(lo_s, hi_s), spec.kernel_radius))
        kappa = rng.uniform(lo_c, hi_c)
        lo, hi = img.min(), img.max()
        if not constant and hi > lo:
            out[i] = ((img - lo) / (hi - lo) * kappa).ravel()
        else:
            out[i] = kappa / 2
    return LabeledSet(out, origin="out")


def split_validation(D, n_val, seed=0):
    """Random disjoint (train, validation) split with ``n_val`` validation rows."""
    if not 0 <= n_val < len(D):
        raise UsageError(f"n_val must be in [0, {len(D)}), got {n_val}")
    perm = np.random.default_rng(seed).permutation(len(D))
    return D.subset(np.sort(perm[n_val:])), D.subset(np.sort(perm[:n_val]))


# IDX: big-endian u32 magic then u32 dims, then u8 payload.
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, magic, n_dims):
    with open(path, "rb") as f:
        data = f.read()
    head = 4 * (1 + n_dims)
    if len(data) < head:
        raise FormatError(f"{path}: truncated header")
    got, *dims = struct.unpack(f">{1 + n_dims}I", data[:head])
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    n = int(np.prod(dims))
    if len(data) != head + n:
        raise FormatError(f"{path}: expected {n} payload bytes, found {len(data) - head}")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(dims)


def read_idx_images(path):
    """Raw uint8 array of shape (count, rows, cols)."""
    return _read_idx(path, IDX_IMAGES, 3)


def read_idx_labels(path):
    return _read_idx(path, IDX_LABELS, 1)


def write_idx_images(path, images):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ConfigurationError("IDX images must be a uint8 array (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES, *images.shape))
        f.write(np.ascontiguousarray(images).tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ConfigurationError("IDX labels must be a uint8 vector")
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS, labels.size))
        f.write(labels.tobytes())


def load_idx(images_path, labels_path=None):
    """Images scaled to [0, 1] and flattened row-major; labels if a label file is given."""
    images = read_idx_images(images_path)
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = None
    if labels_path is not None:
        y = read_idx_labels(labels_path).astype(np.int64)
        if y.size != X.shape[0]:
            raise FormatError(f"{X.shape[0]} images but {y.size} labels")
    return LabeledSet(X, y, origin="in" if y is not None else "out")


def save_idx(prefix_or_path, D, side=None):
    """Write ``D`` as an IDX image file, rounding pixel values ``v`` to ``round(255 v)``."""
    X = np.asarray(D.X)
    side = side or int(round(np.sqrt(X.shape[1])))
    if side * side != X.shape[1]:
        raise ConfigurationError("features are not square images")
    pixels = np.clip(np.rint(X * 255.0), 0, 255).astype(np.uint8)
    write_idx_images(prefix_or_path, pixels.reshape(-1, side, side))


def save_csv(path, D):
    """Header ``x0..x{n-1},label``; unlabeled rows carry label -1."""
    y = D.y if D.is_hard else np.full(len(D), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(D.dim)] + ["label"])
        for row, label in zip(D.X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][-1] != "label" or not all(
            h == f"x{j}" for j, h in enumerate(rows[0][:-1])):
        raise FormatError(f"{path}: expected header x0..x(n-1),label")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    body = body.reshape(-1, len(rows[0]))
    labels = body[:, -1].astype(np.int64)
    X = body[:, :-1]
    if len(labels) and np.all(labels < 0):
        return LabeledSet(X, origin="out")
    if np.any(labels < 0):
        raise FormatError(f"{path}: mixes labeled and unlabeled rows")
    return LabeledSet(X, labels, origin="in")
