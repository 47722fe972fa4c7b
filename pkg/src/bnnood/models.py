"""MLP classifiers, posterior containers, predictive distributions, persistence."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FormatError, UsageError

ACTIVATIONS = ("relu", "tanh")


@dataclass
class Mlp:
    """Fully connected classifier with a flat parameter vector.

    Layer ``l`` stores its weight matrix of shape ``(out, in)`` row-major,
    followed by its bias of length ``out``.
    """

    widths: list
    params: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.params = np.asarray(self.params, dtype=np.float64)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigurationError(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.params.shape != (n_params(self.widths),):
            raise ConfigurationError(
                f"expected {n_params(self.widths)} parameters, got {self.params.shape}")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    @property
    def n_params(self):
        return self.params.size

    def layer_slices(self):
        """``(weight_offset, (out, in), bias_offset, out)`` for every layer."""
        out, off = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out.append((off, (b, a), off + a * b, b))
            off += a * b + b
        return out

    @property
    def last_layer_slice(self):
        """``(offset, length)`` of the final weight+bias block (a suffix of params)."""
        h, c = self.widths[-2], self.widths[-1]
        length = h * c + c
        return self.n_params - length, length

    def copy(self, params=None):
        return Mlp(list(self.widths), self.params.copy() if params is None else params,
                   self.activation)


def n_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def init_mlp(widths, activation="relu", seed=0):
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    widths = list(widths)
    if len(widths) < 2:
        raise ConfigurationError("need at least input and output widths")
    if min(widths) < 1:
        raise ConfigurationError(f"widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(np.zeros(b))
    return Mlp(widths, np.concatenate(chunks), activation)


def expand_none_class(model, seed=0, zero=False):
    """Add one output unit with its own weight row and bias.

    Existing parameters are copied unchanged. The new weight row is drawn from
    the same uniform init as :func:`init_mlp` unless ``zero`` is set.
    """
    h, c = model.widths[-2], model.widths[-1]
    off, _ = model.last_layer_slice
    W = model.params[off:off + h * c].reshape(c, h)
    b = model.params[off + h * c:]
    if zero:
        row = np.zeros(h)
    else:
        bound = np.sqrt(6.0 / h)
        row = np.random.default_rng(seed).uniform(-bound, bound, size=h)
    new_last = np.concatenate([W.ravel(), row, b, [0.0]])
    params = np.concatenate([model.params[:off], new_last])
    return Mlp(model.widths[:-1] + [c + 1], params, model.activation)


def _act(model, z):
    return ad.relu(z) if model.activation == "relu" else ad.tanh(z)


def forward(model, theta, X, trace=None):
    """Logits node of ``model`` at parameter node ``theta`` on inputs ``X``.

    When ``trace`` is a list, one ``(input_node, preactivation_node,
    layer_index)`` triple is appended per layer; per-example gradients are
    read off these nodes.
    """
    g = theta.graph
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise ConfigurationError(f"input has shape {X.shape}, model expects (m, {model.n_in})")
    a = g.constant(X)
    layers = model.layer_slices()
    for i, (w_off, w_shape, b_off, b_len) in enumerate(layers):
        W = ad.take_slice(theta, w_off, w_shape)
        b = ad.take_slice(theta, b_off, (b_len,))
        z = a @ W.T + b
        if trace is not None:
            trace.append((a, z, i))
        a = z if i == len(layers) - 1 else _act(model, z)
    return a


def features(model, X):
    """Penultimate-layer activations as a plain array (no graph kept)."""
    g = ad.Graph()
    theta = g.constant(model.params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise ConfigurationError(f"input has shape {X.shape}, model expects (m, {model.n_in})")
    a = g.constant(X)
    for w_off, w_shape, b_off, b_len in model.layer_slices()[:-1]:
        W = ad.take_slice(theta, w_off, w_shape)
        b = ad.take_slice(theta, b_off, (b_len,))
        a = _act(model, a @ W.T + b)
    return a.value


def head(model, last, H):
    """Logits node from penultimate features ``H`` and a last-layer parameter node."""
    h, c = model.widths[-2], model.widths[-1]
    g = last.graph
    Hn = H if isinstance(H, ad.Var) else g.constant(H)
    W = ad.take_slice(last, 0, (c, h))
    b = ad.take_slice(last, h * c, (c,))
    return Hn @ W.T + b


def logits(model, X, params=None):
    g = ad.Graph()
    theta = g.constant(model.params if params is None else params)
    return forward(model, theta, X).value


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.exp(ls)


@dataclass
class Posterior:
    """MAP point or diagonal Gaussian over the slice ``[offset, offset+len(mean))``."""

    kind: str = "map"
    mean: np.ndarray = None
    variance: np.ndarray = None
    offset: int = 0
    n_samples: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("map", "diag"):
            raise ConfigurationError(f"unknown posterior kind {self.kind!r}")
        if self.kind == "diag":
            self.mean = np.asarray(self.mean, dtype=np.float64)
            self.variance = np.asarray(self.variance, dtype=np.float64)
            if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
                raise ConfigurationError("mean and variance must be vectors of equal length")
            if np.any(self.variance <= 0):
                raise ConfigurationError("posterior variances must be positive")
            if self.n_samples < 1:
                raise ConfigurationError("need at least one MC sample")

    @property
    def length(self):
        return 0 if self.mean is None else self.mean.size

    @classmethod
    def map_point(cls):
        return cls("map")

    def covers_last_layer(self, model):
        return self.kind == "diag" and (self.offset, self.length) == model.last_layer_slice


def predict(model, posterior, X, seed=0):
    """Predictive class probabilities, one row per input.

    A diagonal Gaussian is integrated by Monte Carlo; coordinates outside its
    slice stay at ``model.params``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise ConfigurationError(f"input has shape {X.shape}, model expects (m, {model.n_in})")
    if posterior is None or posterior.kind == "map":
        return softmax(logits(model, X))
    off, n = posterior.offset, posterior.length
    if off < 0 or off + n > model.n_params:
        raise ConfigurationError("posterior slice lies outside the parameter vector")
    rng = np.random.default_rng(seed)
    std = np.sqrt(posterior.variance)
    probs = np.zeros((X.shape[0], model.n_out))
    if posterior.covers_last_layer(model):
        H = features(model, X)
        h, c = model.widths[-2], model.widths[-1]
        for _ in range(posterior.n_samples):
            w = posterior.mean + std * rng.standard_normal(n)
            probs += softmax(H @ w[:h * c].reshape(c, h).T + w[h * c:])
    else:
        theta = model.params.copy()
        for _ in range(posterior.n_samples):
            theta[off:off + n] = posterior.mean + std * rng.standard_normal(n)
            probs += softmax(logits(model, X, theta))
    return probs / posterior.n_samples


def ensemble_predict(models, X):
    """Average of member softmax outputs."""
    if not models:
        raise UsageError("ensemble needs at least one member")
    shapes = {tuple(m.widths) for m in models}
    if len(shapes) != 1:
        raise ConfigurationError(f"ensemble members disagree on widths: {sorted(shapes)}")
    total = sum(softmax(logits(m, X)) for m in models)
    return total / len(models)


# Binary model file: "BNOD", u32 version, u32 n_widths, u32 widths..., u8
# activation, u64 n_params, f64 params..., u8 posterior tag, and for tag 1:
# u64 offset, u64 length, f64 mean..., f64 variance...  All little-endian.

MAGIC = b"BNOD"
FORMAT_VERSION = 1
_ACT_TAG = {"relu": 0, "tanh": 1}
DEFAULT_LA_SAMPLES = 20
DEFAULT_VB_SAMPLES = 200


def dumps_model(model, posterior=None):
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.widths))]
    parts.append(struct.pack(f"<{len(model.widths)}I", *model.widths))
    parts.append(struct.pack("<BQ", _ACT_TAG[model.activation], model.n_params))
    parts.append(model.params.astype("<f8").tobytes())
    if posterior is None or posterior.kind == "map":
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BQQ", 1, posterior.offset, posterior.length))
        parts.append(posterior.mean.astype("<f8").tobytes())
        parts.append(posterior.variance.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("model file is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n):
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def loads_model(data, n_samples=None):
    """Parse bytes written by :func:`dumps_model`.

    The file does not store an MC sample count; a Gaussian over the last
    layer gets the VB default, any other slice the LA default, unless
    ``n_samples`` is given.
    """
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, n_w = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    widths = list(r.unpack(f"<{n_w}I"))
    act_tag, n_p = r.unpack("<BQ")
    acts = {v: k for k, v in _ACT_TAG.items()}
    if act_tag not in acts:
        raise FormatError(f"unknown activation tag {act_tag}")
    if n_p != n_params(widths):
        raise FormatError("parameter count does not match the layer widths")
    try:
        model = Mlp(widths, r.f64(n_p), acts[act_tag])
    except ConfigurationError as exc:
        raise FormatError(str(exc)) from None
    (tag,) = r.unpack("<B")
    if tag == 0:
        posterior = Posterior.map_point()
    elif tag == 1:
        off, length = r.unpack("<QQ")
        if off + length > n_p:
            raise FormatError("posterior slice exceeds the parameter vector")
        mean, var = r.f64(length), r.f64(length)
        if n_samples is None:
            last = (off, length) == model.last_layer_slice
            n_samples = DEFAULT_VB_SAMPLES if last else DEFAULT_LA_SAMPLES
        try:
            posterior = Posterior("diag", mean, var, int(off), n_samples)
        except ConfigurationError as exc:
            raise FormatError(str(exc)) from None
    else:
        raise FormatError(f"unknown posterior tag {tag}")
    if r.pos != len(data):
        raise FormatError("trailing bytes after the model record")
    return model, posterior


def save_model(path, model, posterior=None):
    with open(path, "wb") as f:
        f.write(dumps_model(model, posterior))


def load_model(path, n_samples=None):
    with open(path, "rb") as f:
        return loads_model(f.read(), n_samples)
