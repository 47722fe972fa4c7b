"""Predictive confidence on a 2-D lattice, written as a PGM heatmap and CSV."""

import csv

import numpy as np

from . import metrics
from .errors import ConfigurationError
from .models import predict


def lattice(xmin, xmax, ymin, ymax, res):
    """Cell centres of a res x res grid, row 0 at the top (largest y)."""
    if res < 1 or not (xmax > xmin and ymax > ymin):
        raise ConfigurationError("need res >= 1 and a non-degenerate box")
    xs = xmin + (np.arange(res) + 0.5) * (xmax - xmin) / res
    ys = ymax - (np.arange(res) + 0.5) * (ymax - ymin) / res
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy


def confidence_grid(model, posterior, box, res, n_classes=None, seed=0):
    """Returns ``(xs, ys, conf)``, each of shape (res, res)."""
    if model.n_in != 2:
        raise ConfigurationError(f"confidence grids need a 2-D input model, got {model.n_in}")
    gx, gy = lattice(*box, res)
    probs = predict(model, posterior, np.stack([gx.ravel(), gy.ravel()], axis=1), seed)
    return gx, gy, metrics.confidence(probs, n_classes).reshape(res, res)


def to_gray(conf):
    """round(255 * confidence), halves rounded up."""
    return np.clip(np.floor(255.0 * np.asarray(conf) + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, conf):
    img = to_gray(conf)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ConfigurationError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[:w * h].reshape(h, w)


def write_grid_csv(path, xs, ys, conf):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "confidence"])
        for x, y, c in zip(xs.ravel(), ys.ravel(), np.asarray(conf).ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(c))])
