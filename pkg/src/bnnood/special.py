"""Log-gamma and digamma on numpy arrays, without relying on libm's lgamma."""

import numpy as np

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lgamma_lanczos(x):
    # valid for x >= 0.5
    z = x - 1.0
    a = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        a = a + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)


def lgamma(x):
    """Natural log of |Gamma(x)|, elementwise.

    Uses the reflection formula below 0.5. Poles (0, -1, -2, ...) give +inf.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = x >= 0.5
    out[big] = _lgamma_lanczos(x[big])
    small = ~big
    if np.any(small):
        xs = x[small]
        with np.errstate(divide="ignore"):
            s = np.abs(np.sin(np.pi * xs))
            vals = np.log(np.pi) - np.log(s) - _lgamma_lanczos(1.0 - xs)
        # sin(pi * x) is only ~1e-16 at negative integers, so poles are set explicitly
        out[small] = np.where(xs == np.floor(xs), np.inf, vals)
    return out if out.ndim else out[()]


def digamma(x):
    """Derivative of lgamma for x > 0, via upward recurrence and the asymptotic series."""
    x = np.array(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("digamma is only provided for positive arguments")
    acc = np.zeros_like(x)
    while True:
        low = x < 10.0
        if not np.any(low):
            break
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132)))))
    out = acc + np.log(x) - 0.5 * inv - series
    return out if out.ndim else out[()]
