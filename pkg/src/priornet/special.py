"""Log-gamma and digamma for strictly positive real arguments.

Both functions shift the argument upward with the recurrence
Gamma(x + 1) = x Gamma(x) until it clears ``_SHIFT_THRESHOLD`` and then
evaluate the Stirling / de Moivre asymptotic series.  They accept scalars
or numpy arrays and return the same shape.
"""

import math

import numpy as np

__all__ = ["ln_gamma", "digamma"]

_SHIFT_THRESHOLD = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# B_2k / (2k (2k - 1)), k = 1..8
_LGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

# B_2k / (2k), k = 1..7
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def _as_positive(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise ValueError(f"{name} requires finite x > 0")
    return arr


def _horner(coeffs, t):
    acc = np.zeros_like(t)
    for c in reversed(coeffs):
        acc = acc * t + c
    return acc


def _wrap(out, scalar):
    return float(out) if scalar else out


def ln_gamma(x):
    """Natural log of the Gamma function, ``ln Gamma(x)`` for ``x > 0``.

    Raises ``ValueError`` on non-positive or non-finite input.
    """
    scalar = np.ndim(x) == 0
    x = _as_positive(x, "ln_gamma").copy()
    # x (x+1) ... stays far below overflow for x >= 1e-300 and 10 shifts
    prod = np.ones_like(x)
    small = x < _SHIFT_THRESHOLD
    while np.any(small):
        prod = np.where(small, prod * x, prod)
        x = np.where(small, x + 1.0, x)
        small = x < _SHIFT_THRESHOLD
    log_shift = np.log(prod)

    inv = 1.0 / x
    series = inv * _horner(_LGAMMA_SERIES, inv * inv)
    out = (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + series - log_shift
    return _wrap(out, scalar)


def digamma(x):
    """Digamma function ``psi(x) = d/dx ln Gamma(x)`` for ``x > 0``."""
    scalar = np.ndim(x) == 0
    x = _as_positive(x, "digamma").copy()
    shift = np.zeros_like(x)
    small = x < _SHIFT_THRESHOLD
    while np.any(small):
        shift = np.where(small, shift + 1.0 / x, shift)
        x = np.where(small, x + 1.0, x)
        small = x < _SHIFT_THRESHOLD

    inv2 = 1.0 / (x * x)
    series = inv2 * _horner(_DIGAMMA_SERIES, inv2)
    out = np.log(x) - 0.5 / x - series - shift
    return _wrap(out, scalar)
