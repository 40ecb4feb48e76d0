"""Digamma, trigamma and log-gamma for positive reals.

Arguments are shifted upward with the recurrences

    psi(x)   = psi(x + 1) - 1/x
    psi'(x)  = psi'(x + 1) + 1/x**2
    lnG(x)   = lnG(x + 1) - ln(x)

until every entry is at least ``_SHIFT``, where the asymptotic (Stirling)
series converges to double precision with the terms kept below.
All functions accept scalars or arrays and return float64.
"""
from __future__ import annotations

import math

import numpy as np

from evifed.errors import DomainError

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_EXACT_INT_MAX = 22
_LOG_FACTORIAL = np.array([math.log(math.factorial(k)) for k in range(_EXACT_INT_MAX)])

# B_2k / (2k) for the digamma series, k = 1..7
_PSI_COEFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_2k for the trigamma series, k = 1..7
_TRI_COEFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)
# B_2k / (2k (2k - 1)) for the log-gamma series, k = 1..7
_LGAMMA_COEFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _as_positive(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} requires finite x > 0, got min {np.min(arr)!r}")
    return arr


def _shift_up(x: np.ndarray):
    """Yield (shifted_x, mask) pairs until every entry reaches the series range."""
    y = x.copy()
    steps = []
    while True:
        low = y < _SHIFT
        if not low.any():
            break
        steps.append((y.copy(), low))
        y = np.where(low, y + 1.0, y)
    return y, steps


def _unwrap(values: np.ndarray, original):
    if np.ndim(original) == 0:
        return float(values)
    return values


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    arr = _as_positive(x, "digamma")
    y, steps = _shift_up(arr)
    acc = np.zeros_like(arr)
    for before, low in steps:
        acc -= np.where(low, 1.0 / before, 0.0)
    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    for c in reversed(_PSI_COEFS):
        series = series * inv2 + c
    out = acc + np.log(y) - 0.5 / y - series * inv2
    return _unwrap(out, x)


def trigamma(x):
    arr = _as_positive(x, "trigamma")
    y, steps = _shift_up(arr)
    acc = np.zeros_like(arr)
    for before, low in steps:
        acc += np.where(low, 1.0 / (before * before), 0.0)
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in reversed(_TRI_COEFS):
        series = series * inv2 + c
    out = acc + inv + 0.5 * inv2 + series * inv2 * inv
    return _unwrap(out, x)


def lgamma(x):
    """ln Gamma(x) for x > 0."""
    arr = _as_positive(x, "lgamma")
    y, steps = _shift_up(arr)
    # accumulate the shift as a product, logged once, to keep the error at a few ulp
    prod = np.ones_like(arr)
    for before, low in steps:
        prod = prod * np.where(low, before, 1.0)
    inv = 1.0 / y
    inv2 = inv * inv
    series = np.zeros_like(y)
    for c in reversed(_LGAMMA_COEFS):
        series = series * inv2 + c
    out = (y - 0.5) * np.log(y) - y + _HALF_LOG_2PI + series * inv - np.log(prod)
    # small integers: ln((n-1)!) from the exact factorial, so lnG(1) = lnG(2) = 0 exactly
    exact = (arr == np.round(arr)) & (arr <= _EXACT_INT_MAX)
    if exact.any():
        out = np.where(exact, _LOG_FACTORIAL[np.where(exact, arr, 1).astype(np.int64) - 1], out)
    return _unwrap(out, x)
