"""Numeric-integration oracle for Dirichlet expectations on the simplex (J <= 3)."""
import math

import numpy as np
from scipy import integrate
from scipy.special import gammaln


def _log_norm(a):
    return gammaln(a.sum()) - gammaln(a).sum()


def _expected_ce_2(a, k):
    f = lambda p: math.exp(_log_norm(a) + (a[0] - 1) * math.log(p) + (a[1] - 1) * math.log1p(-p))
    pk = (lambda p: -math.log(p)) if k == 0 else (lambda p: -math.log1p(-p))
    return integrate.quad(lambda p: f(p) * pk(p), 0, 1, limit=200)[0]


def _kl_2(a):
    def integrand(p):
        logf = _log_norm(a) + (a[0] - 1) * math.log(p) + (a[1] - 1) * math.log1p(-p)
        return math.exp(logf) * logf
    return integrate.quad(integrand, 0, 1, limit=200)[0]   # log of Dir(1) density is 0


def _simplex3(fn):
    # p1 in (0,1), p2 in (0, 1-p1)
    return integrate.dblquad(lambda p2, p1: fn(np.array([p1, p2, 1.0 - p1 - p2])),
                             0, 1, 0, lambda p1: 1 - p1, epsabs=1e-6, epsrel=1e-6)[0]


def _density3(a, p):
    if np.any(p <= 0):
        return 0.0, -np.inf
    logf = _log_norm(a) + float(((a - 1) * np.log(p)).sum())
    return math.exp(logf), logf


def expected_cross_entropy(a, k) -> float:
    """E_{p ~ Dir(a)}[-log p_k] by quadrature."""
    a = np.asarray(a, dtype=np.float64)
    if len(a) == 2:
        return _expected_ce_2(a, k)

    def ce(p):
        f, _ = _density3(a, p)
        return f * -math.log(p[k]) if f > 0 else 0.0
    return _simplex3(ce)


def kl_to_uniform(a) -> float:
    """KL[Dir(a) || Dir(1)] by quadrature."""
    a = np.asarray(a, dtype=np.float64)
    if len(a) == 2:
        return _kl_2(a)

    def kl(p):
        f, logf = _density3(a, p)
        return f * (logf - math.log(2.0)) if f > 0 else 0.0   # Dir(1) density is Gamma(3)=2
    return _simplex3(kl)
