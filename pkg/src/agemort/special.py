"""Gamma densities and incomplete gamma functions.

The incomplete gamma functions follow the usual split: power series for
``x < s + 1`` and a modified-Lentz continued fraction otherwise. Both are
vectorized over numpy arrays and work in log space so that large shape
parameters do not overflow.
"""

import numpy as np
from scipy.special import gammaln

EPS = 1e-14
MAX_ITER = 2000
_TINY = 1e-300


def gamma_pdf(a, alpha, beta):
    """Gamma density with shape ``alpha`` and rate ``beta`` evaluated at age ``a``."""
    a = np.asarray(a, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(a < 0):
        raise ValueError("gamma_pdf: age must be nonnegative")
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError("gamma_pdf: shape and rate must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = (alpha - 1.0) * np.log(a) - beta * a + alpha * np.log(beta) - gammaln(alpha)
        out = np.exp(logf)
    # 0 * log(0) for alpha == 1
    return np.where((a == 0) & (alpha == 1.0), beta + 0.0 * a, out)


def gamma_pdf_deriv(a, alpha, beta):
    """Derivative of :func:`gamma_pdf` with respect to age.

    Written as ``C a^(alpha-2) e^(-beta a) [(alpha - 1) - beta a]`` so the
    value at ``a = 0`` is well defined whenever ``alpha > 2``.
    """
    a = np.asarray(a, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logc = (alpha - 2.0) * np.log(a) - beta * a + alpha * np.log(beta) - gammaln(alpha)
        out = np.exp(logc) * ((alpha - 1.0) - beta * a)
    return out


def _log_prefactor(s, x):
    # log(x^s e^-x / Gamma(s))
    return s * np.log(x) - x - gammaln(s)


def _lower_series(s, x):
    """Series for the regularized lower function P(s, x); accurate for x < s + 1."""
    ap = s.copy()
    term = 1.0 / s
    total = term.copy()
    active = np.ones(s.shape, dtype=bool)
    for _ in range(MAX_ITER):
        ap = ap + 1.0
        term = np.where(active, term * x / ap, 0.0)
        total = total + term
        active &= np.abs(term) > np.abs(total) * EPS
        if not active.any():
            break
    else:
        raise ArithmeticError("incomplete gamma series did not converge")
    return np.exp(_log_prefactor(s, x)) * total


def _upper_contfrac(s, x):
    """Continued fraction for the regularized upper function Q(s, x); for x >= s + 1."""
    b = x + 1.0 - s
    c = np.full(s.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(s.shape, dtype=bool)
    for i in range(1, MAX_ITER):
        an = -i * (i - s)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = c * d
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > EPS
        if not active.any():
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return np.exp(_log_prefactor(s, x)) * h


def _regularized(s, x):
    s, x = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(x, dtype=float))
    if np.any(s <= 0):
        raise ValueError("incomplete gamma: shape must be positive")
    if np.any(x < 0):
        raise ValueError("incomplete gamma: argument must be nonnegative")
    s = s.ravel()
    x = x.ravel()
    p = np.zeros_like(s)
    q = np.ones_like(s)
    series = (x > 0) & (x < s + 1.0)
    frac = x >= s + 1.0
    if series.any():
        p[series] = _lower_series(s[series], x[series])
        q[series] = 1.0 - p[series]
    if frac.any():
        q[frac] = _upper_contfrac(s[frac], x[frac])
        p[frac] = 1.0 - q[frac]
    return p, q


def regularized_lower_gamma(s, x):
    """P(s, x) = gamma(s, x) / Gamma(s)."""
    shape = np.broadcast(np.asarray(s), np.asarray(x)).shape
    p, _ = _regularized(s, x)
    return p.reshape(shape) if shape else float(p[0])


def regularized_upper_gamma(s, x):
    """Q(s, x) = Gamma(s, x) / Gamma(s)."""
    shape = np.broadcast(np.asarray(s), np.asarray(x)).shape
    _, q = _regularized(s, x)
    return q.reshape(shape) if shape else float(q[0])


def upper_incomplete_gamma(s, x):
    """Unregularized upper incomplete gamma function Gamma(s, x).

    ``Gamma(s, 0) == Gamma(s)``; overflows to ``inf`` for ``s`` beyond ~171.
    """
    q = regularized_upper_gamma(s, x)
    return q * np.exp(gammaln(s))
