"""Age-structured mortality model with zero age-zero boundary.

Solves ``(d/da + d/dt) n = -mu(a, t) n + p(a, t)`` with ``n(a, 0) = rho(a)``
and ``n(0, t) = 0``. Closed forms cover the constant death rate with influx
``p(a) = a exp(-lambda a)``; :func:`solve_general` integrates along
characteristics for arbitrary rates, and :func:`upwind_reference` is a plain
finite-difference solver used as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, QuadratureError
from .special import (  # noqa: F401  re-exported
    gamma_pdf,
    gamma_pdf_deriv,
    regularized_lower_gamma,
    regularized_upper_gamma,
    upper_incomplete_gamma,
)


@dataclass(frozen=True)
class AgeGrid:
    a0: float = 0.0
    delta_a: float = 0.12
    n_a: int = 1000

    def __post_init__(self):
        if self.delta_a <= 0:
            raise ConfigurationError("AgeGrid.delta_a must be positive")
        if self.n_a < 1:
            raise ConfigurationError("AgeGrid.n_a must be at least 1")

    @property
    def ages(self) -> np.ndarray:
        """Left edges a_j = a0 + j * delta_a of the age bins."""
        return self.a0 + self.delta_a * np.arange(self.n_a)

    @property
    def edges(self) -> np.ndarray:
        return self.a0 + self.delta_a * np.arange(self.n_a + 1)

    @property
    def upper(self) -> float:
        return self.a0 + self.n_a * self.delta_a


@dataclass(frozen=True)
class TimeGrid:
    delta_t: float = 0.1
    n_t: int = 100
    t0: float = 0.0

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ConfigurationError("TimeGrid.delta_t must be positive")
        if self.n_t < 0:
            raise ConfigurationError("TimeGrid.n_t must be nonnegative")
        if self.t0 != 0.0:
            raise ConfigurationError("TimeGrid.t0 is fixed to 0")

    @property
    def times(self) -> np.ndarray:
        return self.delta_t * np.arange(self.n_t + 1)


@dataclass(frozen=True)
class SimpleModelParams:
    """Constant death rate ``mu`` and influx age scale ``lam`` (both 1/year)."""

    mu: float = 0.08
    lam: float = 0.2

    def __post_init__(self):
        if not (self.mu > 0 and self.lam > 0):
            raise ConfigurationError("mu and lambda must be positive")


def _zero_density(a):
    return np.zeros_like(np.asarray(a, dtype=float))


@dataclass(frozen=True)
class BoundaryData:
    rho: Callable = _zero_density
    g_zero: bool = True

    def __post_init__(self):
        if not self.g_zero:
            raise ConfigurationError("only a zero age-zero boundary is supported")


@dataclass
class CohortDensity:
    grid: AgeGrid
    time: float
    values: np.ndarray


def _check_nonneg(name, x):
    if np.any(np.asarray(x) < 0):
        raise ValueError(f"{name} must be nonnegative")


def influx_simple(a, lam):
    """Influx density ``a exp(-lam a)``, peaked at ``a = 1/lam``."""
    _check_nonneg("age", a)
    a = np.asarray(a, dtype=float)
    return a * np.exp(-lam * a)


# (1 - (1 + x) e^-x) / x^2, with its Taylor series near zero
_PHI_COEF = np.array([(-1) ** n * (n - 1) / math.factorial(n) for n in range(2, 26)])
# x / (1 - e^-x) - 1 - x/2 (Bernoulli numbers; odd terms vanish)
_CHI_COEF = {2: 1 / 12, 4: -1 / 720, 6: 1 / 30240, 8: -1 / 1209600, 10: 1 / 47900160}


def _phi(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.5
    xs = np.where(small, x, 0.0)
    series = np.polynomial.polynomial.polyval(xs, _PHI_COEF)
    xl = np.where(small, 1.0, x)
    direct = (-np.expm1(-xl) - xl * np.exp(-xl)) / xl**2
    return np.where(small, series, direct)


def _psi(x):
    # (1 - e^-x) / x
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    xl = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2, -np.expm1(-xl) / xl)


def _chi(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.2
    xs = np.where(small, x, 0.0)
    series = sum(c * xs**k for k, c in _CHI_COEF.items())
    xl = np.where(small, 1.0, x)
    direct = xl / (-np.expm1(-xl)) - 1.0 - xl / 2
    return np.where(small, series, direct)


def solve_simple(params: SimpleModelParams, a, t):
    """Closed-form density for constant ``mu``, influx ``a e^(-lam a)`` and ``rho = 0``.

    Uses the cohort formula for ``a >= t`` and the boundary-born formula
    for ``a < t``. Both are written in terms of smooth auxiliary functions
    so the ``lam -> mu`` limit needs no special casing.
    """
    _check_nonneg("age", a)
    _check_nonneg("time", t)
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    mu, lam = params.mu, params.lam
    d = lam - mu
    c = a - t
    cohort = np.exp(-lam * c - mu * t) * (t**2 * _phi(d * t) + c * t * _psi(d * t))
    born = np.exp(-mu * a) * a**2 * _phi(d * a)
    out = np.where(c >= 0, cohort, born)
    return out if out.ndim else float(out)


def steady_state(a, params: SimpleModelParams):
    """Time-independent limit ``[e^(-mu a) - (1 + a(lam-mu)) e^(-lam a)] / (lam-mu)^2``."""
    _check_nonneg("age", a)
    a = np.asarray(a, dtype=float)
    out = np.exp(-params.mu * a) * a**2 * _phi((params.lam - params.mu) * a)
    return out if out.ndim else float(out)


def peak_age(t, params: SimpleModelParams):
    """Age of the maximum of the cohort branch at time ``t``.

    Equals ``t / (1 - e^(-(lam-mu) t)) - mu / (lam (lam-mu))``, evaluated as
    ``1/lam + t/2 + chi((lam-mu) t) / (lam-mu)`` to stay accurate near the diagonal.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("peak_age requires t > 0")
    d = params.lam - params.mu
    if d <= 0:
        raise ValueError("peak_age requires lambda > mu")
    x = d * t
    out = 1.0 / params.lam + t / 2 + _chi(x) / d
    return out if out.ndim else float(out)


def simple_rate_of_change(a, t, params: SimpleModelParams | None = None, *, mu=None, lam=None):
    """Time derivative of :func:`solve_simple`: ``(a-t) e^(-lam(a-t) - mu t)`` for ``a >= t``, else 0.

    ``mu`` and ``lam`` may be given as arrays (one value per ensemble member,
    broadcast against ``a``) instead of a params record.
    """
    if params is not None:
        mu, lam = params.mu, params.lam
    a = np.asarray(a, dtype=float)
    c = a - t
    with np.errstate(over="ignore"):
        rate = c * np.exp(-lam * c - mu * t)
    return np.where(c >= 0, rate, 0.0)


def _simpson_weights(n):
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def simpson(f_vals, lo, hi):
    """Composite Simpson rule along the last axis of equally spaced samples on ``[lo, hi]``."""
    n = f_vals.shape[-1] - 1
    if n < 2 or n % 2:
        raise ValueError("simpson needs an even number of panels")
    return f_vals @ _simpson_weights(n) * ((hi - lo) / n)


def _eval(fn, a, t):
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    return np.broadcast_to(np.asarray(fn(a, t), dtype=float), a.shape)


def _characteristic_integral(boundary, mu_fn, p_fn, a, t, n):
    """One Simpson evaluation of the characteristic solution with ``n`` panels."""
    w = _simpson_weights(n)
    if a >= t:
        c = a - t
        # outer nodes s in [0, t]; inner nodes s' in [s, t]
        s = np.linspace(0.0, t, n + 1)
        frac = np.linspace(0.0, 1.0, n + 1)
        sp = s[:, None] + (t - s)[:, None] * frac[None, :]
        inner = (_eval(mu_fn, c + sp, sp) @ w) * (t - s) / n
        survive0 = inner[0]
        outer = _eval(p_fn, c + s, s) * np.exp(-inner)
        val = np.asarray(boundary.rho(np.array(c))).item() * np.exp(-survive0)
        return val + (outer @ w) * t / n
    # born at age 0 at time t - a; integrate over age s in [0, a]
    shift = t - a
    s = np.linspace(0.0, a, n + 1)
    frac = np.linspace(0.0, 1.0, n + 1)
    sp = s[:, None] + (a - s)[:, None] * frac[None, :]
    inner = (_eval(mu_fn, sp, sp + shift) @ w) * (a - s) / n
    outer = _eval(p_fn, s, s + shift) * np.exp(-inner)
    return (outer @ w) * a / n


def solve_general(boundary: BoundaryData, mu_fn, p_fn, a, t, *, panels=256, rtol=1e-9, max_panels=4096):
    """Characteristic solution for arbitrary death rate and influx.

    ``mu_fn(age, time)`` and ``p_fn(age, time)`` must accept numpy arrays.
    Nested composite Simpson quadrature; the panel count starts at ``panels``
    and doubles until successive estimates agree to ``rtol``.
    """
    _check_nonneg("age", a)
    _check_nonneg("time", t)
    a = float(a)
    t = float(t)
    span = t if a >= t else a
    if span == 0.0:
        return float(np.asarray(boundary.rho(np.array(a))).item()) if t == 0.0 else 0.0
    n = panels + panels % 2
    prev = _characteristic_integral(boundary, mu_fn, p_fn, a, t, n)
    while n < max_panels:
        n *= 2
        cur = _characteristic_integral(boundary, mu_fn, p_fn, a, t, n)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return float(cur)
        prev = cur
    raise QuadratureError(f"solve_general did not converge at a={a}, t={t} with {n} panels")


def upwind_reference(boundary: BoundaryData, mu_fn, p_fn, age_grid: AgeGrid, time_grid: TimeGrid,
                     *, record_every: int = 1) -> list[CohortDensity]:
    """Explicit first-order upwind solution on node ages ``age_grid.ages``.

    The inflow value left of the first node is zero. Loss and influx use the
    old time level. Every ``record_every``-th step (and step 0) is returned.
    """
    dt, da = time_grid.delta_t, age_grid.delta_a
    if dt > da * (1 + 1e-12):
        raise ConfigurationError(f"CFL violated: delta_t={dt} > delta_a={da}")
    nu = dt / da
    ages = age_grid.ages
    n = np.asarray(boundary.rho(ages), dtype=float).copy()
    out = [CohortDensity(age_grid, 0.0, n.copy())]
    upstream = np.empty_like(n)
    for k in range(time_grid.n_t):
        t = k * dt
        upstream[0] = 0.0
        upstream[1:] = n[:-1]
        n = n - nu * (n - upstream) + dt * (_eval(p_fn, ages, t) - _eval(mu_fn, ages, t) * n)
        if (k + 1) % record_every == 0:
            out.append(CohortDensity(age_grid, (k + 1) * dt, n.copy()))
    return out
