"""Drug-overdose specialization of the age-structured model.

People with a substance use disorder (density ``n``) die at a constant rate
``mu`` and are recruited from the general population ``N(t) = N0 + dN t`` at
an age-dependent addiction rate ``r(a) = r0/2 [f1(a) + f2(a)]`` built from two
gamma densities. Cumulative overdose deaths per fine age bin are accumulated
alongside ``n`` and coarse-grained onto the 22 reporting age groups.

Two evaluations of the closed-form rate of change are provided:
:func:`rate_of_change` follows the characteristic formulas term by term for
a single point, and :class:`OverdoseDrift` evaluates the same quantity for
whole ensembles on the age grid (see its docstring).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numba
import numpy as np

from .agestruct import AgeGrid, simpson
from .enkf import GaussianInit, PositivityTransform, StateSpaceModel
from .errors import ConfigurationError, QuadratureError
from .special import gamma_pdf, gamma_pdf_deriv, regularized_lower_gamma, regularized_upper_gamma

log = logging.getLogger(__name__)

PARAM_NAMES = ("mu", "r0", "alpha1", "beta1", "alpha2", "beta2")
DEATH_SCALE = 1e3
START_YEAR = 1998
DEFAULT_EDGES = (0.0, 1.0) + tuple(float(a) for a in range(5, 101, 5)) + (120.0,)


@dataclass(frozen=True)
class OverdoseParams:
    mu: float = 7e-4
    r0: float = 0.04
    alpha1: float = 15.0
    beta1: float = 1 / 3
    alpha2: float = 15.0
    beta2: float = 1 / 3

    def __post_init__(self):
        if min(self.as_array()) <= 0:
            raise ConfigurationError("overdose parameters must all be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES])

    @classmethod
    def from_array(cls, values) -> "OverdoseParams":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class PopulationModel:
    n0: float = 274.9e6
    delta_n: float = 2.3e6

    def __post_init__(self):
        if self.n0 <= 0:
            raise ConfigurationError("n0 must be positive")


@dataclass(frozen=True)
class CoarseAgeBins:
    edges: tuple = DEFAULT_EDGES

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
            raise ConfigurationError("coarse bin edges must be strictly increasing")

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def midpoints(self) -> np.ndarray:
        e = np.asarray(self.edges)
        return 0.5 * (e[1:] + e[:-1])

    def __len__(self):
        return len(self.edges) - 1


@dataclass(frozen=True)
class InitialProfile:
    fraction: float = 0.04
    alpha: float = 15.0
    beta: float = 1 / 3

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ConfigurationError("initial SUD fraction must lie in (0, 1)")

    def rho(self, a, pop: PopulationModel):
        return self.fraction * pop.n0 * gamma_pdf(a, self.alpha, self.beta)

    def rho_deriv(self, a, pop: PopulationModel):
        return self.fraction * pop.n0 * gamma_pdf_deriv(a, self.alpha, self.beta)


@dataclass
class OverdoseState:
    n: np.ndarray
    d_tilde: np.ndarray
    params: OverdoseParams = field(default_factory=OverdoseParams)


# --------------------------------------------------------------------------
# pointwise model functions


def addiction_rate(a, params: OverdoseParams):
    p = params
    return 0.5 * p.r0 * (gamma_pdf(a, p.alpha1, p.beta1) + gamma_pdf(a, p.alpha2, p.beta2))


def addiction_rate_deriv(a, params: OverdoseParams):
    p = params
    return 0.5 * p.r0 * (gamma_pdf_deriv(a, p.alpha1, p.beta1) + gamma_pdf_deriv(a, p.alpha2, p.beta2))


def population(t, model: PopulationModel):
    return model.n0 + model.delta_n * np.asarray(t, dtype=float)


def _gamma_window(alpha, beta, lo, hi):
    # int_lo^hi f(u; alpha, beta) du via incomplete gammas; pick the well-conditioned tail
    x_lo, x_hi = beta * np.asarray(lo, dtype=float), beta * np.asarray(hi, dtype=float)
    p_lo = regularized_lower_gamma(alpha, x_lo)
    lower = regularized_lower_gamma(alpha, x_hi) - p_lo
    upper = regularized_upper_gamma(alpha, x_lo) - regularized_upper_gamma(alpha, x_hi)
    return np.where(p_lo < 0.5, lower, upper)


def rate_integral(a, t, s, params: OverdoseParams):
    """Integral of the addiction rate along the characteristic through ``(a, t)``.

    Returns ``int_s^t r(a - t + s') ds'``, i.e. the rate integrated over the
    ages ``[a - t + s, a]``, as a difference of incomplete gamma functions
    for each component. ``s`` may be an array.
    """
    lo = a - t + np.asarray(s, dtype=float)
    if np.any(lo < -1e-12):
        raise ValueError(f"negative characteristic age (a={a}, t={t}, s={s})")
    lo = np.clip(lo, 0.0, a)
    p = params
    out = 0.5 * p.r0 * (_gamma_window(p.alpha1, p.beta1, lo, a) + _gamma_window(p.alpha2, p.beta2, lo, a))
    return out if np.ndim(out) else float(out)


def _panels(span, delta_t):
    n = max(32, math.ceil(span / delta_t))
    return n + n % 2


def _converged_simpson(integrand, lo, hi, n, rtol, max_panels=1 << 16):
    prev = simpson(integrand(np.linspace(lo, hi, n + 1)), lo, hi)
    while n < max_panels:
        n *= 2
        cur = simpson(integrand(np.linspace(lo, hi, n + 1)), lo, hi)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur
    raise QuadratureError(f"outer integral on [{lo:g}, {hi:g}] did not converge with {n} panels")


def rate_of_change(a, t, params: OverdoseParams, pop: PopulationModel = PopulationModel(),
                   init: InitialProfile = InitialProfile(), *, delta_t: float = 0.1, rtol: float = 1e-12) -> float:
    """Time derivative of the SUD density at a single point ``(a, t)``.

    Cohort branch (``a >= t``): initial-profile transport, influx at age
    ``a`` and the recruitment history along the characteristic. Boundary
    branch (``a < t``): only population growth contributes. Rate integrals
    use the incomplete-gamma identity; the outer integral is composite
    Simpson starting from ``max(32, span / delta_t)`` panels and doubling
    until successive estimates agree to ``rtol``.
    """
    if a < 0 or t < 0:
        raise ValueError("rate_of_change needs a >= 0 and t >= 0")
    mu = params.mu
    if a < t:
        if a == 0.0:
            return 0.0

        def born(s):
            expo = mu * (a - s) + rate_integral(a, a, s, params)
            return addiction_rate(s, params) * pop.delta_n * np.exp(-expo)

        return float(_converged_simpson(born, 0.0, a, _panels(a, delta_t), rtol))
    c = a - t
    r_c = addiction_rate(c, params)
    head = -(init.rho_deriv(c, pop) + init.rho(c, pop) * (mu + r_c)) * math.exp(
        -mu * t - rate_integral(a, t, 0.0, params))
    influx = addiction_rate(a, params) * population(t, pop)
    if t == 0.0:
        return float(head + influx)

    def history(s):
        u = c + s
        r_u = addiction_rate(u, params)
        g = r_u * (mu + r_u) + addiction_rate_deriv(u, params)
        expo = mu * (t - s) + rate_integral(a, t, s, params)
        return np.exp(-expo) * population(s, pop) * g

    hist = _converged_simpson(history, 0.0, t, _panels(t, delta_t), rtol)
    return float(head + influx - hist)


def death_flux(a, t, n_value, mu):
    """Overdose death density ``mu * n`` (deaths per year per year of age)."""
    return mu * np.asarray(n_value, dtype=float)


# --------------------------------------------------------------------------
# coarse graining and measurement


@dataclass(frozen=True)
class CoarseMap:
    """Fine-bin index boundaries for each coarse bin on a particular age grid."""

    starts: np.ndarray
    stops: np.ndarray
    snapped: np.ndarray


def coarse_map(grid: AgeGrid, bins: CoarseAgeBins, *, strict: bool = False) -> CoarseMap:
    """Align coarse edges with fine-bin boundaries.

    Each edge snaps to the nearest fine boundary; with ``strict`` any
    snapping is an error. Snapping that leaves a coarse bin empty, or an
    edge outside the grid, is always an error.
    """
    edges = np.asarray(bins.edges, dtype=float)
    pos = (edges - grid.a0) / grid.delta_a
    idx = np.rint(pos).astype(int)
    off = np.abs(pos - idx) > 1e-9
    if off.any():
        if strict:
            raise ConfigurationError(f"coarse edges {edges[off].tolist()} are not fine-bin boundaries")
        log.info("snapped coarse edges %s to %s", edges[off].tolist(),
                 (grid.a0 + idx[off] * grid.delta_a).round(6).tolist())
    if idx[0] < 0 or idx[-1] > grid.n_a:
        raise ConfigurationError("coarse edges extend beyond the fine age grid")
    if np.any(np.diff(idx) <= 0):
        raise ConfigurationError("fine grid too coarse: a coarse bin would be empty after snapping")
    return CoarseMap(idx[:-1], idx[1:], grid.a0 + idx * grid.delta_a)


def coarse_grain(d_tilde, grid: AgeGrid, bins: CoarseAgeBins = CoarseAgeBins(), *, strict: bool = False):
    """Sum fine-bin counts into the coarse bins; works on the last axis."""
    cmap = coarse_map(grid, bins, strict=strict)
    return _coarse_sum(np.asarray(d_tilde, dtype=float), cmap)


def _coarse_sum(d, cmap: CoarseMap):
    out = np.add.reduceat(d, cmap.starts, axis=-1)
    # reduceat runs each slice to the next start; the last one must stop at stops[-1]
    if cmap.stops[-1] < d.shape[-1]:
        out[..., -1] -= d[..., cmap.stops[-1]:].sum(axis=-1)
    return out


def measure(state: OverdoseState, grid: AgeGrid, bins: CoarseAgeBins = CoarseAgeBins(), year_baseline=None):
    """Annual deaths per coarse bin, in thousands, since ``year_baseline``."""
    coarse = coarse_grain(state.d_tilde, grid, bins)
    if year_baseline is not None:
        coarse = coarse - np.asarray(year_baseline, dtype=float)
    return coarse / DEATH_SCALE


# --------------------------------------------------------------------------
# ensemble drift


def _aux_step(delta_a: float, delta_t: float) -> Fraction:
    """Largest step dividing both ``delta_a`` and ``delta_t``."""
    fa = Fraction(delta_a).limit_denominator(10**6)
    ft = Fraction(delta_t).limit_denominator(10**6)
    if abs(float(fa) - delta_a) > 1e-12 or abs(float(ft) - delta_t) > 1e-12:
        raise ConfigurationError("age and time steps must be rational with small denominators")
    h = Fraction(math.gcd(fa.numerator * ft.denominator, ft.numerator * fa.denominator),
                 fa.denominator * ft.denominator)
    return h


class OverdoseDrift:
    """Vectorized rate of change of the augmented overdose state.

    Integrating the recruitment history by parts (``d/du [r E] = E (r' + r(mu + r))``
    with ``E(u) = exp(mu u + R(u))`` and ``R`` the cumulative addiction rate)
    turns both branches into expressions that need only one running
    integral ``H(u) = int_0^u r E``:

        a >= t:  [N0 r(c) - rho'(c) - rho(c)(mu + r(c))] E(c)/E(a) + dN (H(a) - H(c)) / E(a),  c = a - t
        a <  t:  dN H(a) / E(a)

    ``R`` and ``H`` are accumulated per member on an auxiliary age grid whose
    step divides both ``delta_a`` and ``delta_t``, so every ``a_j`` and
    ``a_j - t_k`` is a node. The trapezoid sums carry the endpoint
    derivative correction, which makes them fourth-order accurate.
    """

    def __init__(self, grid: AgeGrid, delta_t: float, pop: PopulationModel = PopulationModel(),
                 init: InitialProfile = InitialProfile(), *, max_aux_points: int = 40000):
        if grid.a0 != 0.0:
            raise ConfigurationError("the overdose model needs an age grid starting at 0")
        h = _aux_step(grid.delta_a, delta_t)
        self.grid = grid
        self.delta_t = delta_t
        self.pop = pop
        self.init = init
        self.h = float(h)
        self.age_stride = int(Fraction(grid.delta_a).limit_denominator(10**6) / h)
        self.time_stride = int(Fraction(delta_t).limit_denominator(10**6) / h)
        n_aux = (grid.n_a - 1) * self.age_stride + 1
        if n_aux > max_aux_points:
            raise ConfigurationError(f"auxiliary grid of {n_aux} points exceeds {max_aux_points}")
        self.u = self.h * np.arange(n_aux)
        self.age_index = self.age_stride * np.arange(grid.n_a)
        with np.errstate(divide="ignore"):
            self.log_u = np.log(self.u)
        self.inv_u = np.zeros_like(self.u)
        self.inv_u[1:] = 1.0 / self.u[1:]
        self.rho = init.rho(self.u, pop)
        self.rho_deriv = init.rho_deriv(self.u, pop)

    @property
    def n_a(self):
        return self.grid.n_a

    def rates(self, params: np.ndarray, t: float) -> np.ndarray:
        """``dn/dt`` on the age grid for each row of ``params`` (physical, shape (m, 6))."""
        params = np.ascontiguousarray(np.atleast_2d(params), dtype=float)
        k = int(round(t / self.delta_t))
        out = np.empty((params.shape[0], self.n_a))
        _drift_kernel(params, self.u, self.log_u, self.inv_u, self.rho, self.rho_deriv,
                      self.age_index, k * self.time_stride, self.pop.n0, self.pop.delta_n, self.h, out)
        return out


@numba.njit(cache=True)
def _gamma_node(u, log_u, inv_u, alpha, beta, log_norm):
    if u == 0.0:
        if alpha == 1.0:
            return beta, -beta * beta
        if alpha < 1.0:
            return np.inf, np.nan
        if alpha == 2.0:
            return 0.0, beta * beta
        return 0.0, (0.0 if alpha > 2.0 else np.inf)
    f = math.exp((alpha - 1.0) * log_u - beta * u + log_norm)
    return f, f * ((alpha - 1.0) * inv_u - beta)


@numba.njit(cache=True)
def _drift_kernel(params, u, log_u, inv_u, rho, rho_deriv, age_index, shift, n0, dn, h, out):
    n_aux = u.shape[0]
    r = np.empty(n_aux)
    rp = np.empty(n_aux)
    logE = np.empty(n_aux)
    H = np.empty(n_aux)
    em = h * h / 12.0
    for i in range(params.shape[0]):
        mu, r0, a1, b1, a2, b2 = params[i, 0], params[i, 1], params[i, 2], params[i, 3], params[i, 4], params[i, 5]
        c1 = a1 * math.log(b1) - math.lgamma(a1)
        c2 = a2 * math.log(b2) - math.lgamma(a2)
        for j in range(n_aux):
            f1, f1p = _gamma_node(u[j], log_u[j], inv_u[j], a1, b1, c1)
            f2, f2p = _gamma_node(u[j], log_u[j], inv_u[j], a2, b2, c2)
            r[j] = 0.5 * r0 * (f1 + f2)
            rp[j] = 0.5 * r0 * (f1p + f2p)
        # cumulative rate R and log E = mu u + R, trapezoid with endpoint correction
        R = 0.0
        logE[0] = 0.0
        for j in range(1, n_aux):
            R += 0.5 * h * (r[j] + r[j - 1])
            logE[j] = mu * u[j] + R - em * (rp[j] - rp[0])
        top = logE[n_aux - 1]
        # H = int r E (E normalized by its value at the last node); (r E)' = E (r' + r (mu + r))
        acc = 0.0
        e_prev = math.exp(logE[0] - top)
        q_prev = r[0] * e_prev
        qp0 = e_prev * (rp[0] + r[0] * (mu + r[0]))
        H[0] = 0.0
        for j in range(1, n_aux):
            e = math.exp(logE[j] - top)
            q = r[j] * e
            acc += 0.5 * h * (q + q_prev)
            H[j] = acc - em * (e * (rp[j] + r[j] * (mu + r[j])) - qp0)
            q_prev = q
        for j in range(age_index.shape[0]):
            ia = age_index[j]
            e_a = math.exp(logE[ia] - top)
            ic = ia - shift
            if ic < 0:
                out[i, j] = dn * H[ia] / e_a
            else:
                src = n0 * r[ic] - rho_deriv[ic] - rho[ic] * (mu + r[ic])
                out[i, j] = src * math.exp(logE[ic] - logE[ia]) + dn * (H[ia] - H[ic]) / e_a


# --------------------------------------------------------------------------
# state-space wiring


@dataclass(frozen=True)
class NoiseConfig:
    """Noise settings; ``q_structure`` is ``"diag"`` (scale * I) or ``"ones"`` (scale * J)."""

    q_scale: float = 1e-4
    q_structure: str = "diag"
    r_var: float = 1e-4
    p0_base: float = 1e-4
    p0_param_var: float = 1e-2
    p0_structure: str = "dense"

    def __post_init__(self):
        if self.q_structure not in ("diag", "ones"):
            raise ConfigurationError("q_structure must be 'diag' or 'ones'")
        if self.p0_structure not in ("diag", "dense"):
            raise ConfigurationError("p0_structure must be 'diag' or 'dense'")


def process_matrix(dim: int, scale: float, structure: str) -> np.ndarray:
    if structure == "ones":
        return np.full((dim, dim), scale)
    return scale * np.eye(dim)


@dataclass(frozen=True)
class OverdoseLayout:
    n_a: int

    @property
    def dim_x(self):
        return 2 * self.n_a + 6

    @property
    def n_block(self):
        return slice(0, self.n_a)

    @property
    def d_block(self):
        return slice(self.n_a, 2 * self.n_a)

    @property
    def param_block(self):
        return slice(2 * self.n_a, 2 * self.n_a + 6)

    @property
    def transform(self) -> PositivityTransform:
        return PositivityTransform(tuple(range(2 * self.n_a, 2 * self.n_a + 6)))


def build_overdose_model(grid: AgeGrid, delta_t: float = 0.1, pop: PopulationModel = PopulationModel(),
                         init: InitialProfile = InitialProfile(), bins: CoarseAgeBins = CoarseAgeBins(),
                         noise: NoiseConfig = NoiseConfig()) -> StateSpaceModel:
    """Augmented overdose model ``[n, D~, mu, r0, alpha1, beta1, alpha2, beta2]``.

    The measurement is the coarse-grained ``D~`` in thousands. ``D~`` is reset
    to zero after every assimilation slot, so with yearly slots it holds the
    deaths of the current year, which is what annual death counts report.
    """
    layout = OverdoseLayout(grid.n_a)
    drift_core = OverdoseDrift(grid, delta_t, pop, init)
    cmap = coarse_map(grid, bins)
    dim_x, dim_z = layout.dim_x, len(bins)
    Q = process_matrix(dim_x, noise.q_scale, noise.q_structure)
    R = noise.r_var * np.eye(dim_z)
    nb, db, pb = layout.n_block, layout.d_block, layout.param_block

    def drift(x, t):
        out = np.zeros_like(x)
        params = x[:, pb]
        out[:, nb] = drift_core.rates(params, t)
        out[:, db] = death_flux(None, t, x[:, nb], params[:, :1]) * grid.delta_a
        return out

    def measure_fn(x, t):
        return _coarse_sum(x[:, db], cmap) / DEATH_SCALE

    def reset_deaths(members, t):
        members[:, db] = 0.0
        return members

    return StateSpaceModel(dim_x, dim_z, drift, measure_fn, lambda t: Q, lambda t: R, slot_hook=reset_deaths)


def overdose_initial(grid: AgeGrid, params: OverdoseParams = OverdoseParams(),
                     pop: PopulationModel = PopulationModel(), init: InitialProfile = InitialProfile(),
                     noise: NoiseConfig = NoiseConfig()) -> GaussianInit:
    """Initial mean ``[rho(a_j), 0, log params]`` and covariance.

    The covariance is ``p0_base`` everywhere (or only on the diagonal with
    ``p0_structure="diag"``) and ``p0_param_var`` on the parameter diagonal.
    """
    layout = OverdoseLayout(grid.n_a)
    mean = np.concatenate([init.rho(grid.ages, pop), np.zeros(grid.n_a), np.log(params.as_array())])
    dim = layout.dim_x
    if noise.p0_structure == "dense":
        cov = np.full((dim, dim), noise.p0_base)
    else:
        cov = noise.p0_base * np.eye(dim)
    idx = np.arange(layout.param_block.start, layout.param_block.stop)
    cov[idx, idx] = noise.p0_param_var
    return GaussianInit(mean, cov)


def simulate_forward(grid: AgeGrid, delta_t: float, n_steps: int, params: OverdoseParams = OverdoseParams(),
                     pop: PopulationModel = PopulationModel(), init: InitialProfile = InitialProfile()):
    """Noise-free Euler run of the augmented dynamics; returns a list of OverdoseState."""
    drift_core = OverdoseDrift(grid, delta_t, pop, init)
    n = init.rho(grid.ages, pop)
    d = np.zeros(grid.n_a)
    p = params.as_array()[None, :]
    states = [OverdoseState(n.copy(), d.copy(), params)]
    for k in range(n_steps):
        t = k * delta_t
        rate = drift_core.rates(p, t)[0]
        d = d + delta_t * death_flux(None, t, n, params.mu) * grid.delta_a
        n = n + delta_t * rate
        states.append(OverdoseState(n.copy(), d.copy(), params))
    return states
