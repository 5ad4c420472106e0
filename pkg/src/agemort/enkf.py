"""Perturbed-observation ensemble Kalman filter with augmented-state support.

Ensembles are stored as ``(M, dim_x)`` arrays, one member per row. Model
callbacks act row-wise on blocks of members, so a block can be any subset
of rows; the filter evaluates them in fixed-size chunks.

Coordinates listed in a :class:`PositivityTransform` are stored as logs.
Drift and measurement callbacks always see physical values; the Euler step,
process noise and Kalman update act on the stored (log) values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigurationError, NumericalError, PropagationError

log = logging.getLogger(__name__)

# stream purposes for the counter-addressed generators
_INIT, _PROCESS, _OBS = 0, 1, 2


@dataclass(frozen=True)
class StateSpaceModel:
    """Dynamics ``dx/dt = f(x, t) + w`` observed through ``z = h(x, t) + v``.

    ``drift`` and ``measure`` take a ``(m, dim_x)`` block of physical states
    and return ``(m, dim_x)`` rates / ``(m, dim_z)`` observations. Rates are
    rates of the *stored* coordinates (zero for static parameters).
    ``slot_hook``, when set, is applied to the stored ensemble after every
    assimilation slot, whether or not an observation was due.
    """

    dim_x: int
    dim_z: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    measure: Callable[[np.ndarray, float], np.ndarray]
    process_cov: Callable[[float], np.ndarray]
    obs_cov: Callable[[float], np.ndarray]
    slot_hook: Optional[Callable[[np.ndarray, float], np.ndarray]] = None


@dataclass
class Ensemble:
    members: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=float)
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise ConfigurationError("an ensemble needs at least two members stored as rows")
        if not np.all(np.isfinite(self.members)):
            raise PropagationError("ensemble contains non-finite values")

    @property
    def size(self) -> int:
        return self.members.shape[0]


@dataclass
class GaussianInit:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ConfigurationError(f"initial covariance shape {self.cov.shape} does not match state ({n},)")


@dataclass(frozen=True)
class PositivityTransform:
    indices: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def check(self, dim_x: int):
        if any(i < 0 or i >= dim_x for i in self.indices):
            raise ConfigurationError(f"transform indices {self.indices} outside [0, {dim_x})")


@dataclass(frozen=True)
class FilterConfig:
    delta_t: float = 0.1
    update_interval: int = 5
    ensemble_size: int = 500
    seed: int = 0
    chunk_size: int = 1000

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ConfigurationError("delta_t must be positive")
        if self.update_interval < 1:
            raise ConfigurationError("update_interval must be at least 1")
        if self.ensemble_size < 2:
            raise ConfigurationError("ensemble_size must be at least 2")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be positive")


@dataclass
class FilterEstimate:
    """Ensemble summary at one time; ``cov`` is only kept on request.

    ``obs_mean``/``obs_var`` hold the predicted-observation mean and
    ensemble variance (without R) and are set on priors at assimilation slots.
    """

    time: float
    mean: np.ndarray
    var: np.ndarray
    stage: str
    cov: Optional[np.ndarray] = None
    obs_mean: Optional[np.ndarray] = None
    obs_var: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def to_physical(latent, transform: PositivityTransform):
    out = np.array(latent, dtype=float, copy=True)
    if transform.indices:
        idx = list(transform.indices)
        out[..., idx] = np.exp(out[..., idx])
    return out


def to_latent(physical, transform: PositivityTransform):
    out = np.array(physical, dtype=float, copy=True)
    if transform.indices:
        idx = list(transform.indices)
        if np.any(out[..., idx] <= 0):
            raise ValueError("to_latent: transformed coordinates must be strictly positive")
        out[..., idx] = np.log(out[..., idx])
    return out


def stream(seed: int, purpose: int, step: int) -> np.random.Generator:
    """Independent generator addressed by ``(seed, purpose, step)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(step)))
    return np.random.Generator(np.random.Philox(ss))


def noise_factor(cov) -> np.ndarray:
    """Return ``L`` with ``L @ L.T == cov``, dropping null directions.

    Diagonal matrices are factored directly; anything else goes through a
    symmetric eigendecomposition so rank-deficient matrices are fine.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise ConfigurationError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(np.abs(cov).max(), 1.0)):
        raise ConfigurationError("covariance is not symmetric")
    diag = np.diag(cov)
    if np.count_nonzero(cov - np.diag(diag)) == 0:
        if np.any(diag < 0):
            raise ConfigurationError("covariance has negative variances")
        keep = np.flatnonzero(diag > 0)
        L = np.zeros((n, keep.size))
        L[keep, np.arange(keep.size)] = np.sqrt(diag[keep])
        return L
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(w.max(), 0.0)
    if w.min() < -1e-10 * max(scale, 1e-300):
        raise ConfigurationError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3g})")
    keep = w > 1e-12 * scale
    return v[:, keep] * np.sqrt(w[keep])


class _FactorCache:
    # factors are reused while the callback keeps returning the same array object
    def __init__(self):
        self._src = None
        self._factor = None

    def __call__(self, cov):
        if cov is not self._src:
            self._factor = noise_factor(cov)
            self._src = cov
        return self._factor


def _chunks(m: int, size: int):
    for lo in range(0, m, size):
        yield slice(lo, min(lo + size, m))


def init_ensemble(init: GaussianInit, config: FilterConfig) -> Ensemble:
    """Draw ``config.ensemble_size`` members from ``N(init.mean, init.cov)``."""
    L = noise_factor(init.cov)
    members = np.tile(init.mean, (config.ensemble_size, 1))
    if L.shape[1]:
        xi = stream(config.seed, _INIT, 0).standard_normal((config.ensemble_size, L.shape[1]))
        members += xi @ L.T
    return Ensemble(members, 0.0)


def ensemble_moments(ens: Ensemble):
    """Sample mean and ``1/(M-1)`` covariance of the stored members."""
    x = ens.members
    mean = x.mean(axis=0)
    dev = x - mean
    cov = dev.T @ dev / (x.shape[0] - 1)
    return mean, cov


def _apply(fn, members, t, transform, chunk, width, what):
    out = np.empty((members.shape[0], width))
    for sl in _chunks(members.shape[0], chunk):
        vals = np.asarray(fn(to_physical(members[sl], transform), t), dtype=float)
        bad = ~np.all(np.isfinite(vals), axis=1)
        if bad.any():
            member = sl.start + int(np.flatnonzero(bad)[0])
            raise PropagationError(f"{what} returned non-finite values for member {member} at t={t:g}")
        out[sl] = vals
    return out


def forecast(ens: Ensemble, model: StateSpaceModel, t_k: float, config: FilterConfig,
             transform: PositivityTransform = PositivityTransform(), *, _factor=None) -> Ensemble:
    """One Euler step of every member plus process noise ``N(0, Q(t_k))``."""
    if abs(ens.time - t_k) > 1e-9 * max(1.0, abs(t_k)):
        raise ConfigurationError(f"ensemble time {ens.time} does not match forecast start {t_k}")
    step = int(round(t_k / config.delta_t))
    x = ens.members
    rates = _apply(model.drift, x, t_k, transform, config.chunk_size, model.dim_x, "drift")
    new = x + config.delta_t * rates
    L = (_factor or noise_factor)(model.process_cov(t_k))
    if L.shape[1]:
        xi = stream(config.seed, _PROCESS, step).standard_normal((x.shape[0], L.shape[1]))
        new += xi @ L.T
    return Ensemble(new, step * config.delta_t + config.delta_t)


def predict_observations(ens: Ensemble, model: StateSpaceModel, t: float, config: FilterConfig,
                         transform: PositivityTransform = PositivityTransform()) -> np.ndarray:
    return _apply(model.measure, ens.members, t, transform, config.chunk_size, model.dim_z, "measure")


@dataclass
class Gain:
    """Kalman gain and the covariances it was built from (observed rows only)."""

    K: np.ndarray
    P_zz: np.ndarray
    P_xz: np.ndarray
    observed: np.ndarray
    z_pred: np.ndarray


def kalman_gain(ens: Ensemble, z_pred: np.ndarray, R: np.ndarray, observed: np.ndarray) -> Gain:
    """Gain ``P_xz P_zz^-1`` from the ensemble and its predicted observations."""
    m = ens.size
    zp = z_pred[:, observed]
    Rk = R[np.ix_(observed, observed)]
    x_dev = ens.members - ens.members.mean(axis=0)
    z_dev = zp - zp.mean(axis=0)
    P_zz = z_dev.T @ z_dev / (m - 1) + Rk
    P_xz = x_dev.T @ z_dev / (m - 1)
    P_zz = 0.5 * (P_zz + P_zz.T)
    try:
        factor = cho_factor(P_zz)
    except LinAlgError:
        jitter = 1e-10 * np.trace(P_zz) / P_zz.shape[0]
        log.warning("innovation covariance not positive definite; adding jitter %.3g", jitter)
        try:
            factor = cho_factor(P_zz + jitter * np.eye(P_zz.shape[0]))
        except LinAlgError as exc:
            raise NumericalError("innovation covariance is singular even after jitter") from exc
    K = cho_solve(factor, P_xz.T).T
    return Gain(K, P_zz, P_xz, observed, zp)


def update(ens_prior: Ensemble, z, model: StateSpaceModel, t: float, config: FilterConfig,
           transform: PositivityTransform = PositivityTransform(), *, z_pred=None) -> Ensemble:
    """Perturbed-observation update. NaN entries of ``z`` are treated as missing."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dim_z,):
        raise ConfigurationError(f"observation has shape {z.shape}, expected ({model.dim_z},)")
    observed = np.flatnonzero(np.isfinite(z))
    if observed.size == 0:
        return Ensemble(ens_prior.members.copy(), ens_prior.time)
    if z_pred is None:
        z_pred = predict_observations(ens_prior, model, t, config, transform)
    R = np.asarray(model.obs_cov(t), dtype=float)
    gain = kalman_gain(ens_prior, z_pred, R, observed)
    step = int(round(t / config.delta_t))
    L = noise_factor(R[np.ix_(observed, observed)])
    eta = np.zeros((ens_prior.size, observed.size))
    if L.shape[1]:
        eta = stream(config.seed, _OBS, step).standard_normal((ens_prior.size, L.shape[1])) @ L.T
    innov = z[observed] + eta - gain.z_pred
    return Ensemble(ens_prior.members + innov @ gain.K.T, ens_prior.time)


def _estimate(ens, stage, store_cov, summarize):
    x = ens.members
    mean = x.mean(axis=0)
    est = FilterEstimate(ens.time, mean, x.var(axis=0, ddof=1), stage)
    if store_cov:
        est.cov = ensemble_moments(ens)[1]
    if summarize is not None:
        est.extras = summarize(x, ens.time, stage)
    return est


def run_filter(model: StateSpaceModel, init: GaussianInit, transform: PositivityTransform,
               obs_schedule: Sequence, config: FilterConfig, *, n_steps: int | None = None,
               store_cov: bool = False, summarize=None, return_ensemble: bool = False):
    """Alternate Euler forecasts and perturbed-observation updates.

    ``obs_schedule`` is a sequence of ``(time, z)`` pairs; each time must be a
    multiple of ``delta_t * update_interval``. Returns prior and posterior
    estimates for every step (posterior equals prior when nothing is
    assimilated). ``summarize(stored_members, t, stage)`` may return a dict
    saved on each estimate. With ``return_ensemble`` the final ensemble is
    returned as well.
    """
    transform.check(model.dim_x)
    if init.mean.shape != (model.dim_x,):
        raise ConfigurationError(f"initial mean has shape {init.mean.shape}, expected ({model.dim_x},)")
    slot_len = config.delta_t * config.update_interval
    due = {}
    for t, z in obs_schedule:
        k = t / slot_len
        if t <= 0 or abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ConfigurationError(f"observation time {t} is not a positive multiple of {slot_len:g}")
        slot = int(round(k))
        if slot in due:
            raise ConfigurationError(f"duplicate observation time {t}")
        due[slot] = np.asarray(z, dtype=float)
    if n_steps is None:
        n_steps = max(due, default=0) * config.update_interval
    if due and max(due) * config.update_interval > n_steps:
        raise ConfigurationError("observation schedule extends past the last step")

    q_factor = _FactorCache()
    ens = init_ensemble(init, config)
    history = [_estimate(ens, "posterior", store_cov, summarize)]
    for k in range(n_steps):
        t_k = k * config.delta_t
        ens = forecast(ens, model, t_k, config, transform, _factor=q_factor)
        t_next = ens.time
        prior = _estimate(ens, "prior", store_cov, summarize)
        history.append(prior)
        if (k + 1) % config.update_interval:
            history.append(_posterior_copy(prior))
            continue
        slot = (k + 1) // config.update_interval
        z_pred = predict_observations(ens, model, t_next, config, transform)
        prior.obs_mean = z_pred.mean(axis=0)
        prior.obs_var = z_pred.var(axis=0, ddof=1)
        if slot in due:
            log.info("assimilating observation at t=%.3f", t_next)
            ens = update(ens, due[slot], model, t_next, config, transform, z_pred=z_pred)
            history.append(_estimate(ens, "posterior", store_cov, summarize))
        else:
            history.append(_posterior_copy(prior))
        if model.slot_hook is not None:
            ens = Ensemble(model.slot_hook(ens.members.copy(), t_next), t_next)
    if return_ensemble:
        return history, ens
    return history


def _posterior_copy(prior: FilterEstimate) -> FilterEstimate:
    return FilterEstimate(prior.time, prior.mean, prior.var, "posterior", prior.cov,
                          prior.obs_mean, prior.obs_var, prior.extras)
