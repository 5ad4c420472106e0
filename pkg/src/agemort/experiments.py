"""Drivers for the four CLI commands.

Each ``run_*`` function takes a resolved :class:`~agemort.config.RunConfig`
and returns plain results; writing files is left to :mod:`agemort.cli`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agestruct import AgeGrid, SimpleModelParams, peak_age, simple_rate_of_change, solve_simple
from .config import RunConfig
from .dataio import ObservationBatch, RunOutput
from .enkf import FilterConfig, GaussianInit, PositivityTransform, StateSpaceModel, run_filter, stream
from .errors import ParseError
from .overdose import (DEATH_SCALE, PARAM_NAMES, CoarseAgeBins, InitialProfile, NoiseConfig, OverdoseLayout,
                       OverdoseParams, PopulationModel, build_overdose_model, coarse_grain, overdose_initial,
                       simulate_forward)

log = logging.getLogger(__name__)

_TRUTH_NOISE = 3  # stream purpose for synthetic observation noise


def filter_config(cfg: RunConfig) -> FilterConfig:
    return FilterConfig(cfg.delta_t, cfg.update_interval, cfg.ensemble_size, cfg.seed, cfg.chunk_size)


# --------------------------------------------------------------------------
# simulate


@dataclass
class SimulateResult:
    output: RunOutput
    ages: np.ndarray
    profiles: dict


def run_simulate(cfg: RunConfig) -> SimulateResult:
    """Closed-form profiles at ``cfg.times`` and the peak-age trajectory at ``cfg.peak_times``."""
    params = SimpleModelParams(cfg.mu, cfg.lam)
    ages = AgeGrid(0.0, cfg.delta_a, cfg.n_a).ages
    profiles = {t: np.asarray(solve_simple(params, ages, t)) for t in cfg.times}
    records = []
    for t in sorted(set(cfg.peak_times)):
        n = np.asarray(solve_simple(params, ages, t))
        records.append({"time": t, "peak_age": peak_age(t, params), "grid_peak_age": float(ages[np.argmax(n)]),
                        "n_max": float(n.max()), "n_total": float(n.sum() * cfg.delta_a)})
    return SimulateResult(RunOutput("simulate", records), ages, profiles)


# --------------------------------------------------------------------------
# twin experiment


def build_twin_model(grid: AgeGrid, q_scale: float, q_structure: str, r_var: float):
    """Augmented state ``[n(a_j), log mu, log lam]`` observed through ``n``."""
    n_a = grid.n_a
    ages = grid.ages[None, :]
    dim = n_a + 2
    Q = np.full((dim, dim), q_scale) if q_structure == "ones" else q_scale * np.eye(dim)
    R = r_var * np.eye(n_a)

    def drift(x, t):
        out = np.zeros_like(x)
        out[:, :n_a] = simple_rate_of_change(ages, t, mu=x[:, n_a:n_a + 1], lam=x[:, n_a + 1:])
        return out

    def measure(x, t):
        return x[:, :n_a]

    model = StateSpaceModel(dim, n_a, drift, measure, lambda t: Q, lambda t: R)
    return model, PositivityTransform((n_a, n_a + 1))


def twin_truth(cfg: RunConfig, grid: AgeGrid, n_steps: int) -> dict:
    """True densities at every step, from the closed form or the filter's own Euler scheme."""
    params = SimpleModelParams(cfg.mu, cfg.lam)
    if cfg.truth == "analytic":
        return {k: np.asarray(solve_simple(params, grid.ages, k * cfg.delta_t)) for k in range(n_steps + 1)}
    n = np.zeros(grid.n_a)
    out = {0: n.copy()}
    for k in range(n_steps):
        n = n + cfg.delta_t * simple_rate_of_change(grid.ages, k * cfg.delta_t, params)
        out[k + 1] = n.copy()
    return out


@dataclass
class TwinResult:
    output: RunOutput
    times: np.ndarray
    mean: np.ndarray  # (steps + 1, 2) physical mu, lam
    sd: np.ndarray


def run_twin(cfg: RunConfig) -> TwinResult:
    grid = AgeGrid(0.0, cfg.delta_a, cfg.n_a)
    n_a = grid.n_a
    model, transform = build_twin_model(grid, cfg.q_scale, cfg.q_structure, cfg.r_var)
    fc = filter_config(cfg)
    n_steps = int(round(cfg.horizon / cfg.delta_t))
    truth = twin_truth(cfg, grid, n_steps)
    schedule = []
    for k in range(cfg.update_interval, n_steps + 1, cfg.update_interval):
        noise = stream(cfg.seed, _TRUTH_NOISE, k).standard_normal(n_a) * np.sqrt(cfg.r_var)
        schedule.append((k * cfg.delta_t, truth[k] + noise))
    mean0 = np.concatenate([np.full(n_a, cfg.init_n), np.log([cfg.init_mu, cfg.init_lam])])
    cov0 = np.diag(np.concatenate([np.full(n_a, cfg.p0_n), [cfg.p0_param, cfg.p0_param]]))

    def summarize(x, t, stage):
        p = np.exp(x[:, n_a:])
        return {"mean": p.mean(axis=0), "sd": p.std(axis=0, ddof=1)}

    history = run_filter(model, GaussianInit(mean0, cov0), transform, schedule, fc, n_steps=n_steps,
                         summarize=summarize)
    post = [e for e in history if e.stage == "posterior"]
    times = np.array([e.time for e in post])
    mean = np.array([e.extras["mean"] for e in post])
    sd = np.array([e.extras["sd"] for e in post])
    records = []
    for t, m, s in zip(times, mean, sd):
        rec = {"time": round(float(t), 10)}
        for i, name in enumerate(("mu", "lam")):
            rec.update({f"{name}_mean": m[i], f"{name}_sd": s[i], f"{name}_lo3": m[i] - 3 * s[i],
                        f"{name}_hi3": m[i] + 3 * s[i]})
        rec.update({"mu_true": cfg.mu, "lam_true": cfg.lam})
        records.append(rec)
    return TwinResult(RunOutput("twin", records), times, mean, sd)


# --------------------------------------------------------------------------
# overdose fit and forecast


def slot_time(year: int, cfg: RunConfig) -> float:
    """Model time at the end of calendar ``year``, when its deaths are assimilated."""
    return float(year + 1 - cfg.start_year)


def check_years(observations: dict, cfg: RunConfig) -> list:
    wanted = range(cfg.first_year, cfg.last_year + 1)
    gaps = [y for y in wanted if y not in observations]
    if gaps:
        raise ParseError(f"observations missing for years {', '.join(map(str, gaps))}")
    return [observations[y] for y in wanted]


def overdose_setup(cfg: RunConfig):
    grid = AgeGrid(0.0, cfg.delta_a, cfg.n_a)
    pop = PopulationModel(cfg.n0, cfg.delta_n)
    init = InitialProfile(cfg.sud_fraction, cfg.sud_alpha, cfg.sud_beta)
    params = OverdoseParams(cfg.od_mu, cfg.od_r0, cfg.od_alpha1, cfg.od_beta1, cfg.od_alpha2, cfg.od_beta2)
    noise = NoiseConfig(cfg.q_scale, cfg.q_structure, cfg.r_var, cfg.p0_base, cfg.p0_param_var, cfg.p0_structure)
    return grid, pop, init, params, noise


@dataclass
class YearPrediction:
    """One-year-ahead death prediction (persons) per reporting age group."""

    year: int
    mean: np.ndarray
    sd: np.ndarray
    observed: np.ndarray | None = None  # NaN where suppressed
    assimilated: bool = False


@dataclass
class OverdoseResult:
    output: RunOutput
    predictions: dict = field(default_factory=dict)
    param_names: tuple = ()
    param_mean: np.ndarray | None = None
    param_sd: np.ndarray | None = None
    times: np.ndarray | None = None


SUMMARY_NAMES = PARAM_NAMES + ("mean_age1", "mean_age2")


def run_overdose(cfg: RunConfig, observations: dict, *, forecast: bool) -> OverdoseResult:
    """Assimilate yearly deaths ``first_year..last_year``; with ``forecast`` continue without updates.

    The prediction for year ``Y`` is the prior at the end of ``Y``, so it
    only uses observations up to ``Y - 1``. Its standard deviation combines
    the ensemble spread of the predicted counts with the measurement noise.
    """
    batches = check_years(observations, cfg)
    grid, pop, init, params, noise = overdose_setup(cfg)
    layout = OverdoseLayout(grid.n_a)
    bins = CoarseAgeBins()
    model = build_overdose_model(grid, cfg.delta_t, pop, init, bins, noise)
    init_dist: GaussianInit = overdose_initial(grid, params, pop, init, noise)
    fc = filter_config(cfg)
    schedule = [(slot_time(b.year, cfg), b.as_observation(DEATH_SCALE)) for b in batches]
    last_year = cfg.last_year + (cfg.forecast_years if forecast else 0)
    n_steps = int(round(slot_time(last_year, cfg))) * cfg.update_interval
    pb = layout.param_block

    def summarize(x, t, stage):
        p = np.exp(x[:, pb])
        derived = np.column_stack([p, p[:, 2] / p[:, 3], p[:, 4] / p[:, 5]])
        return {"mean": derived.mean(axis=0), "sd": derived.std(axis=0, ddof=1)}

    log.info("running %s: M=%d, %d steps", "forecast" if forecast else "fit", fc.ensemble_size, n_steps)
    history = run_filter(model, init_dist, layout.transform, schedule, fc, n_steps=n_steps, summarize=summarize)

    observed = {b.year: b for b in batches}
    predictions = {}
    for e in history:
        if e.stage == "prior" and e.obs_mean is not None:
            year = cfg.start_year + int(round(e.time)) - 1
            if year < cfg.first_year:
                continue
            batch: ObservationBatch | None = observed.get(year)
            sd = np.sqrt(e.obs_var + cfg.r_var) * DEATH_SCALE
            predictions[year] = YearPrediction(
                year, e.obs_mean * DEATH_SCALE, sd,
                None if batch is None else batch.as_observation(1.0), batch is not None)

    post = [e for e in history if e.stage == "posterior"]
    records = []
    for e in post:
        t = round(float(e.time), 10)
        rec = {"time": t, "calendar_time": cfg.start_year + t}
        for i, name in enumerate(SUMMARY_NAMES):
            rec[f"{name}_mean"] = float(e.extras["mean"][i])
            rec[f"{name}_sd"] = float(e.extras["sd"][i])
        year = cfg.start_year + int(round(t)) - 1
        at_slot = abs(t - round(t)) < 1e-9 and t > 0 and year in predictions
        for j in range(len(bins)):
            p = predictions[year] if at_slot else None
            rec[f"pred_mean_{j}"] = None if p is None else float(p.mean[j])
            rec[f"pred_sd_{j}"] = None if p is None else float(p.sd[j])
            obs = None if p is None or p.observed is None or np.isnan(p.observed[j]) else float(p.observed[j])
            rec[f"obs_{j}"] = obs
        records.append(rec)
    return OverdoseResult(
        RunOutput("forecast" if forecast else "fit", records), predictions, SUMMARY_NAMES,
        np.array([e.extras["mean"] for e in post]), np.array([e.extras["sd"] for e in post]),
        np.array([e.time for e in post]))


def plot_rows(predictions: dict, k_sigma: float, years=None) -> list:
    """Rows for the plot-data CSV, one per (year, age group)."""
    bins = CoarseAgeBins()
    edges = bins.edges
    rows = []
    for year in sorted(predictions if years is None else years):
        p = predictions[year]
        for j in range(len(bins)):
            obs = None if p.observed is None or np.isnan(p.observed[j]) else float(p.observed[j])
            rows.append({"year": year, "bin_low": edges[j], "bin_high": edges[j + 1],
                         "midpoint": float(bins.midpoints[j]), "observed": obs,
                         "predicted_mean": float(p.mean[j]), "predicted_sd": float(p.sd[j]),
                         "band_sigma": k_sigma, "band_lo": float(p.mean[j] - k_sigma * p.sd[j]),
                         "band_hi": float(p.mean[j] + k_sigma * p.sd[j])})
    return rows


def band_fraction(pred: YearPrediction, k_sigma: float, reference=None) -> float:
    """Fraction of observed age groups whose count lies within ``k_sigma`` of the prediction."""
    ref = pred.observed if reference is None else np.asarray(reference, dtype=float)
    ok = ~np.isnan(ref)
    if not ok.any():
        return float("nan")
    inside = np.abs(ref[ok] - pred.mean[ok]) <= k_sigma * pred.sd[ok]
    return float(inside.mean())


def bins_between(lo: float, hi: float) -> np.ndarray:
    """Indices of reporting groups lying inside ``[lo, hi]``."""
    e = np.asarray(CoarseAgeBins().edges)
    return np.flatnonzero((e[:-1] >= lo) & (e[1:] <= hi))


def synthetic_batches(cfg: RunConfig, params: OverdoseParams, years, *, seed: int = 0,
                      noise: str = "gaussian") -> dict:
    """Yearly deaths from a noise-free run of the model, keyed by year.

    ``noise="gaussian"`` adds ``N(0, r_var)`` in thousands (the filter's own
    measurement model), ``"poisson"`` draws counts. Only for exercising the
    pipeline when no recorded data is at hand.
    """
    grid, pop, init, _, _ = overdose_setup(cfg)
    per_year = int(round(1.0 / cfg.delta_t))
    n_steps = int(round(slot_time(max(years), cfg))) * per_year
    states = simulate_forward(grid, cfg.delta_t, n_steps, params, pop, init)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    out = {}
    for year in years:
        k = int(round(slot_time(year, cfg))) * per_year
        inc = coarse_grain(states[k].d_tilde - states[k - per_year].d_tilde, grid, CoarseAgeBins())
        if noise == "poisson":
            counts = rng.poisson(np.clip(inc, 0.0, None))
        else:
            noisy = inc + DEATH_SCALE * np.sqrt(cfg.r_var) * rng.standard_normal(inc.shape)
            counts = np.rint(np.clip(noisy, 0.0, None)).astype(np.int64)
        out[year] = ObservationBatch(year, counts, np.zeros(len(counts), dtype=bool))
    return out
