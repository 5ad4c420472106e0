"""Scalar linear-Gaussian benchmark and its exact Kalman recursion."""

import numpy as np

from agemort.enkf import FilterConfig, GaussianInit, PositivityTransform, StateSpaceModel, run_filter

DT, DECAY, Q, R = 0.1, 0.5, 0.01, 0.04
M0, P0 = 1.0, 0.5


def model():
    return StateSpaceModel(1, 1, lambda x, t: -DECAY * x, lambda x, t: x.copy(),
                           lambda t: np.array([[Q]]), lambda t: np.array([[R]]))


def observations(n_steps, seed):
    rng = np.random.default_rng(1000 + seed)
    x = M0 + np.sqrt(P0) * rng.standard_normal()
    out = []
    for k in range(1, n_steps + 1):
        x = (1 - DECAY * DT) * x + np.sqrt(Q) * rng.standard_normal()
        out.append((k * DT, np.array([x + np.sqrt(R) * rng.standard_normal()])))
    return out


def kalman(schedule):
    """Exact posterior means and variances after each observation."""
    F = 1 - DECAY * DT
    m, p = M0, P0
    means, variances = [], []
    for _, z in schedule:
        m, p = F * m, F * F * p + Q
        k = p / (p + R)
        m, p = m + k * (z[0] - m), (1 - k) * p
        means.append(m)
        variances.append(p)
    return np.array(means), np.array(variances)


def enkf_vs_kalman(m_size, seed, n_steps=50):
    """Mean absolute errors of the EnKF posterior: mean in units of the exact sd, variance relative."""
    sched = observations(n_steps, seed)
    cfg = FilterConfig(DT, 1, m_size, seed)
    hist = run_filter(model(), GaussianInit([M0], [[P0]]), PositivityTransform(), sched, cfg)
    post = [e for e in hist if e.stage == "posterior"][1:]
    mean = np.array([e.mean[0] for e in post])
    var = np.array([e.var[0] for e in post])
    km, kv = kalman(sched)
    return np.mean(np.abs(mean - km) / np.sqrt(kv)), np.mean(np.abs(var - kv) / kv)
