import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import scalar_kf
from agemort.enkf import (Ensemble, FilterConfig, GaussianInit, PositivityTransform, StateSpaceModel,
                          ensemble_moments, forecast, init_ensemble, kalman_gain, noise_factor,
                          predict_observations, run_filter, to_latent, to_physical, update)
from agemort.errors import ConfigurationError, PropagationError


def linear_model(dim=2, rate=-1.0, q=0.0, r=0.1, obs_dim=None):
    obs_dim = dim if obs_dim is None else obs_dim
    Q = q * np.eye(dim)
    R = r * np.eye(obs_dim)
    return StateSpaceModel(dim, obs_dim, lambda x, t: rate * x, lambda x, t: x[:, :obs_dim],
                           lambda t: Q, lambda t: R)


def test_init_zero_covariance_gives_identical_members():
    ens = init_ensemble(GaussianInit([1.0, 2.0], np.zeros((2, 2))), FilterConfig(ensemble_size=10))
    np.testing.assert_array_equal(ens.members, np.tile([1.0, 2.0], (10, 1)))


def test_init_sample_mean_law_of_large_numbers():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    m = 100_000
    ens = init_ensemble(GaussianInit([1.0, -1.0], cov), FilterConfig(ensemble_size=m, seed=3))
    err = np.abs(ens.members.mean(axis=0) - [1.0, -1.0])
    assert np.all(err < 4 * np.sqrt(np.diag(cov) / m))


def test_init_is_deterministic():
    init = GaussianInit(np.zeros(3), np.eye(3))
    a = init_ensemble(init, FilterConfig(ensemble_size=50, seed=9)).members
    b = init_ensemble(init, FilterConfig(ensemble_size=50, seed=9)).members
    c = init_ensemble(init, FilterConfig(ensemble_size=50, seed=10)).members
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_init_rejects_indefinite_covariance():
    with pytest.raises(ConfigurationError):
        init_ensemble(GaussianInit([0, 0], [[1, 2], [2, 1]]), FilterConfig(ensemble_size=5))


def test_noise_factor_rank_deficient():
    J = np.ones((4, 4))
    L = noise_factor(J)
    assert L.shape == (4, 1)
    np.testing.assert_allclose(L @ L.T, J, atol=1e-12)


def test_noise_factor_diagonal_fast_path():
    L = noise_factor(np.diag([4.0, 0.0, 1.0]))
    assert L.shape == (3, 2)
    np.testing.assert_allclose(L @ L.T, np.diag([4.0, 0.0, 1.0]))


def test_noise_factor_rejects_asymmetric():
    with pytest.raises(ConfigurationError):
        noise_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_forecast_identity_dynamics():
    model = StateSpaceModel(2, 2, lambda x, t: np.zeros_like(x), lambda x, t: x, lambda t: np.zeros((2, 2)),
                            lambda t: np.eye(2))
    ens = Ensemble(np.arange(10.0).reshape(5, 2))
    out = forecast(ens, model, 0.0, FilterConfig())
    np.testing.assert_array_equal(out.members, ens.members)
    assert out.time == pytest.approx(0.1)


def test_forecast_single_euler_step():
    ens = Ensemble(np.array([[1.0], [2.0]]))
    out = forecast(ens, linear_model(1), 0.0, FilterConfig(delta_t=0.1))
    np.testing.assert_allclose(out.members[:, 0], [0.9, 1.8], rtol=1e-15)


def test_forecast_matches_euler_loop():
    a, dt, n = 0.3, 0.05, 40
    model = linear_model(1, rate=a)
    cfg = FilterConfig(delta_t=dt)
    ens = Ensemble(np.array([[1.0], [-2.0]]))
    x = np.array([1.0, -2.0])
    for k in range(n):
        ens = forecast(ens, model, k * dt, cfg)
        x = x + dt * (a * x)
    np.testing.assert_array_equal(ens.members[:, 0], x)


def test_forecast_time_mismatch():
    with pytest.raises(ConfigurationError):
        forecast(Ensemble(np.zeros((3, 1)), 0.2), linear_model(1), 0.0, FilterConfig())


def test_forecast_reports_failing_member():
    def drift(x, t):
        out = np.zeros_like(x)
        out[x[:, 0] > 1.5] = np.nan
        return out

    model = StateSpaceModel(1, 1, drift, lambda x, t: x, lambda t: np.zeros((1, 1)), lambda t: np.eye(1))
    with pytest.raises(PropagationError, match="member 2"):
        forecast(Ensemble(np.array([[0.0], [1.0], [2.0]])), model, 0.0, FilterConfig())


def test_moments_hand_example():
    mean, cov = ensemble_moments(Ensemble(np.array([[1.0], [3.0]])))
    np.testing.assert_array_equal(mean, [2.0])
    np.testing.assert_array_equal(cov, [[2.0]])


def test_moments_identical_members():
    _, cov = ensemble_moments(Ensemble(np.ones((4, 3))))
    np.testing.assert_array_equal(cov, 0.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(2, 30), d=st.integers(1, 6))
def test_moments_symmetric_psd(seed, m, d):
    x = np.random.default_rng(seed).standard_normal((m, d))
    _, cov = ensemble_moments(Ensemble(x))
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > -1e-12 * max(1.0, np.abs(cov).max())


def test_update_constant_observation_gives_zero_gain():
    model = StateSpaceModel(2, 1, lambda x, t: 0 * x, lambda x, t: np.full((x.shape[0], 1), 5.0),
                            lambda t: np.zeros((2, 2)), lambda t: np.eye(1))
    ens = Ensemble(np.random.default_rng(0).standard_normal((20, 2)), 0.5)
    post = update(ens, np.array([3.0]), model, 0.5, FilterConfig())
    np.testing.assert_array_equal(post.members, ens.members)


def test_update_uninformative_observation():
    # ensemble spread well below R, so the gain scales like 1/R
    ens = Ensemble(0.01 * np.random.default_rng(1).standard_normal((200, 2)), 0.5)
    small, big = linear_model(2, r=1.0), linear_model(2, r=1e6)
    z = predict_observations(ens, small, 0.5, FilterConfig())
    k1 = kalman_gain(ens, z, small.obs_cov(0.5), np.arange(2)).K
    k2 = kalman_gain(ens, z, big.obs_cov(0.5), np.arange(2)).K
    assert np.linalg.norm(k2) / np.linalg.norm(k1) == pytest.approx(1e-6, rel=0.05)
    post = update(ens, np.array([10.0, 10.0]), big, 0.5, FilterConfig())
    assert np.abs(post.members - ens.members).max() < 1e-5


def test_update_missing_entries_drop_rows():
    ens = Ensemble(np.random.default_rng(2).standard_normal((50, 3)), 0.5)
    full = linear_model(3, r=0.2)
    part = StateSpaceModel(3, 1, lambda x, t: 0 * x, lambda x, t: x[:, 1:2], lambda t: np.zeros((3, 3)),
                           lambda t: 0.2 * np.eye(1))
    a = update(ens, np.array([np.nan, 0.7, np.nan]), full, 0.5, FilterConfig())
    b = update(ens, np.array([0.7]), part, 0.5, FilterConfig())
    np.testing.assert_allclose(a.members, b.members, rtol=1e-13)


def test_update_all_missing_is_identity():
    ens = Ensemble(np.ones((3, 2)) + np.arange(3)[:, None], 0.5)
    post = update(ens, np.array([np.nan, np.nan]), linear_model(2), 0.5, FilterConfig())
    np.testing.assert_array_equal(post.members, ens.members)


def test_update_wrong_observation_shape():
    with pytest.raises(ConfigurationError):
        update(Ensemble(np.zeros((3, 2))), np.zeros(3), linear_model(2), 0.0, FilterConfig())


def test_scalar_kalman_benchmark():
    mean_err, var_err = scalar_kf.enkf_vs_kalman(10_000, seed=0)
    assert mean_err < 5 / 100 and var_err < 5 / 100


def test_run_filter_update_times():
    model = linear_model(1, rate=0.0, q=1e-4)
    sched = [(0.5 * k, np.array([1.0])) for k in range(1, 5)]
    hist = run_filter(model, GaussianInit([0.0], [[1.0]]), PositivityTransform(), sched,
                      FilterConfig(delta_t=0.1, update_interval=5, ensemble_size=20))
    moved = [e.time for p, e in zip(hist[1::2], hist[2::2]) if not np.array_equal(p.mean, e.mean)]
    np.testing.assert_allclose(moved, [0.5, 1.0, 1.5, 2.0])
    assert len(hist) == 1 + 2 * 20


def test_run_filter_empty_schedule_is_pure_forecast():
    init = GaussianInit([1.0, 2.0], 0.1 * np.eye(2))
    hist = run_filter(linear_model(2, q=1e-3), init, PositivityTransform(), [], FilterConfig(ensemble_size=30),
                      n_steps=12)
    for prior, post in zip(hist[1::2], hist[2::2]):
        assert prior.stage == "prior" and post.stage == "posterior"
        np.testing.assert_array_equal(prior.mean, post.mean)


def test_run_filter_zero_gain_observation_changes_nothing():
    model = StateSpaceModel(1, 1, lambda x, t: -x, lambda x, t: np.zeros_like(x), lambda t: 1e-3 * np.eye(1),
                            lambda t: np.eye(1))
    init = GaussianInit([1.0], [[0.5]])
    cfg = FilterConfig(ensemble_size=25)
    with_obs = run_filter(model, init, PositivityTransform(), [(0.5, np.array([3.0]))], cfg, n_steps=10)
    without = run_filter(model, init, PositivityTransform(), [], cfg, n_steps=10)
    for a, b in zip(with_obs, without):
        np.testing.assert_array_equal(a.mean, b.mean)


def test_run_filter_rejects_misaligned_time():
    with pytest.raises(ConfigurationError, match="0.7"):
        run_filter(linear_model(1), GaussianInit([0.0], [[1.0]]), PositivityTransform(),
                   [(0.7, np.array([0.0]))], FilterConfig(ensemble_size=5))


def test_run_filter_rejects_duplicate_time():
    sched = [(0.5, np.array([0.0])), (0.5, np.array([1.0]))]
    with pytest.raises(ConfigurationError):
        run_filter(linear_model(1), GaussianInit([0.0], [[1.0]]), PositivityTransform(), sched,
                   FilterConfig(ensemble_size=5))


def test_run_filter_chunking_does_not_change_results():
    model = linear_model(3, rate=-0.3, q=1e-3, r=0.05)
    init = GaussianInit(np.ones(3), 0.2 * np.eye(3))
    sched = [(0.5, np.array([0.5, 0.6, 0.7])), (1.0, np.array([0.4, 0.4, 0.5]))]
    a = run_filter(model, init, PositivityTransform(), sched, FilterConfig(ensemble_size=40, chunk_size=7))
    b = run_filter(model, init, PositivityTransform(), sched, FilterConfig(ensemble_size=40, chunk_size=1000))
    for x, y in zip(a, b):
        assert x.mean.tobytes() == y.mean.tobytes()


def test_run_filter_slot_hook_runs_every_slot():
    calls = []

    def hook(members, t):
        calls.append(round(t, 6))
        members[:, 0] = 0.0
        return members

    model = StateSpaceModel(1, 1, lambda x, t: np.ones_like(x), lambda x, t: x, lambda t: np.zeros((1, 1)),
                            lambda t: np.eye(1), slot_hook=hook)
    hist = run_filter(model, GaussianInit([0.0], [[0.0]]), PositivityTransform(), [], FilterConfig(ensemble_size=3),
                      n_steps=10)
    assert calls == [0.5, 1.0]
    # between resets the state grows by delta_t per step
    assert hist[-1].mean[0] == pytest.approx(0.5)


def test_run_filter_positivity_transform():
    # log-stored decay rate with dynamics driven by its physical value
    model = StateSpaceModel(2, 1, lambda x, t: np.column_stack([-x[:, 1] * x[:, 0], 0 * x[:, 0]]),
                            lambda x, t: x[:, :1], lambda t: np.diag([1e-6, 1e-6]), lambda t: 1e-4 * np.eye(1))
    init = GaussianInit([1.0, np.log(0.5)], np.diag([1e-4, 0.3]))
    truth = lambda t: np.exp(-0.2 * t)  # noqa: E731
    sched = [(0.5 * k, np.array([truth(0.5 * k)])) for k in range(1, 21)]
    hist = run_filter(model, init, PositivityTransform((1,)), sched, FilterConfig(ensemble_size=200),
                      summarize=lambda x, t, s: {"rate": np.exp(x[:, 1]).mean()})
    assert hist[-1].extras["rate"] == pytest.approx(0.2, rel=0.05)


def test_transform_round_trip(rng):
    v = rng.uniform(1e-6, 1e3, (10, 4))
    tr = PositivityTransform((0, 2))
    np.testing.assert_allclose(to_physical(to_latent(v, tr), tr), v, rtol=1e-14)


def test_transform_empty_is_identity():
    v = np.array([-1.0, 2.0])
    np.testing.assert_array_equal(to_physical(v, PositivityTransform()), v)


def test_transform_log_value():
    assert to_physical(np.array([np.log(0.08), 3.0]), PositivityTransform((0,)))[0] == pytest.approx(0.08, rel=1e-15)


def test_transform_rejects_nonpositive():
    with pytest.raises(ValueError):
        to_latent(np.array([0.0]), PositivityTransform((0,)))


def test_transform_index_check():
    with pytest.raises(ConfigurationError):
        PositivityTransform((5,)).check(3)


def test_ensemble_validation():
    with pytest.raises(ConfigurationError):
        Ensemble(np.zeros((1, 3)))
    with pytest.raises(PropagationError):
        Ensemble(np.array([[0.0], [np.inf]]))
    with pytest.raises(ConfigurationError):
        FilterConfig(ensemble_size=1)
