import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemort.agestruct import (AgeGrid, BoundaryData, SimpleModelParams, TimeGrid, influx_simple, peak_age,
                               simple_rate_of_change, solve_general, solve_simple, steady_state,
                               upwind_reference)
from agemort.errors import ConfigurationError

P = SimpleModelParams(0.08, 0.2)

# characteristic integrals evaluated with mpmath at 30 digits
FROZEN_N = [
    (1.0, 3.0, 0.42624325967334036114),
    (8.0, 3.0, 4.673442599510862591),
    (30.0, 10.0, 1.1513111079168645357),
    (5.0, 5.0, 5.6745097334258045966),
    (100.0, 2.0, 4.6105990584019568676e-7),
]
STEADY_10 = 10.527176458102338143
PEAK_5 = 7.7485127424710206403


def _const(value):
    return lambda a, t: value


def _influx(a, t):
    return influx_simple(a, 0.2)


def test_influx_zero_at_birth():
    assert influx_simple(0.0, 0.2) == 0.0


def test_influx_peaks_at_inverse_lambda():
    a = np.linspace(0, 50, 500_001)
    assert a[np.argmax(influx_simple(a, 0.2))] == pytest.approx(5.0, abs=1e-4)


def test_influx_value():
    assert influx_simple(5.0, 0.2) == pytest.approx(5 * np.exp(-1), rel=1e-15)


def test_influx_rejects_negative_age():
    with pytest.raises(ValueError):
        influx_simple(-0.1, 0.2)


@pytest.mark.parametrize("a,t,expected", FROZEN_N)
def test_solve_simple_frozen_values(a, t, expected):
    assert solve_simple(P, a, t) == pytest.approx(expected, rel=1e-13)


def test_solve_simple_zero_at_start():
    np.testing.assert_array_equal(solve_simple(P, np.linspace(0, 120, 50), 0.0), 0.0)


def test_solve_simple_continuous_across_characteristic():
    t = 3.0
    below, above = solve_simple(P, np.nextafter(t, 0), t), solve_simple(P, t, t)
    assert abs(above - below) <= 1e-12 * abs(above)


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(0.01, 0.5), lam=st.floats(0.01, 0.5), a=st.floats(0.1, 100), t=st.floats(0.1, 30))
def test_solve_simple_smooth_near_diagonal(mu, lam, a, t):
    # lam -> mu is a removable singularity; nudging lam must barely move the value
    p1 = SimpleModelParams(mu, lam)
    p2 = SimpleModelParams(mu, lam * (1 + 1e-9))
    v1, v2 = solve_simple(p1, a, t), solve_simple(p2, a, t)
    assert abs(v1 - v2) <= 1e-6 * max(abs(v1), 1e-300)


def test_solve_simple_degenerate_matches_limit():
    # lam == mu: n = e^(-mu a) a^2 / 2 on the born branch
    p = SimpleModelParams(0.1, 0.1)
    a = np.array([0.5, 2.0, 7.0])
    np.testing.assert_allclose(solve_simple(p, a, 10.0), np.exp(-0.1 * a) * a**2 / 2, rtol=1e-14)


def test_steady_state_frozen_value():
    assert steady_state(10.0, P) == pytest.approx(STEADY_10, rel=1e-13)


def test_steady_state_zero_at_birth():
    assert steady_state(0.0, P) == 0.0


def test_steady_state_is_born_branch():
    a = np.linspace(0.1, 40, 30)
    np.testing.assert_allclose(steady_state(a, P), solve_simple(P, a, a + 1e-3), rtol=1e-14)


def test_steady_state_matches_long_time_quadrature():
    val = solve_general(BoundaryData(), _const(0.08), _influx, 10.0, 1000.0)
    assert val == pytest.approx(steady_state(10.0, P), rel=1e-8)


def test_peak_age_frozen_value():
    assert peak_age(5.0, P) == pytest.approx(PEAK_5, rel=1e-13)


def test_peak_age_matches_grid_search():
    a = 5.0 + np.arange(0, 20, 1e-4)
    assert peak_age(5.0, P) == pytest.approx(a[np.argmax(solve_simple(P, a, 5.0))], abs=1e-4)


def test_peak_age_small_time_limit():
    assert peak_age(1e-6, P) == pytest.approx(5.0, abs=1e-6)


def test_peak_age_increases_with_time():
    t = np.linspace(0.5, 50, 100)
    assert np.all(np.diff(peak_age(t, P)) > 0)


def test_peak_age_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        peak_age(0.0, P)


def test_rate_of_change_zero_on_born_branch():
    assert simple_rate_of_change(2.0, 5.0, P) == 0.0
    assert simple_rate_of_change(5.0, 5.0, P) == 0.0


def test_rate_of_change_matches_finite_difference():
    h = 1e-5
    fd = (solve_simple(P, 8.0, 3.0 + h) - solve_simple(P, 8.0, 3.0 - h)) / (2 * h)
    assert simple_rate_of_change(8.0, 3.0, P) == pytest.approx(fd, abs=1e-6)


def test_rate_of_change_per_member_parameters():
    a = np.linspace(0, 60, 7)[None, :]
    mu = np.array([[0.08], [0.1]])
    lam = np.array([[0.2], [0.3]])
    out = simple_rate_of_change(a, 2.0, mu=mu, lam=lam)
    np.testing.assert_allclose(out[1], simple_rate_of_change(a[0], 2.0, SimpleModelParams(0.1, 0.3)))


def test_solve_general_empty_system():
    assert solve_general(BoundaryData(), _const(0.1), _const(0.0), 7.0, 3.0) == 0.0


def test_solve_general_matches_closed_form():
    for a, t, expected in FROZEN_N:
        assert solve_general(BoundaryData(), _const(0.08), _influx, a, t) == pytest.approx(expected, rel=1e-8)


def test_solve_general_transports_initial_profile():
    b = BoundaryData(rho=lambda a: np.exp(-a))
    val = solve_general(b, _const(0.1), _const(0.0), 3.0, 2.0)
    assert val == pytest.approx(np.exp(-1) * np.exp(-0.2), rel=1e-12)


def test_solve_general_nonconstant_rates():
    # mu = a / 10: survival along a cohort is exp(-(a^2 - c^2) / 20)
    b = BoundaryData(rho=lambda a: np.ones_like(a))
    val = solve_general(b, lambda a, t: a / 10, _const(0.0), 4.0, 1.5)
    assert val == pytest.approx(np.exp(-(16 - 2.5**2) / 20), rel=1e-10)


def test_upwind_pure_transport():
    g = AgeGrid(0.0, 0.1, 400)
    tg = TimeGrid(0.1, 50)
    b = BoundaryData(rho=lambda a: np.exp(-((a - 10) ** 2)))
    out = upwind_reference(b, _const(0.0), _const(0.0), g, tg, record_every=50)
    # CFL number 1 moves the profile by exactly one cell per step
    np.testing.assert_allclose(out[-1].values, b.rho(g.ages - 5.0) * (g.ages >= 5.0), atol=1e-12)


def test_upwind_rejects_cfl_violation():
    with pytest.raises(ConfigurationError):
        upwind_reference(BoundaryData(), _const(0.0), _const(0.0), AgeGrid(0, 0.1, 10), TimeGrid(0.2, 3))


def test_upwind_first_order_convergence():
    errors = []
    for d in (0.04, 0.02):
        g = AgeGrid(0.0, d, int(round(40 / d)) + 1)
        tg = TimeGrid(d, int(round(5 / d)))
        out = upwind_reference(BoundaryData(), _const(0.08), _influx, g, tg, record_every=tg.n_t)
        errors.append(np.abs(out[-1].values - solve_simple(P, g.ages, 5.0)).max())
    assert 1.8 < errors[0] / errors[1] < 2.2


def test_grid_types_validate():
    with pytest.raises(ConfigurationError):
        AgeGrid(0, -1, 10)
    with pytest.raises(ConfigurationError):
        SimpleModelParams(0.0, 0.2)
    with pytest.raises(ConfigurationError):
        BoundaryData(g_zero=False)
    assert AgeGrid().upper == pytest.approx(120.0)
    assert TimeGrid(0.1, 3).times[-1] == pytest.approx(0.3)
