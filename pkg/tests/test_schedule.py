import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from digsep.schedule import AnnealSchedule, NoiseSchedule, ScheduleRangeError, anneal_value, sigma_of_t, t_of_sigma

EXP = NoiseSchedule.exponential(15.0, 1.0)
# sqrt(int_0^1 15^{2s} ds) by adaptive quadrature
SIGMA_T_QUAD = 6.431031782203519


def test_constant_schedule():
    c = NoiseSchedule.constant(1.0, T=10.0)
    assert sigma_of_t(c, 4.0) == 2.0
    assert t_of_sigma(c, 3.0) == pytest.approx(9.0)
    assert sigma_of_t(c, 0.0) == 0.0
    assert t_of_sigma(c, 0.0) == 0.0


def test_exponential_terminal_sigma_matches_quadrature():
    assert sigma_of_t(EXP, 1.0) == pytest.approx(math.sqrt(224 / (2 * math.log(15))), rel=1e-14)
    assert sigma_of_t(EXP, 1.0) == pytest.approx(SIGMA_T_QUAD, rel=1e-10)
    assert EXP.sigma_max == pytest.approx(SIGMA_T_QUAD, rel=1e-10)
    assert sigma_of_t(EXP, 0.0) == 0.0


def test_exponential_inverse_at_6431():
    assert t_of_sigma(EXP, 6.431) == pytest.approx(1.0, abs=1e-4)
    assert t_of_sigma(EXP, SIGMA_T_QUAD) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("t", [0.1, 0.37, 0.9])
def test_sigma_matches_quadrature_interior(t):
    ref = math.sqrt(quad(lambda s: 15.0 ** (2 * s), 0, t, epsabs=1e-14)[0])
    assert sigma_of_t(EXP, t) == pytest.approx(ref, rel=1e-10)


def test_out_of_range():
    with pytest.raises(ScheduleRangeError):
        sigma_of_t(EXP, 1.5)
    with pytest.raises(ScheduleRangeError):
        sigma_of_t(EXP, -0.1)
    with pytest.raises(ScheduleRangeError):
        t_of_sigma(EXP, 7.0)


def test_round_trip_grid_1000_points():
    rng = np.random.default_rng(0)
    for sched in (EXP, NoiseSchedule.constant(2.0, T=3.0), NoiseSchedule.exponential(3.0, 2.0)):
        t = rng.uniform(0, sched.T, 1000)
        back = t_of_sigma(sched, sigma_of_t(sched, t))
        assert np.max(np.abs(back - t)) <= 1e-10 * sched.T


def test_sigma_strictly_increasing():
    t = np.linspace(0, 1, 2001)
    assert np.all(np.diff(sigma_of_t(EXP, t)) > 0)


def test_anneal_examples():
    s = AnnealSchedule(2.0, 1.0, 2, eps=0.0)
    assert anneal_value(s, 1) == pytest.approx(1.5)
    assert anneal_value(s, 0) == 2.0
    assert anneal_value(s, 2) == 1.0
    s = AnnealSchedule(5.0, 0.3, 7)
    assert s(7) == 0.3


def test_anneal_plateau_and_constant():
    s = AnnealSchedule(4.0, 1.0, 10, plateau=3)
    assert s.terminal_index == 7
    assert all(s(i) == 1.0 for i in range(7, 11))
    assert s(6) > 1.0
    c = AnnealSchedule.constant(0.5, 4)
    assert np.all(c.values() == 0.5)


def test_anneal_validation():
    with pytest.raises(ValueError):
        AnnealSchedule(1.0, 2.0, 3)
    with pytest.raises(ValueError):
        AnnealSchedule(1.0, 0.0, 3)
    with pytest.raises(ScheduleRangeError):
        AnnealSchedule(2.0, 1.0, 3)(4)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.01, 100.0),
    st.floats(1.0, 50.0),
    st.integers(1, 200),
    st.floats(0.0, 0.1),
    st.data(),
)
def test_anneal_monotone_and_terminal(vmin, ratio, n, eps, data):
    plateau = data.draw(st.integers(0, n - 1))
    s = AnnealSchedule(vmin * ratio, vmin, n, eps, plateau)
    v = s.values()
    assert np.all(np.diff(v) <= 0)
    assert v[-1] == vmin
    assert np.all((v >= vmin) & (v <= vmin * ratio))


@settings(max_examples=200, deadline=None)
@given(st.floats(1.01, 50.0), st.floats(0.1, 3.0), st.floats(0.0, 1.0))
def test_inverse_property(alpha, T, frac):
    sched = NoiseSchedule.exponential(alpha, T)
    t = frac * T
    assert abs(t_of_sigma(sched, sigma_of_t(sched, t)) - t) <= 1e-10 * T
