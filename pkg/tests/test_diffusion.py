import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digsep.denoise import CallableDenoiser, GaussianDenoiser, GaussianMixtureDenoiser, SmoothnessMAPDenoiser
from digsep.diffusion import (
    GRID_RULES,
    SdeSolverConfig,
    denoising_posterior_sample,
    generate,
    reverse_sde_simulate,
    sigma_floor,
    time_grid,
)
from digsep.model import GaussianMixturePrior, GaussianPrior
from digsep.schedule import NoiseSchedule, ScheduleRangeError, sigma_of_t, t_of_sigma

SCHED = NoiseSchedule.exponential()
STD1 = GaussianDenoiser(GaussianPrior(np.zeros(1), np.eye(1)))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(GRID_RULES), st.integers(1, 300), st.floats(1e-3, 1.0), st.none() | st.floats(0.5, 10.0))
def test_grid_strictly_decreasing(rule, M, frac, rho):
    cfg = SdeSolverConfig(M, rule, rho)
    g = time_grid(SCHED, cfg, frac * SCHED.T)
    assert g[0] == pytest.approx(frac * SCHED.T)
    assert g[-1] == 0.0
    assert np.all(np.diff(g) < 0)


def test_power_grid_endpoints():
    cfg = SdeSolverConfig(50)
    g = time_grid(SCHED, cfg, 1.0)
    assert len(g) == 51
    assert sigma_of_t(SCHED, g[-2]) == pytest.approx(sigma_floor(SCHED, cfg), rel=1e-9)
    geo = time_grid(SCHED, SdeSolverConfig(50, rho=None), 1.0)
    sig = sigma_of_t(SCHED, geo[:-1])
    np.testing.assert_allclose(sig[1:] / sig[:-1], sig[1] / sig[0], rtol=1e-8)


def test_floor_step_returns_denoiser_output():
    # pure geometric grid ends exactly on the floor, where the last update is D(x)
    den = CallableDenoiser(lambda z, eta: np.full_like(z, 3.25), 1)
    cfg = SdeSolverConfig(2, rho=None)
    out = reverse_sde_simulate(den, SCHED, cfg, 0.5, np.ones((3, 1)), np.random.default_rng(0))
    g = time_grid(SCHED, cfg, 0.5)
    assert len(g) == 3 and sigma_of_t(SCHED, g[1]) == pytest.approx(sigma_floor(SCHED, cfg))
    np.testing.assert_array_equal(out, 3.25)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SdeSolverConfig(0)
    with pytest.raises(ValueError):
        SdeSolverConfig(10, "bogus")
    with pytest.raises(ScheduleRangeError):
        time_grid(SCHED, SdeSolverConfig(10), 1.5)


def test_generation_matches_gaussian_prior():
    x = generate(STD1, SCHED, SdeSolverConfig(200), (10_000,), np.random.default_rng(0))
    assert abs(x.mean()) < 0.05
    assert abs(x.var() - 1.0) < 0.05


def test_generation_gmm_mode_weights():
    p = GaussianMixturePrior([0.5, 0.5], [[-4.0], [4.0]], [[[0.25]], [[0.25]]])
    x = generate(GaussianMixtureDenoiser(p), SCHED, SdeSolverConfig(200), (10_000,), np.random.default_rng(1))
    assert abs(np.mean(x > 0) - 0.5) < 0.03


def test_single_step_from_small_time_is_denoiser_output():
    t0 = t_of_sigma(SCHED, 0.01)
    x0 = np.array([[0.7], [-1.2]])
    # one Euler step over [t0, 0]: g^2 h ~ sigma^2 so the drift applies almost all of
    # D - x; the injected noise has std ~ sigma = 0.01
    out = reverse_sde_simulate(STD1, SCHED, SdeSolverConfig(1), t0, x0, np.random.default_rng(2))
    np.testing.assert_allclose(out, STD1(x0, 0.01), atol=0.05)


def test_uniform_t_single_step_applies_drift():
    t0 = t_of_sigma(SCHED, 0.01)
    x0 = np.array([[0.7]])
    out = reverse_sde_simulate(STD1, SCHED, SdeSolverConfig(1, "uniform_t"), t0, x0, np.random.default_rng(2))
    # one Euler step: x + g^2 (D - x)/sigma^2 h + g sqrt(h) eps, with g^2 h ~ sigma^2
    np.testing.assert_allclose(out, STD1(x0, 0.01), atol=0.05)


def test_marginal_preservation():
    # x_start ~ p_sigma for N(0,1): N(0, 1 + s^2)
    rng = np.random.default_rng(3)
    s = 2.0
    x0 = np.sqrt(1 + s**2) * rng.standard_normal((20_000, 1))
    out = reverse_sde_simulate(STD1, SCHED, SdeSolverConfig(200), t_of_sigma(SCHED, s), x0, rng)
    assert abs(out.mean()) < 0.04
    assert abs(out.var() - 1.0) < 0.05


def test_sde_path_vs_exact_path():
    den = GaussianDenoiser(GaussianPrior(np.zeros(2), np.eye(2)))
    z = np.tile([2.0, 2.0], (100_000, 1))
    exact = denoising_posterior_sample(den, SCHED, SdeSolverConfig(200), z, 1.0, np.random.default_rng(4))
    sde = denoising_posterior_sample(den, SCHED, SdeSolverConfig(200), z, 1.0, np.random.default_rng(5), "sde")
    assert np.max(np.abs(sde.mean(0) - exact.mean(0))) <= 0.02
    assert np.max(np.abs(sde.var(0) / exact.var(0) - 1)) <= 0.05


def test_auto_uses_exact_path_bitwise():
    den = GaussianDenoiser(GaussianPrior(np.zeros(2), np.eye(2)))
    z = np.tile([2.0, 2.0], (10, 1))
    a = denoising_posterior_sample(den, SCHED, SdeSolverConfig(5), z, 1.0, np.random.default_rng(6))
    b = den.sample_conditional(z, 1.0, np.random.default_rng(6))
    assert a.tobytes() == b.tobytes()


def test_map_denoiser_takes_sde_path():
    den = SmoothnessMAPDenoiser(1.0, 4)
    z = np.zeros((3, 4))
    out = denoising_posterior_sample(den, SCHED, SdeSolverConfig(20), z, 0.5, np.random.default_rng(7))
    assert out.shape == (3, 4) and np.all(np.isfinite(out))
    with pytest.raises(NotImplementedError):
        denoising_posterior_sample(den, SCHED, SdeSolverConfig(20), z, 0.5, np.random.default_rng(7), "exact")


def test_eta_above_terminal_sigma_raises():
    with pytest.raises(ScheduleRangeError, match="increase T"):
        denoising_posterior_sample(STD1, SCHED, SdeSolverConfig(5), np.zeros((1, 1)), 10.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        denoising_posterior_sample(STD1, SCHED, SdeSolverConfig(5), np.zeros((1, 1)), 0.0, np.random.default_rng(0))


def test_non_finite_start_rejected():
    with pytest.raises(ValueError):
        reverse_sde_simulate(STD1, SCHED, SdeSolverConfig(5), 0.5, np.array([[np.nan]]), np.random.default_rng(0))


def test_determinism_and_fresh_noise_per_step():
    calls = []
    den = CallableDenoiser(lambda z, eta: calls.append(eta) or 0.5 * z, 1)
    x0 = np.ones((4, 1))
    a = reverse_sde_simulate(den, SCHED, SdeSolverConfig(30), 0.8, x0, np.random.default_rng(8))
    b = reverse_sde_simulate(den, SCHED, SdeSolverConfig(30), 0.8, x0, np.random.default_rng(8))
    assert a.tobytes() == b.tobytes()
    assert len(calls) == 60  # one evaluation per step
    assert len(set(a[:, 0])) == 4  # independent trajectories
