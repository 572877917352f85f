"""Euler-Maruyama simulation of the reverse-time diffusion.

The drift uses the Tweedie score ``(D(x; sigma(t)) - x) / sigma(t)^2``. Below a
noise floor the last step returns the plain denoiser output, since the drift is
singular as ``t -> 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoise import Denoiser
from .schedule import NoiseSchedule, ScheduleRangeError, sigma_of_t, t_of_sigma

GRID_RULES = ("uniform_t", "uniform_sigma", "geometric_sigma")
FLOOR_FRACTION = 1e-4


@dataclass(frozen=True)
class SdeSolverConfig:
    """Step budget and time-grid rule for the reverse SDE.

    ``rho`` only affects ``geometric_sigma``: a positive value gives the
    power-law grid ``sigma_i = (a + i/(M-1) (b - a))**rho`` with ``a, b`` the
    endpoints' ``1/rho`` powers (large ``rho`` approaches a geometric grid);
    ``None`` gives the pure geometric grid. ``rho=3`` roughly halves the
    discretization bias of the pure geometric grid at equal step count.
    """

    steps: int = 200
    grid: str = "geometric_sigma"
    rho: float | None = 3.0
    floor_fraction: float = FLOOR_FRACTION

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.grid not in GRID_RULES:
            raise ValueError(f"grid must be one of {GRID_RULES}, got {self.grid!r}")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be positive")


def sigma_floor(sched: NoiseSchedule, cfg: SdeSolverConfig) -> float:
    return cfg.floor_fraction * sched.sigma_max


def time_grid(sched: NoiseSchedule, cfg: SdeSolverConfig, t_start: float) -> np.ndarray:
    """Strictly decreasing times ``t_start = t_0 > ... > t_M = 0``."""
    if not 0 < t_start <= sched.T * (1 + 1e-12):
        raise ScheduleRangeError(f"t_start={t_start} outside (0, {sched.T}]")
    t_start = min(t_start, sched.T)
    M = cfg.steps
    if cfg.grid == "uniform_t":
        return t_start * (1.0 - np.arange(M + 1) / M)
    s0 = sigma_of_t(sched, t_start)
    if cfg.grid == "uniform_sigma":
        sig = s0 * (1.0 - np.arange(M + 1) / M)
        grid = t_of_sigma(sched, sig)
        grid[0] = t_start
        return grid
    floor = sigma_floor(sched, cfg)
    if M == 1 or s0 <= floor:
        return np.array([t_start, 0.0])
    frac = np.arange(M) / (M - 1)
    if cfg.rho is None:
        sig = s0 * (floor / s0) ** frac
    else:
        a, b = s0 ** (1 / cfg.rho), floor ** (1 / cfg.rho)
        sig = (a + frac * (b - a)) ** cfg.rho
    grid = np.append(t_of_sigma(sched, sig), 0.0)
    grid[0] = t_start
    return grid


def reverse_sde_simulate(
    den: Denoiser,
    sched: NoiseSchedule,
    cfg: SdeSolverConfig,
    t_start: float,
    x_start,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run the reverse SDE from ``t_start`` down to 0, starting at ``x_start``.

    ``x_start`` has shape ``(..., d)``; all leading entries are independent
    trajectories sharing the time grid.
    """
    x = np.array(x_start, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x_start has non-finite entries")
    grid = time_grid(sched, cfg, t_start)
    floor = sigma_floor(sched, cfg)
    for t, t_next in zip(grid[:-1], grid[1:]):
        sig = sigma_of_t(sched, t)
        if t_next == 0.0 and sig <= floor * (1 + 1e-9):
            return den(x, sig)
        h = t - t_next
        g = float(sched.g(t))
        drift = (den(x, sig) - x) / sig**2
        x = x + g**2 * drift * h + g * np.sqrt(h) * rng.standard_normal(x.shape)
    return x


def generate(den: Denoiser, sched: NoiseSchedule, cfg: SdeSolverConfig, shape, rng: np.random.Generator):
    """Prior samples: start from ``N(0, sigma(T)^2 I)`` at ``t = T``."""
    shape = tuple(np.atleast_1d(shape))
    if shape[-1] != den.dim:
        shape = shape + (den.dim,)
    x_T = sched.sigma_max * rng.standard_normal(shape)
    return reverse_sde_simulate(den, sched, cfg, sched.T, x_T, rng)


def denoising_posterior_sample(
    den: Denoiser,
    sched: NoiseSchedule,
    cfg: SdeSolverConfig,
    z,
    eta: float,
    rng: np.random.Generator,
    method: str = "auto",
) -> np.ndarray:
    """Draw from ``p(s | s + eta n = z)``.

    ``method="auto"`` uses the denoiser's exact sampler when it has one and the
    warm-started reverse SDE from ``t = sigma^{-1}(eta)`` otherwise; ``"exact"``
    and ``"sde"`` force a path.
    """
    if not eta > 0:
        raise ValueError(f"noise level must be positive, got {eta}")
    if eta > sched.sigma_max:
        raise ScheduleRangeError(
            f"noise level {eta} exceeds sigma(T)={sched.sigma_max:.6g}; increase T"
        )
    if method not in ("auto", "exact", "sde"):
        raise ValueError(f"unknown method {method!r}")
    exact = den.has_exact_conditional_sampler if method == "auto" else method == "exact"
    if exact:
        return den.sample_conditional(z, eta, rng)
    return reverse_sde_simulate(den, sched, cfg, t_of_sigma(sched, eta), z, rng)
