"""Diffusion noise schedules and cosine annealing schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 0.008


class ScheduleRangeError(ValueError):
    """A time or noise level fell outside the schedule's domain."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Zero-drift forward diffusion ``dx = g(t) dw`` on ``[0, T]``.

    ``kind`` is ``"constant"`` (``g = g0``) or ``"exponential"`` (``g = alpha**t``).
    """

    kind: str = "exponential"
    T: float = 1.0
    g0: float = 1.0
    alpha: float = 15.0

    def __post_init__(self):
        if self.kind not in ("constant", "exponential"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.kind == "constant" and not self.g0 > 0:
            raise ValueError("g0 must be positive")
        if self.kind == "exponential" and not self.alpha > 1:
            raise ValueError("alpha must exceed 1")

    @classmethod
    def constant(cls, g0: float = 1.0, T: float = 1.0) -> "NoiseSchedule":
        return cls("constant", T=T, g0=g0)

    @classmethod
    def exponential(cls, alpha: float = 15.0, T: float = 1.0) -> "NoiseSchedule":
        return cls("exponential", T=T, alpha=alpha)

    @property
    def sigma_max(self) -> float:
        return float(sigma_of_t(self, self.T))

    def g(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.g0)
        return self.alpha**t


def _check_range(x, lo, hi, what):
    x = np.asarray(x, dtype=float)
    # tiny overshoot from round-off is tolerated and clipped
    slack = 1e-12 * max(1.0, abs(hi))
    if np.any(x < lo - slack) or np.any(x > hi + slack) or np.any(~np.isfinite(x)):
        raise ScheduleRangeError(f"{what} outside [{lo}, {hi}]: {x}")
    return np.clip(x, lo, hi)


def sigma_of_t(sched: NoiseSchedule, t):
    """Cumulative noise std ``sqrt(int_0^t g(s)^2 ds)``."""
    t = _check_range(t, 0.0, sched.T, "time")
    if sched.kind == "constant":
        out = sched.g0 * np.sqrt(t)
    else:
        two_log = 2.0 * math.log(sched.alpha)
        out = np.sqrt(np.expm1(two_log * t) / two_log)
    return out if out.ndim else float(out)


def t_of_sigma(sched: NoiseSchedule, eta):
    """Inverse of :func:`sigma_of_t`.

    Raises :class:`ScheduleRangeError` when ``eta`` exceeds ``sigma(T)``; the
    terminal time must then be raised.
    """
    eta = _check_range(eta, 0.0, sched.sigma_max, "noise level")
    if sched.kind == "constant":
        out = (eta / sched.g0) ** 2
    else:
        two_log = 2.0 * math.log(sched.alpha)
        out = np.log1p(two_log * eta**2) / two_log
    out = np.minimum(out, sched.T)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class AnnealSchedule:
    """Cosine-squared decay from ``v_max`` to ``v_min`` over ``n`` iterations.

    The last ``plateau`` iterations (and iteration ``n`` itself) return
    ``v_min`` exactly, so the chain runs at the nominal value from then on.
    """

    v_max: float
    v_min: float
    n: int
    eps: float = DEFAULT_EPS
    plateau: int = 0

    def __post_init__(self):
        if not (self.v_max >= self.v_min > 0):
            raise ValueError(f"need v_max >= v_min > 0, got {self.v_max}, {self.v_min}")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if not 0 <= self.plateau < self.n:
            raise ValueError("plateau must lie in [0, n)")

    @classmethod
    def constant(cls, value: float, n: int) -> "AnnealSchedule":
        return cls(value, value, n)

    @property
    def terminal_index(self) -> int:
        """First iteration from which the value is frozen at ``v_min``."""
        return self.n - self.plateau

    def __call__(self, i: int) -> float:
        return anneal_value(self, i)

    def values(self) -> np.ndarray:
        return np.array([anneal_value(self, i) for i in range(self.n + 1)])


def anneal_value(sched: AnnealSchedule, i: int) -> float:
    if not 0 <= i <= sched.n:
        raise ScheduleRangeError(f"iteration {i} outside [0, {sched.n}]")
    n_active = sched.terminal_index
    if i >= n_active or sched.v_max == sched.v_min:
        return float(sched.v_min)
    phase = (i / n_active + sched.eps) / (1.0 + sched.eps)
    value = sched.v_min + (sched.v_max - sched.v_min) * math.cos(phase * math.pi / 2) ** 2
    return float(min(max(value, sched.v_min), sched.v_max))
