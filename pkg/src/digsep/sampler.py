"""Diffusion-within-Gibbs sampling and the stacked proximal-split baseline.

State arrays carry a leading batch axis: ``s[k]`` has shape ``(n_chains, d_k)``.
Every chain in a batch shares the model and the annealing path but draws its
own noise, so a batch is ``n_chains`` independent chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .denoise import Denoiser, denoiser_for
from .diffusion import SdeSolverConfig, denoising_posterior_sample
from .model import MixtureModel, check_model, check_observation, moment_hint
from .schedule import AnnealSchedule, NoiseSchedule


@dataclass
class ChainState:
    s: list[np.ndarray]
    u: dict[int, np.ndarray]
    iteration: int = 0
    rng: np.random.Generator | None = None

    @property
    def n_chains(self) -> int:
        return self.s[0].shape[0]

    def copy(self) -> "ChainState":
        return ChainState([x.copy() for x in self.s], {k: v.copy() for k, v in self.u.items()}, self.iteration, self.rng)


@dataclass(frozen=True)
class DiGConfig:
    """Sweep count, annealing and solver settings for :func:`dig_run`.

    ``anneal_sigma`` / ``anneal_eta`` default to constant schedules at the
    nominal ``sigma_v`` / ``relax_eta``. ``conditional`` selects the
    denoising-posterior path (``"auto"``, ``"exact"`` or ``"sde"``).
    """

    n_sweeps: int
    anneal_sigma: AnnealSchedule | None = None
    anneal_eta: dict[int, AnnealSchedule] = field(default_factory=dict)
    solver: SdeSolverConfig = SdeSolverConfig()
    seed: int | None = None
    conditional: str = "auto"

    @classmethod
    def cosine(
        cls,
        model: MixtureModel,
        n_sweeps: int,
        sigma_factor: float = 3.0,
        eta_factor: float = 3.0,
        eps: float = 0.008,
        plateau: int = 0,
        **kw,
    ) -> "DiGConfig":
        """Cosine annealing from ``factor * nominal`` down to the nominal values."""
        sig = AnnealSchedule(sigma_factor * model.sigma_v, model.sigma_v, n_sweeps, eps, plateau)
        etas = {
            k: AnnealSchedule(eta_factor * model.components[k].relax_eta, model.components[k].relax_eta, n_sweeps, eps, plateau)
            for k in model.relaxed_indices
        }
        return cls(n_sweeps, sig, etas, **kw)

    def sigma_at(self, model: MixtureModel, i: int) -> float:
        return model.sigma_v if self.anneal_sigma is None else self.anneal_sigma(i)

    def eta_at(self, model: MixtureModel, k: int, i: int) -> float:
        sched = self.anneal_eta.get(k)
        return model.components[k].relax_eta if sched is None else sched(i)

    def check_terminal(self, model: MixtureModel) -> None:
        """Annealing must end at the nominal parameters."""
        if self.anneal_sigma is not None:
            if self.anneal_sigma.n != self.n_sweeps:
                raise ValueError("sigma schedule length differs from n_sweeps")
            if not np.isclose(self.anneal_sigma.v_min, model.sigma_v, rtol=1e-12, atol=0):
                raise ValueError("sigma schedule must terminate at the nominal sigma_v")
        for k, sched in self.anneal_eta.items():
            if k not in model.relaxed_indices:
                raise ValueError(f"eta schedule given for identity component {k}")
            if sched.n != self.n_sweeps:
                raise ValueError(f"eta schedule {k} length differs from n_sweeps")
            if not np.isclose(sched.v_min, model.components[k].relax_eta, rtol=1e-12, atol=0):
                raise ValueError(f"eta schedule {k} must terminate at the nominal relax_eta")


def _schedules(model, schedule) -> list[NoiseSchedule]:
    if isinstance(schedule, NoiseSchedule):
        return [schedule] * model.K
    out = list(schedule)
    if len(out) != model.K:
        raise ValueError("one noise schedule per component required")
    return out


def _denoisers(model, denoisers) -> list[Denoiser]:
    if denoisers is None:
        return [denoiser_for(c.prior, c.dim) for c in model.components]
    out = list(denoisers)
    if len(out) != model.K:
        raise ValueError("one denoiser per component required")
    for k, (c, d) in enumerate(zip(model.components, out)):
        if d.dim != c.dim:
            raise ValueError(f"denoiser {k} has dim {d.dim}, component has {c.dim}")
    return out


# ---------------------------------------------------------------------------
# Single updates


def residual(model: MixtureModel, y, state: ChainState, k: int) -> np.ndarray:
    """Relaxed-model residual with the ``k``-th term removed.

    For relaxed ``k`` the identity components enter through ``s`` and the other
    relaxed components through ``H_j u_j``; for identity ``k`` every relaxed
    component enters through ``H_j u_j``.
    """
    r = np.broadcast_to(np.asarray(y, dtype=float), (state.n_chains, model.obs_dim)).copy()
    for j, comp in enumerate(model.components):
        if j == k:
            continue
        if comp.relaxed:
            r -= comp.sensing.apply(state.u[j])
        else:
            r -= state.s[j]
    return r


class _GaussianFactors:
    """Cached Cholesky factors of ``H^T H / sigma^2 + I / eta^2`` (the u-precision)."""

    def __init__(self, model: MixtureModel):
        self.model = model
        self._grams = {k: model.components[k].sensing.gram() for k in model.relaxed_indices}
        self._cache: dict[tuple[int, float, float], np.ndarray] = {}

    def precision_factor(self, k: int, sigma: float, eta: float) -> np.ndarray:
        key = (k, float(sigma), float(eta))
        L = self._cache.get(key)
        if L is None:
            G = self._grams[k]
            P = G / sigma**2 + np.eye(G.shape[0]) / eta**2
            L = np.linalg.cholesky(P)
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = L
        return L


def u_conditional(model: MixtureModel, y, state: ChainState, k: int, sigma: float, eta: float, factors=None):
    """Mean (batch) and covariance of the Gaussian ``u_k`` conditional."""
    factors = factors or _GaussianFactors(model)
    comp = model.components[k]
    r = residual(model, y, state, k)
    b = comp.sensing.adjoint(r) / sigma**2 + state.s[k] / eta**2
    L = factors.precision_factor(k, sigma, eta)
    mean = cho_solve((L, True), b.T).T
    cov = cho_solve((L, True), np.eye(comp.dim))
    return mean, 0.5 * (cov + cov.T)


def update_u(model, y, state, k, sigma_eff, eta_eff, rng, factors=None) -> np.ndarray:
    """Draw ``u_k`` from its Gaussian conditional; ``k`` must be a relaxed index."""
    if not model.components[k].relaxed:
        raise ValueError(f"component {k} has identity sensing; it has no auxiliary variable")
    factors = factors or _GaussianFactors(model)
    comp = model.components[k]
    r = residual(model, y, state, k)
    b = comp.sensing.adjoint(r) / sigma_eff**2 + state.s[k] / eta_eff**2
    L = factors.precision_factor(k, sigma_eff, eta_eff)
    mean = cho_solve((L, True), b.T).T
    eps = rng.standard_normal(mean.shape)
    # cov = P^{-1} = L^{-T} L^{-1}, so L^{-T} eps has the right covariance
    return mean + solve_triangular(L, eps.T, trans="T", lower=True).T


def update_s(model, y, state, k, sigma_eff, eta_eff, den, sched, solver, rng, method="auto") -> np.ndarray:
    """Draw ``s_k`` from its denoising-posterior conditional."""
    if model.components[k].relaxed:
        return denoising_posterior_sample(den, sched, solver, state.u[k], eta_eff, rng, method)
    r = residual(model, y, state, k)
    return denoising_posterior_sample(den, sched, solver, r, sigma_eff, rng, method)


def initialize(model: MixtureModel, y, moment_hints=None, n_chains: int = 1, rng=None) -> ChainState:
    """Start every chain at the linear-Gaussian approximate posterior mean.

    ``moment_hints`` is a per-component list of ``(mean, cov)`` (entries may be
    None for priors that define their own moments). Each ``u_k`` starts equal
    to ``s_k``. A ``(n_chains, m)`` stack of observations gives each chain its own.
    """
    y = check_observation(model, y, batched=True)
    hints = list(moment_hints) if moment_hints is not None else [None] * model.K
    xis, gammas = [], []
    for k, (comp, h) in enumerate(zip(model.components, hints)):
        h = h if h is not None else moment_hint(comp.prior)
        if h is None:
            raise ValueError(f"component {k} needs a (mean, cov) moment hint")
        xi = np.broadcast_to(np.asarray(h[0], dtype=float), (comp.dim,))
        G = np.asarray(h[1], dtype=float)
        if G.ndim == 0:
            G = float(G) * np.eye(comp.dim)
        xis.append(np.array(xi))
        gammas.append(G)
    Gy = model.sigma_v**2 * np.eye(model.obs_dim)
    HG = []
    for comp, G in zip(model.components, gammas):
        H = comp.sensing.as_matrix()
        HG.append(H @ G)
        Gy += HG[-1] @ H.T
    innov = np.atleast_2d(y - model.forward(xis))
    w = cho_solve(cho_factor(Gy), innov.T).T
    s = [xi + w @ hg for xi, hg in zip(xis, HG)]
    if y.ndim == 1:
        s = [np.tile(x, (n_chains, 1)) for x in s]
    u = {k: s[k].copy() for k in model.relaxed_indices}
    return ChainState(s, u, 0, np.random.default_rng(rng))


def sweep(model, y, state, sigma_eff, etas_eff, denoisers, schedules, solver, rng, factors, method="auto"):
    """One pass over ``k = 1..K`` (u-update for relaxed components, then s-update)."""
    for k, comp in enumerate(model.components):
        eta = etas_eff.get(k)
        if comp.relaxed:
            state.u[k] = update_u(model, y, state, k, sigma_eff, eta, rng, factors)
        state.s[k] = update_s(model, y, state, k, sigma_eff, eta, denoisers[k], schedules[k], solver, rng, method)
    return state


def dig_run(
    model: MixtureModel,
    y,
    cfg: DiGConfig,
    denoisers: Sequence[Denoiser] | None = None,
    init: ChainState | None = None,
    schedule: NoiseSchedule | Sequence[NoiseSchedule] = NoiseSchedule(),
    n_chains: int = 1,
    trace=None,
) -> ChainState:
    """Run ``cfg.n_sweeps`` DiG sweeps and return the final state.

    ``y`` may be one observation shared by all chains or a ``(n_chains, m)``
    stack. ``trace``, if given, is called as ``trace(i, state)`` after every sweep.
    """
    check_model(model)
    y = check_observation(model, y, batched=True)
    cfg.check_terminal(model)
    dens = _denoisers(model, denoisers)
    scheds = _schedules(model, schedule)
    state = (init if init is not None else initialize(model, y, n_chains=n_chains)).copy()
    if set(state.u) != set(model.relaxed_indices):
        raise ValueError("initial state must carry u exactly on the relaxed components")
    rng = state.rng if cfg.seed is None else np.random.default_rng(cfg.seed)
    if rng is None:
        rng = np.random.default_rng()
    state.rng = rng
    factors = _GaussianFactors(model)
    for i in range(1, cfg.n_sweeps + 1):
        sigma = cfg.sigma_at(model, i)
        etas = {k: cfg.eta_at(model, k, i) for k in model.relaxed_indices}
        sweep(model, y, state, sigma, etas, dens, scheds, cfg.solver, rng, factors, cfg.conditional)
        state.iteration += 1
        if trace is not None:
            trace(i, state)
    return state


# ---------------------------------------------------------------------------
# Baseline


def proximal_split_run(
    model: MixtureModel,
    y,
    cfg: DiGConfig,
    eta: float | AnnealSchedule,
    denoisers: Sequence[Denoiser] | None = None,
    init=None,
    rng=None,
    schedule: NoiseSchedule | Sequence[NoiseSchedule] = NoiseSchedule(),
    n_chains: int = 1,
) -> np.ndarray:
    """Stacked proximal-split sampler; returns final stacked samples ``(n, sum d_k)``.

    Alternates a Gaussian draw of the stacked auxiliary variable ``u`` from
    ``exp(-|y - H u|^2 / 2 sigma^2 - |u - s|^2 / 2 eta^2)`` with a blockwise
    prior proximal draw of ``s`` at level ``eta``. Every component receives the
    same ``eta``. ``cfg`` supplies the sweep count, sigma annealing and solver;
    its eta schedules are ignored.
    """
    check_model(model)
    y = check_observation(model, y, batched=True)
    dens = _denoisers(model, denoisers)
    scheds = _schedules(model, schedule)
    offs = model.offsets
    H = model.stacked_operator()
    G = H.T @ H
    Hty = y @ H
    if init is None:
        init = initialize(model, y, n_chains=n_chains)
    if isinstance(init, ChainState):
        s = np.concatenate(init.s, axis=1)
        rng = rng if rng is not None else init.rng
    else:
        s = np.atleast_2d(np.array(init, dtype=float))
    rng = np.random.default_rng(rng if cfg.seed is None else cfg.seed)
    eta_sched = eta if isinstance(eta, AnnealSchedule) else AnnealSchedule.constant(float(eta), cfg.n_sweeps)
    cache = {}
    for i in range(1, cfg.n_sweeps + 1):
        sigma = cfg.sigma_at(model, i)
        e = eta_sched(i)
        key = (sigma, e)
        if key not in cache:
            cache = {key: np.linalg.cholesky(G / sigma**2 + np.eye(G.shape[0]) / e**2)}
        L = cache[key]
        b = Hty / sigma**2 + s / e**2
        mean = cho_solve((L, True), b.T).T
        u = mean + solve_triangular(L, rng.standard_normal(mean.shape).T, trans="T", lower=True).T
        blocks = []
        for k in range(model.K):
            uk = u[:, offs[k] : offs[k + 1]]
            blocks.append(denoising_posterior_sample(dens[k], scheds[k], cfg.solver, uk, e, rng, cfg.conditional))
        s = np.concatenate(blocks, axis=1)
    return s


# ---------------------------------------------------------------------------
# Estimators


def data_misfit(model: MixtureModel, y, samples: Sequence[np.ndarray]) -> np.ndarray:
    """``||y - sum_k H_k s_k||`` per chain."""
    return np.linalg.norm(np.asarray(y) - model.forward(samples), axis=-1)


def posterior_estimate(model: MixtureModel, y, samples: Sequence[np.ndarray], misfit_select: bool = False):
    """Per-component sample mean, optionally over chains with below-average misfit."""
    samples = [np.atleast_2d(s) for s in samples]
    if misfit_select:
        mis = data_misfit(model, y, samples)
        keep = mis <= mis.mean()
        samples = [s[keep] for s in samples]
    return [s.mean(axis=0) for s in samples]


def split_stacked(model: MixtureModel, stacked: np.ndarray) -> list[np.ndarray]:
    offs = model.offsets
    return [stacked[..., offs[k] : offs[k + 1]] for k in range(model.K)]
