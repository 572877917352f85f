"""Exact posteriors for Gaussian and single-mixture models, and sample discrepancies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .model import GaussianMixturePrior, GaussianPrior, MixtureModel, check_observation


class NoOracleError(ValueError):
    """The model has no closed-form posterior."""


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    offsets: np.ndarray

    def block(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[k], self.offsets[k + 1]
        return self.mean[a:b], self.cov[a:b, a:b]

    def marginal(self, stop: int) -> "GaussianPosterior":
        """Leading ``stop`` blocks (e.g. the s-part of a relaxed posterior)."""
        end = self.offsets[stop]
        return GaussianPosterior(self.mean[:end], self.cov[:end, :end], self.offsets[: stop + 1])

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        lam, V = np.linalg.eigh(self.cov)
        root = V * np.sqrt(np.clip(lam, 0, None))
        return self.mean + rng.standard_normal((n, self.mean.size)) @ root.T


def _condition(mean, cov, G, noise_cov, y):
    """Posterior of ``x ~ N(mean, cov)`` given ``y = G x + noise``."""
    S = G @ cov @ G.T + noise_cov
    cf = cho_factor(0.5 * (S + S.T))
    CGt = cov @ G.T
    gain_t = cho_solve(cf, CGt.T)  # (S^{-1} G cov), i.e. gain^T
    post_mean = mean + gain_t.T @ (y - G @ mean)
    post_cov = cov - CGt @ gain_t
    return post_mean, 0.5 * (post_cov + post_cov.T)


def _gaussian_blocks(model: MixtureModel):
    if not model.all_gaussian():
        bad = [k for k, c in enumerate(model.components) if not isinstance(c.prior, GaussianPrior)]
        raise NoOracleError(f"no oracle: non-Gaussian prior on components {bad}")
    return [c.prior.mean for c in model.components], [c.prior.cov for c in model.components]


def gaussian_posterior_exact(model: MixtureModel, y) -> GaussianPosterior:
    y = check_observation(model, y)
    means, covs = _gaussian_blocks(model)
    H = model.stacked_operator()
    mean, cov = _condition(np.concatenate(means), block_diag(*covs), H, model.sigma_v**2 * np.eye(model.obs_dim), y)
    return GaussianPosterior(mean, cov, model.offsets)


def relaxed_posterior_exact(model: MixtureModel, y, etas=None, relax_all: bool = False) -> GaussianPosterior:
    """Joint posterior over ``(s_1..s_K, u_R)`` under the relaxed model.

    ``R`` is the set of non-identity components, or every component when
    ``relax_all`` is set (the proximal-split model with one shared level).
    ``etas`` maps component index to relaxation level and defaults to each
    component's ``relax_eta``; a scalar applies to all of ``R``. Blocks are
    ordered ``s_1..s_K`` then ``u_k`` for ``k`` in ``R`` ascending.
    """
    y = check_observation(model, y)
    means, covs = _gaussian_blocks(model)
    R = list(range(model.K)) if relax_all else list(model.relaxed_indices)
    if etas is None:
        etas = {k: model.components[k].relax_eta for k in R}
    elif np.isscalar(etas):
        etas = {k: float(etas) for k in R}
    for k in R:
        if not etas[k] > 0:
            raise ValueError(f"relaxation level for component {k} must be positive")
    dims = list(model.dims) + [model.dims[k] for k in R]
    offs = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    n = offs[-1]
    mean = np.concatenate(means + [means[k] for k in R])
    cov = np.zeros((n, n))
    cov[: offs[model.K], : offs[model.K]] = block_diag(*covs)
    for i, k in enumerate(R):
        a, b = offs[k], offs[k + 1]
        ua, ub = offs[model.K + i], offs[model.K + i + 1]
        cov[ua:ub, a:b] = covs[k]
        cov[a:b, ua:ub] = covs[k]
        cov[ua:ub, ua:ub] = covs[k] + etas[k] ** 2 * np.eye(b - a)
    G = np.zeros((model.obs_dim, n))
    for k, comp in enumerate(model.components):
        if k in R:
            i = R.index(k)
            G[:, offs[model.K + i] : offs[model.K + i + 1]] = comp.sensing.as_matrix()
        else:
            G[:, offs[k] : offs[k + 1]] = comp.sensing.as_matrix()
    pm, pc = _condition(mean, cov, G, model.sigma_v**2 * np.eye(model.obs_dim), y)
    return GaussianPosterior(pm, pc, offs)


@dataclass(frozen=True)
class MixturePosterior:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def cov(self) -> np.ndarray:
        dev = self.means - self.mean
        return np.einsum("j,jab->ab", self.weights, self.covs) + np.einsum("j,ja,jb->ab", self.weights, dev, dev)

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        idx = rng.choice(self.weights.size, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.means.shape[1]))
        out = np.empty((n, self.means.shape[1]))
        for j in range(self.weights.size):
            mask = idx == j
            L = np.linalg.cholesky(self.covs[j])
            out[mask] = self.means[j] + eps[mask] @ L.T
        return out


def gmm_posterior_exact(model: MixtureModel, y) -> MixturePosterior:
    """Posterior for one identity-sensed component with a Gaussian-mixture prior."""
    y = check_observation(model, y)
    if model.K != 1 or not model.components[0].sensing.is_identity:
        raise NoOracleError("no oracle: mixture posterior needs a single identity component")
    prior = model.components[0].prior
    if isinstance(prior, GaussianPrior):
        prior = GaussianMixturePrior([1.0], prior.mean[None], prior.cov[None])
    if not isinstance(prior, GaussianMixturePrior):
        raise NoOracleError(f"no oracle: prior {type(prior).__name__}")
    noise = model.sigma_v**2 * np.eye(model.obs_dim)
    logw, means, covs = [], [], []
    for w, mu, S in zip(prior.weights, prior.means, prior.covs):
        C = S + noise
        cf = cho_factor(C)
        diff = y - mu
        logdet = 2 * np.sum(np.log(np.diag(cf[0])))
        ll = -0.5 * (diff @ cho_solve(cf, diff) + logdet + y.size * np.log(2 * np.pi))
        logw.append(np.log(w) + ll)
        m, c = _condition(mu, S, np.eye(y.size), noise, y)
        means.append(m)
        covs.append(c)
    logw = np.array(logw)
    weights = np.exp(logw - logsumexp(logw))
    return MixturePosterior(weights, np.array(means), np.array(covs))


# ---------------------------------------------------------------------------
# Discrepancies


@dataclass(frozen=True)
class Discrepancy:
    mean_err: float
    cov_err: float
    energy_distance: float


def energy_distance(x, y) -> float:
    """V-statistic energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty sample set")
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def energy_permutation_test(x, y, n_perm: int = 200, rng=None, level: float = 0.95):
    """Energy distance with its permutation-null quantile.

    Returns ``(statistic, band, p_value)`` where ``band`` is the ``level``
    quantile of the statistic under random relabelling of the pooled sample.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("empty sample set")
    rng = np.random.default_rng(rng)
    pooled = np.vstack([x, y])
    D = cdist(pooled, pooled)
    n, N = x.shape[0], pooled.shape[0]

    def stat(mask):
        a, b = mask, ~mask
        return 2 * D[np.ix_(a, b)].mean() - D[np.ix_(a, a)].mean() - D[np.ix_(b, b)].mean()

    base = np.zeros(N, dtype=bool)
    base[:n] = True
    observed = stat(base)
    null = np.empty(n_perm)
    for i in range(n_perm):
        null[i] = stat(base[rng.permutation(N)])
    p_value = (1 + np.sum(null >= observed)) / (1 + n_perm)
    return float(observed), float(np.quantile(null, level)), float(p_value)


def _reference_moments(reference):
    if hasattr(reference, "mean") and hasattr(reference, "cov") and not isinstance(reference, np.ndarray):
        return np.asarray(reference.mean), np.asarray(reference.cov)
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    return ref.mean(axis=0), np.cov(ref, rowvar=False)


def discrepancy(samples, reference, n_ref: int | None = None, rng=0, energy_cap: int = 2000) -> Discrepancy:
    """Relative mean error, relative covariance Frobenius error, energy distance.

    ``reference`` is an exact posterior (with ``mean``, ``cov``, ``sample``) or
    a sample array. Fresh reference draws for the energy distance use ``rng``.
    The energy distance is quadratic in memory, so both sets are subsampled
    to at most ``energy_cap`` rows (moments always use every sample).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    m_ref, c_ref = _reference_moments(reference)
    c_ref = np.atleast_2d(c_ref)
    m_hat = x.mean(axis=0)
    c_hat = np.atleast_2d(np.cov(x, rowvar=False, bias=False)) if x.shape[0] > 1 else np.zeros_like(c_ref)
    mean_err = np.linalg.norm(m_hat - m_ref) / np.linalg.norm(m_ref)
    cov_err = np.linalg.norm(c_hat - c_ref) / np.linalg.norm(c_ref)
    rng = np.random.default_rng(rng)
    if hasattr(reference, "sample"):
        ref_draws = reference.sample(min(n_ref or x.shape[0], energy_cap), rng)
    else:
        ref_draws = np.atleast_2d(np.asarray(reference, dtype=float))
    if x.shape[0] > energy_cap:
        x = x[rng.choice(x.shape[0], energy_cap, replace=False)]
    if ref_draws.shape[0] > energy_cap:
        ref_draws = ref_draws[rng.choice(ref_draws.shape[0], energy_cap, replace=False)]
    return Discrepancy(float(mean_err), float(cov_err), energy_distance(x, ref_draws))
