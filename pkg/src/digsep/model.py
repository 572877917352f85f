"""Observation model types: sensing operators, component priors, the mixture model.

All arrays stored on these objects are made read-only at construction so the
objects can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

SYMMETRY_TOL = 1e-10
SIMPLEX_TOL = 1e-12


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class ModelError(ValueError):
    """Raised when a model fails validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    component: int | None
    rule: str
    detail: str = ""

    def __str__(self):
        where = "model" if self.component is None else f"component {self.component}"
        return f"{where}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


# ---------------------------------------------------------------------------
# Sensing operators


@dataclass(frozen=True)
class SensingOp:
    """Linear map from a component's space (dim ``d``) to observation space (dim ``m``).

    Use the constructors :meth:`identity`, :meth:`dense` and :meth:`scaled`.
    """

    kind: str
    m: int
    d: int
    matrix: np.ndarray | None = None
    c: float | None = None

    @classmethod
    def identity(cls, d: int) -> "SensingOp":
        return cls("identity", int(d), int(d))

    @classmethod
    def dense(cls, matrix) -> "SensingOp":
        A = _frozen(matrix, ndim=2)
        return cls("dense", A.shape[0], A.shape[1], matrix=A)

    @classmethod
    def scaled(cls, c: float, d: int) -> "SensingOp":
        return cls("scaled", int(d), int(d), c=float(c))

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def apply(self, x: np.ndarray) -> np.ndarray:
        """``H x`` over the last axis."""
        if self.kind == "identity":
            return np.asarray(x, dtype=float)
        if self.kind == "scaled":
            return self.c * np.asarray(x, dtype=float)
        return np.asarray(x, dtype=float) @ self.matrix.T

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """``H^T y`` over the last axis."""
        if self.kind == "identity":
            return np.asarray(y, dtype=float)
        if self.kind == "scaled":
            return self.c * np.asarray(y, dtype=float)
        return np.asarray(y, dtype=float) @ self.matrix

    def as_matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.d)
        if self.kind == "scaled":
            return self.c * np.eye(self.d)
        return np.array(self.matrix)

    def gram(self) -> np.ndarray:
        """``H^T H`` as a dense ``d x d`` matrix."""
        if self.kind == "dense":
            return self.matrix.T @ self.matrix
        H = self.as_matrix()
        return H.T @ H


# ---------------------------------------------------------------------------
# Priors


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov):
        object.__setattr__(self, "mean", _frozen(mean, ndim=1))
        object.__setattr__(self, "cov", _frozen(cov, ndim=2))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianMixturePrior:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __init__(self, weights, means, covs):
        object.__setattr__(self, "weights", _frozen(weights, ndim=1))
        object.__setattr__(self, "means", _frozen(means, ndim=2))
        object.__setattr__(self, "covs", _frozen(covs, ndim=3))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_modes(self) -> int:
        return self.weights.shape[0]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Overall mean and covariance of the mixture."""
        w = self.weights
        mu = w @ self.means
        dev = self.means - mu
        cov = np.einsum("j,jab->ab", w, self.covs) + np.einsum("j,ja,jb->ab", w, dev, dev)
        return mu, cov


@dataclass(frozen=True)
class SmoothnessPrior:
    """Penalty ``lam * ||D s||^2`` with ``D`` the forward-difference operator."""

    lam: float


@dataclass(frozen=True)
class FourierSparsityPrior:
    """Penalty ``lam * ||F s||_1`` with ``F`` the unitary DFT.

    ``weights`` optionally gives one nonnegative multiplier per real-FFT bin.
    """

    lam: float
    weights: Any = None


@dataclass(frozen=True)
class ExternalPrior:
    """Prior known only through a denoiser supplied by the caller."""

    denoiser: Any


Prior = GaussianPrior | GaussianMixturePrior | SmoothnessPrior | FourierSparsityPrior | ExternalPrior


def is_spd(cov: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    """Symmetric positive-definiteness via an attempted Cholesky factorization."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.all(np.isfinite(cov)):
        return False
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.max(np.abs(cov - cov.T)) > tol * scale:
        return False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return False
    return True


def prior_violations(prior, dim: int, index: int | None = None) -> list[Violation]:
    out = []
    if isinstance(prior, GaussianPrior):
        if prior.mean.shape != (dim,) or prior.cov.shape != (dim, dim):
            out.append(Violation(index, "dimension mismatch", "gaussian prior"))
        elif not is_spd(prior.cov):
            out.append(Violation(index, "covariance not SPD"))
    elif isinstance(prior, GaussianMixturePrior):
        w = prior.weights
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            out.append(Violation(index, "weights not simplex", f"sum={w.sum():.15g}"))
        J = w.shape[0]
        if prior.means.shape != (J, dim) or prior.covs.shape != (J, dim, dim):
            out.append(Violation(index, "dimension mismatch", "mixture prior"))
        else:
            for j in range(J):
                if not is_spd(prior.covs[j]):
                    out.append(Violation(index, "covariance not SPD", f"mode {j}"))
    elif isinstance(prior, (SmoothnessPrior, FourierSparsityPrior)):
        if not prior.lam > 0:
            out.append(Violation(index, "lambda must be positive"))
        w = getattr(prior, "weights", None)
        if w is not None:
            w = np.asarray(w, dtype=float)
            if w.shape != (dim // 2 + 1,):
                out.append(Violation(index, "dimension mismatch", "frequency weights"))
            elif np.any(w < 0) or not np.all(np.isfinite(w)):
                out.append(Violation(index, "weights not nonnegative"))
    elif isinstance(prior, ExternalPrior):
        d = getattr(prior.denoiser, "dim", dim)
        if d != dim:
            out.append(Violation(index, "dimension mismatch", "external denoiser"))
    else:
        out.append(Violation(index, "unknown prior", type(prior).__name__))
    return out


# ---------------------------------------------------------------------------
# Components and the full model


@dataclass(frozen=True)
class ComponentSpec:
    dim: int
    sensing: SensingOp
    prior: Any
    relax_eta: float = 0.0

    @property
    def relaxed(self) -> bool:
        """Whether the component belongs to the relaxed index set (non-identity sensing)."""
        return not self.sensing.is_identity


@dataclass(frozen=True)
class MixtureModel:
    components: tuple[ComponentSpec, ...]
    sigma_v: float
    obs_dim: int

    def __init__(self, components: Sequence[ComponentSpec], sigma_v: float, obs_dim: int | None = None):
        comps = tuple(components)
        if obs_dim is None:
            obs_dim = comps[0].sensing.m if comps else 0
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "sigma_v", float(sigma_v))
        object.__setattr__(self, "obs_dim", int(obs_dim))

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def relaxed_indices(self) -> tuple[int, ...]:
        return tuple(k for k, c in enumerate(self.components) if c.relaxed)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.dim for c in self.components)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def forward(self, components: Sequence[np.ndarray]) -> np.ndarray:
        """Noise-free observation ``sum_k H_k s_k``."""
        return sum(c.sensing.apply(s) for c, s in zip(self.components, components))

    def stacked_operator(self) -> np.ndarray:
        return np.hstack([c.sensing.as_matrix() for c in self.components])

    def all_gaussian(self) -> bool:
        return all(isinstance(c.prior, GaussianPrior) for c in self.components)


def validate_model(model: MixtureModel) -> list[Violation]:
    """Check every structural invariant; an empty list means the model is valid."""
    out = []
    if model.K < 1:
        out.append(Violation(None, "at least one component required"))
    if not (np.isfinite(model.sigma_v) and model.sigma_v > 0):
        out.append(Violation(None, "sigma_v must be positive"))
    for k, comp in enumerate(model.components):
        op = comp.sensing
        if op.d != comp.dim:
            out.append(Violation(k, "dimension mismatch", f"sensing input {op.d} != dim {comp.dim}"))
        if op.m != model.obs_dim:
            out.append(Violation(k, "dimension mismatch", f"sensing output {op.m} != obs_dim {model.obs_dim}"))
        if op.kind in ("identity", "scaled") and op.m != op.d:
            out.append(Violation(k, "dimension mismatch", f"{op.kind} sensing must be square"))
        if op.kind == "dense" and not np.all(np.isfinite(op.matrix)):
            out.append(Violation(k, "non-finite sensing matrix"))
        if op.kind == "scaled" and not np.isfinite(op.c):
            out.append(Violation(k, "non-finite sensing scale"))
        if op.kind not in ("identity", "dense", "scaled"):
            out.append(Violation(k, "unknown sensing kind", op.kind))
        if comp.relaxed and not comp.relax_eta > 0:
            out.append(Violation(k, "relaxation required", "non-identity sensing needs relax_eta > 0"))
        if not comp.relaxed and comp.relax_eta != 0:
            out.append(Violation(k, "relaxation forbidden", "identity sensing needs relax_eta = 0"))
        out.extend(prior_violations(comp.prior, comp.dim, k))
    return out


def check_model(model: MixtureModel) -> MixtureModel:
    violations = validate_model(model)
    if violations:
        raise ModelError(violations)
    return model


def check_observation(model: MixtureModel, y, batched: bool = False) -> np.ndarray:
    """Validate ``y``; with ``batched`` a ``(n, m)`` stack of observations is also accepted."""
    y = np.asarray(y, dtype=float)
    ok = y.shape == (model.obs_dim,) or (batched and y.ndim == 2 and y.shape[1] == model.obs_dim)
    if not ok:
        raise ValueError(f"observation has shape {y.shape}, expected ({model.obs_dim},)")
    if not np.all(np.isfinite(y)):
        raise ValueError("observation has non-finite entries")
    return y


def simulate_observation(model: MixtureModel, true_components, rng) -> np.ndarray:
    """Draw ``y = sum_k H_k s_k + v`` with ``v ~ N(0, sigma_v^2 I)``.

    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    if len(true_components) != model.K:
        raise ValueError(f"expected {model.K} components, got {len(true_components)}")
    comps = []
    for k, (c, s) in enumerate(zip(model.components, true_components)):
        s = np.asarray(s, dtype=float)
        if s.shape != (c.dim,):
            raise ValueError(f"component {k} has shape {s.shape}, expected ({c.dim},)")
        comps.append(s)
    rng = np.random.default_rng(rng)
    return model.forward(comps) + model.sigma_v * rng.standard_normal(model.obs_dim)


def stack_components(components: Sequence[ComponentSpec], relax_eta: float | None = None) -> ComponentSpec:
    """Merge correlated components into one block component.

    The block sensing is ``[H_1 ... H_p]``. A product prior is only formed when
    every member prior is Gaussian; otherwise the caller must supply one.
    The stacked sensing is never the identity, so the result needs a positive
    ``relax_eta`` (defaults to the largest member value).
    """
    comps = list(components)
    if not comps:
        raise ValueError("nothing to stack")
    if len(comps) == 1:
        return comps[0]
    dim = sum(c.dim for c in comps)
    blocks = [c.sensing.as_matrix() for c in comps]
    m = blocks[0].shape[0]
    if any(b.shape[0] != m for b in blocks):
        raise ValueError("stacked components must share the observation dimension")
    sensing = SensingOp.dense(np.hstack(blocks))
    if all(isinstance(c.prior, GaussianPrior) for c in comps):
        from scipy.linalg import block_diag

        prior = GaussianPrior(np.concatenate([c.prior.mean for c in comps]), block_diag(*[c.prior.cov for c in comps]))
    else:
        raise ValueError("stacking non-Gaussian priors needs a joint prior from the caller")
    if relax_eta is None:
        relax_eta = max(c.relax_eta for c in comps)
    return ComponentSpec(dim, sensing, prior, relax_eta=float(relax_eta))


def moment_hint(prior) -> tuple[np.ndarray, np.ndarray] | None:
    """Prior mean and covariance when the prior defines them, else None."""
    if isinstance(prior, GaussianPrior):
        return np.array(prior.mean), np.array(prior.cov)
    if isinstance(prior, GaussianMixturePrior):
        return prior.moments()
    return None


__all__ = [
    "ComponentSpec",
    "ExternalPrior",
    "FourierSparsityPrior",
    "GaussianMixturePrior",
    "GaussianPrior",
    "MixtureModel",
    "ModelError",
    "SensingOp",
    "SmoothnessPrior",
    "Violation",
    "check_model",
    "check_observation",
    "is_spd",
    "moment_hint",
    "simulate_observation",
    "stack_components",
    "validate_model",
]
