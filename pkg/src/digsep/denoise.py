"""Denoisers ``D(z; eta)`` and the score they induce.

Every denoiser maps arrays of shape ``(..., d)`` to the same shape. Analytic
MMSE denoisers (Gaussian, Gaussian mixture) can also draw exactly from the
denoising posterior ``p(s | s + eta * n = z)``; MAP denoisers cannot.
"""

from __future__ import annotations

import math
import struct
import subprocess
import sys
import threading

import numpy as np
from scipy.linalg import solveh_banded
from scipy.special import logsumexp

from .model import (
    ExternalPrior,
    FourierSparsityPrior,
    GaussianMixturePrior,
    GaussianPrior,
    SmoothnessPrior,
    is_spd,
)


class Denoiser:
    """Base class. Subclasses implement :meth:`denoise`."""

    has_exact_conditional_sampler = False
    eta_range = (0.0, math.inf)

    def __init__(self, dim: int):
        self.dim = int(dim)

    def clamp(self, eta: float) -> float:
        lo, hi = self.eta_range
        return float(min(max(eta, lo), hi))

    def __call__(self, z, eta: float) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise ValueError(f"denoiser expects last axis {self.dim}, got {z.shape}")
        if not eta > 0:
            raise ValueError(f"noise level must be positive, got {eta}")
        return self.denoise(z, self.clamp(eta))

    def denoise(self, z: np.ndarray, eta: float) -> np.ndarray:
        raise NotImplementedError

    def sample_conditional(self, z, eta: float, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no exact conditional sampler")


def _prep(z, dim):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != dim:
        raise ValueError(f"expected last axis {dim}, got {z.shape}")
    return z


class GaussianDenoiser(Denoiser):
    """Exact MMSE denoiser for ``N(mean, cov)``.

    ``E[s | z] = mean + cov (cov + eta^2 I)^{-1} (z - mean)``, evaluated in the
    eigenbasis of ``cov`` (factored once at construction).
    """

    has_exact_conditional_sampler = True

    def __init__(self, prior: GaussianPrior):
        super().__init__(prior.dim)
        if not is_spd(prior.cov):
            raise ValueError("Gaussian prior covariance is not SPD")
        self.prior = prior
        lam, V = np.linalg.eigh(prior.cov)
        self._lam, self._V = lam, V

    def _gains(self, eta):
        lam = self._lam
        return lam / (lam + eta**2), lam * eta**2 / (lam + eta**2)

    def denoise(self, z, eta):
        shrink, _ = self._gains(eta)
        w = (z - self.prior.mean) @ self._V
        return self.prior.mean + (w * shrink) @ self._V.T

    def conditional_moments(self, z, eta):
        """Mean and covariance of ``p(s | s + eta n = z)``."""
        z = _prep(z, self.dim)
        shrink, var = self._gains(eta)
        return self.denoise(z, eta), (self._V * var) @ self._V.T

    def sample_conditional(self, z, eta, rng):
        z = _prep(z, self.dim)
        _, var = self._gains(eta)
        eps = rng.standard_normal(z.shape)
        return self.denoise(z, eta) + (eps * np.sqrt(var)) @ self._V.T

    def log_density(self, z, eta):
        """``log p_eta(z)`` for the noised prior ``N(mean, cov + eta^2 I)``."""
        z = _prep(z, self.dim)
        v = self._lam + eta**2
        w = (z - self.prior.mean) @ self._V
        return -0.5 * (np.sum(w**2 / v, axis=-1) + np.sum(np.log(v)) + self.dim * math.log(2 * math.pi))


class GaussianMixtureDenoiser(Denoiser):
    """Exact MMSE denoiser and conditional sampler for a Gaussian mixture prior."""

    has_exact_conditional_sampler = True

    def __init__(self, prior: GaussianMixturePrior):
        super().__init__(prior.dim)
        for j in range(prior.n_modes):
            if not is_spd(prior.covs[j]):
                raise ValueError(f"mixture covariance {j} is not SPD")
        self.prior = prior
        lam, V = np.linalg.eigh(prior.covs)
        self._lam, self._V = lam, V  # (J, d), (J, d, d)
        with np.errstate(divide="ignore"):
            self._logw = np.log(prior.weights)

    def _mode_terms(self, z, eta):
        # w[j, ..., :] = V_j^T (z - mu_j)
        diff = z[None, ...] - self.prior.means.reshape((-1,) + (1,) * (z.ndim - 1) + (self.dim,))
        w = np.einsum("j...a,jab->j...b", diff, self._V)
        v = self._lam + eta**2  # (J, d)
        vb = v.reshape((-1,) + (1,) * (z.ndim - 1) + (self.dim,))
        logpdf = -0.5 * (
            np.sum(w**2 / vb, axis=-1)
            + np.sum(np.log(v), axis=-1).reshape((-1,) + (1,) * (z.ndim - 1))
            + self.dim * math.log(2 * math.pi)
        )
        return w, vb, logpdf

    def log_density(self, z, eta):
        z = _prep(z, self.dim)
        _, _, logpdf = self._mode_terms(z, eta)
        logw = self._logw.reshape((-1,) + (1,) * (z.ndim - 1))
        return logsumexp(logw + logpdf, axis=0)

    def responsibilities(self, z, eta):
        """Posterior mode probabilities, shape ``(J, ...)``."""
        z = _prep(z, self.dim)
        _, _, logpdf = self._mode_terms(z, eta)
        logr = self._logw.reshape((-1,) + (1,) * (z.ndim - 1)) + logpdf
        top = np.max(logr, axis=0, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise FloatingPointError("all mixture responsibilities underflowed")
        r = np.exp(logr - top)
        return r / r.sum(axis=0, keepdims=True)

    def _mode_means(self, z, eta, w, vb):
        lam = self._lam.reshape((-1,) + (1,) * (z.ndim - 1) + (self.dim,))
        back = np.einsum("j...b,jab->j...a", w * lam / vb, self._V)
        return self.prior.means.reshape((-1,) + (1,) * (z.ndim - 1) + (self.dim,)) + back

    def denoise(self, z, eta):
        w, vb, logpdf = self._mode_terms(z, eta)
        logr = self._logw.reshape((-1,) + (1,) * (z.ndim - 1)) + logpdf
        top = np.max(logr, axis=0, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise FloatingPointError("all mixture responsibilities underflowed")
        r = np.exp(logr - top)
        r /= r.sum(axis=0, keepdims=True)
        return np.sum(r[..., None] * self._mode_means(z, eta, w, vb), axis=0)

    def sample_conditional(self, z, eta, rng):
        z = _prep(z, self.dim)
        r = self.responsibilities(z, eta)
        u = rng.random(z.shape[:-1])
        eps = rng.standard_normal(z.shape)
        idx = np.sum(np.cumsum(r, axis=0) < u[None, ...], axis=0)
        idx = np.minimum(idx, self.prior.n_modes - 1)
        w, vb, _ = self._mode_terms(z, eta)
        means = self._mode_means(z, eta, w, vb)
        out = np.empty_like(z)
        for j in range(self.prior.n_modes):
            mask = idx == j
            if not np.any(mask):
                continue
            lam = self._lam[j]
            sd = np.sqrt(lam * eta**2 / (lam + eta**2))
            out[mask] = means[j][mask] + (eps[mask] * sd) @ self._V[j].T
        return out


def _diff_gram_bands(d: int, scale: float) -> np.ndarray:
    """Upper banded form of ``I + scale * D^T D`` for forward differences."""
    ab = np.zeros((2, d))
    main = np.full(d, 2.0)
    main[0] = main[-1] = 1.0
    if d == 1:
        main[:] = 0.0
    ab[1] = 1.0 + scale * main
    ab[0, 1:] = -scale
    return ab


class SmoothnessMAPDenoiser(Denoiser):
    """``argmin_s ||z - s||^2 / (2 eta^2) + lam ||D s||^2`` by a tridiagonal solve."""

    def __init__(self, lam: float, dim: int):
        super().__init__(dim)
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.lam = float(lam)

    def denoise(self, z, eta):
        if self.lam == 0 or self.dim == 1:
            return np.array(z)
        ab = _diff_gram_bands(self.dim, 2.0 * self.lam * eta**2)
        flat = z.reshape(-1, self.dim)
        out = solveh_banded(ab, flat.T, check_finite=False)
        return out.T.reshape(z.shape)


class FourierL1MAPDenoiser(Denoiser):
    """``argmin_s ||z - s||^2 / (2 eta^2) + lam ||F s||_1`` with unitary DFT ``F``.

    Soft-thresholds complex coefficient magnitudes at ``lam * eta^2``. The real
    FFT is used; its ortho-normalized bins carry the same magnitudes as the
    full unitary transform. Optional ``weights`` (one per rfft bin) scale the
    threshold per frequency, i.e. a weighted L1 penalty.
    """

    def __init__(self, lam: float, dim: int, weights=None):
        super().__init__(dim)
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        self.lam = float(lam)
        self.weights = None
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            if w.shape != (dim // 2 + 1,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError(f"weights must be {dim // 2 + 1} finite nonnegative values")
            self.weights = w

    def denoise(self, z, eta):
        c = np.fft.rfft(z, axis=-1, norm="ortho")
        thresh = self.lam * eta**2
        if self.weights is not None:
            thresh = thresh * self.weights
        mag = np.abs(c)
        keep = mag > thresh
        gain = np.zeros_like(mag)
        np.divide(thresh * np.ones_like(mag), mag, out=gain, where=keep)
        gain = np.where(keep, 1.0 - gain, 0.0)
        return np.fft.irfft(c * gain, n=self.dim, axis=-1, norm="ortho")


class CallableDenoiser(Denoiser):
    """Wrap a plain function ``f(z, eta)`` acting on ``(..., d)`` arrays."""

    def __init__(self, fn, dim: int, eta_range=(0.0, math.inf)):
        super().__init__(dim)
        self.fn = fn
        self.eta_range = tuple(eta_range)

    def denoise(self, z, eta):
        return np.asarray(self.fn(z, eta), dtype=float)


# ---------------------------------------------------------------------------
# Subprocess protocol
#
# Request frame:  uint32 n (little-endian), then n float64 LE = [eta, z_0..z_{d-1}]
# Response frame: uint32 d (little-endian), then d float64 LE = D(z; eta)
# One frame per request; the child answers each request before reading the next.

_LEN = struct.Struct("<I")


def write_frame(stream, values) -> None:
    arr = np.ascontiguousarray(values, dtype="<f8").ravel()
    stream.write(_LEN.pack(arr.size))
    stream.write(arr.tobytes())
    stream.flush()


def read_frame(stream) -> np.ndarray | None:
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) != _LEN.size:
        raise EOFError("truncated frame header")
    (n,) = _LEN.unpack(head)
    body = stream.read(8 * n)
    if len(body) != 8 * n:
        raise EOFError("truncated frame body")
    return np.frombuffer(body, dtype="<f8").astype(float)


def serve(fn, stdin=None, stdout=None) -> None:
    """Child-side loop: answer frames with ``fn(z, eta)`` until EOF."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        req = read_frame(stdin)
        if req is None:
            return
        eta, z = req[0], req[1:]
        write_frame(stdout, fn(z, eta))


class SubprocessDenoiser(Denoiser):
    """Denoiser evaluated by a child process speaking the frame protocol above."""

    def __init__(self, command, dim: int, eta_range=(0.0, math.inf)):
        super().__init__(dim)
        self.command = list(command)
        self.eta_range = tuple(eta_range)
        self._lock = threading.Lock()
        self._proc = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def _one(self, z, eta):
        proc = self._ensure()
        write_frame(proc.stdin, np.concatenate([[eta], z]))
        out = read_frame(proc.stdout)
        if out is None or out.shape != (self.dim,):
            raise RuntimeError(f"external denoiser returned {None if out is None else out.shape}")
        return out

    def denoise(self, z, eta):
        flat = z.reshape(-1, self.dim)
        with self._lock:
            out = np.stack([self._one(row, eta) for row in flat])
        return out.reshape(z.shape)

    def close(self):
        with self._lock:
            if self._proc is not None:
                self._proc.stdin.close()
                self._proc.wait(timeout=10)
                self._proc.stdout.close()
                self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Functional API


def denoiser_for(prior, dim: int) -> Denoiser:
    if isinstance(prior, GaussianPrior):
        return GaussianDenoiser(prior)
    if isinstance(prior, GaussianMixturePrior):
        return GaussianMixtureDenoiser(prior)
    if isinstance(prior, SmoothnessPrior):
        return SmoothnessMAPDenoiser(prior.lam, dim)
    if isinstance(prior, FourierSparsityPrior):
        return FourierL1MAPDenoiser(prior.lam, dim, prior.weights)
    if isinstance(prior, ExternalPrior):
        return prior.denoiser
    raise TypeError(f"no denoiser for {type(prior).__name__}")


def mmse_denoise_gaussian(prior: GaussianPrior, z, eta: float) -> np.ndarray:
    return GaussianDenoiser(prior)(z, eta)


def mmse_denoise_gmm(prior: GaussianMixturePrior, z, eta: float) -> np.ndarray:
    return GaussianMixtureDenoiser(prior)(z, eta)


def map_denoise_smooth(lam: float, z, eta: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return SmoothnessMAPDenoiser(lam, z.shape[-1])(z, eta)


def map_denoise_fourier_l1(lam: float, z, eta: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return FourierL1MAPDenoiser(lam, z.shape[-1])(z, eta)


def tweedie_score(den: Denoiser, z, eta: float) -> np.ndarray:
    """Score of the noised prior, ``(D(z; eta) - z) / eta^2``."""
    z = np.asarray(z, dtype=float)
    return (den(z, eta) - z) / eta**2


def exact_conditional_sample(prior, z, eta: float, rng) -> np.ndarray:
    """Exact draw from ``p(s | s + eta n = z)`` for Gaussian or mixture priors."""
    den = denoiser_for(prior, np.shape(z)[-1])
    if not den.has_exact_conditional_sampler:
        raise TypeError(f"no exact conditional sampler for {type(prior).__name__}")
    return den.sample_conditional(z, eta, np.random.default_rng(rng))
