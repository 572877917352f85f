"""TOML run and bench configuration.

Model config layout::

    sigma_v = 0.3

    [schedule]            # optional; exponential alpha=15, T=1 by default
    kind = "exponential"
    alpha = 15.0
    T = 1.0

    [solver]              # optional reverse-SDE settings
    steps = 200
    grid = "geometric_sigma"

    [sampler]             # optional
    sweeps = 50
    anneal = "cosine"     # or "constant"
    sigma_factor = 3.0
    eta_factor = 3.0
    eps = 0.008
    plateau = 0
    conditional = "auto"
    chains = 100
    batch = 64

    [observation]
    y = [0.1, 0.2]        # or file = "y.csv"
    truth_file = "s.csv"  # optional, one row per component

    [[components]]
    dim = 2
    sensing = "identity"  # "scaled" (needs scale) or "dense" (matrix or matrix_file)
    relax_eta = 0.0
    init_mean = 0.0       # optional initialization moments; default to the
    init_cov = 1.0        # prior's own, or (0, I) for penalty-type priors
    [components.prior]
    kind = "gaussian"     # gmm | smooth | fourier_l1 | external
    mean = [0.0, 0.0]     # scalars broadcast; a scalar cov means cov * I
    cov = 1.0

Relative file paths resolve against the config file's directory. Every
error raised here is a :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bench import BenchConfig, HeartbeatGenConfig, MotionGenConfig
from .denoise import SubprocessDenoiser, denoiser_for
from .diffusion import SdeSolverConfig
from .model import (
    ComponentSpec,
    ExternalPrior,
    FourierSparsityPrior,
    GaussianMixturePrior,
    GaussianPrior,
    MixtureModel,
    ModelError,
    SensingOp,
    SmoothnessPrior,
    check_model,
    moment_hint,
)
from .sampler import DiGConfig
from .schedule import AnnealSchedule, NoiseSchedule


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass(frozen=True)
class SamplerSettings:
    sweeps: int = 50
    anneal: str = "cosine"
    sigma_factor: float = 3.0
    eta_factor: float = 3.0
    eps: float = 0.008
    plateau: int = 0
    conditional: str = "auto"
    chains: int = 100
    batch: int = 64


@dataclass
class RunConfig:
    model: MixtureModel
    y: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    solver: SdeSolverConfig = field(default_factory=SdeSolverConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    truth: list[np.ndarray] | None = None
    path: Path | None = None
    hints: list | None = None  # per-component (mean, cov) for initialization

    def dig_config(self, seed=None) -> DiGConfig:
        s = self.sampler
        if s.anneal == "cosine":
            return DiGConfig.cosine(
                self.model, s.sweeps, s.sigma_factor, s.eta_factor, s.eps, s.plateau,
                solver=self.solver, seed=seed, conditional=s.conditional,
            )
        return DiGConfig(s.sweeps, None, {}, self.solver, seed, s.conditional)

    def denoisers(self):
        out = []
        for c in self.model.components:
            out.append(c.prior.denoiser if isinstance(c.prior, ExternalPrior) else denoiser_for(c.prior, c.dim))
        return out


# ---------------------------------------------------------------------------
# helpers


def _read_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"invalid TOML: {e}") from e


def _get(table: dict, key: str, prefix: str, required=True, default=None):
    if key not in table:
        if required:
            raise ConfigError(prefix + key, "missing required key")
        return default
    return table[key]


def _number(x, key, positive=False, nonneg=False) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(key, f"expected a number, got {x!r}")
    x = float(x)
    if not np.isfinite(x) or (positive and not x > 0) or (nonneg and x < 0):
        raise ConfigError(key, f"value {x} out of range")
    return x


def _int(x, key, minimum=None) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(key, f"expected an integer, got {x!r}")
    if minimum is not None and x < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return x


def _array(x, key, shape=None) -> np.ndarray:
    try:
        a = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, f"not a numeric array: {e}") from e
    if not np.all(np.isfinite(a)):
        raise ConfigError(key, "non-finite entries")
    if shape is not None:
        try:
            a = np.array(np.broadcast_to(a, shape))
        except ValueError:
            raise ConfigError(key, f"shape {a.shape} incompatible with {shape}") from None
    return a


def _cov(x, key, d) -> np.ndarray:
    a = _array(x, key)
    if a.ndim == 0:
        return float(a) * np.eye(d)
    if a.ndim == 1 and a.shape == (d,):
        return np.diag(a)
    if a.shape != (d, d):
        raise ConfigError(key, f"expected scalar, {d}-vector or {d}x{d} matrix")
    return a


def load_csv(path, key) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigError(key, f"cannot load {path}: {e}") from e


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------------------
# model config


def _prior(tab, key, d, base):
    if not isinstance(tab, dict):
        raise ConfigError(key, "expected a table")
    kind = _get(tab, "kind", key + ".")
    p = key + "."
    if kind == "gaussian":
        return GaussianPrior(_array(_get(tab, "mean", p), p + "mean", (d,)), _cov(_get(tab, "cov", p), p + "cov", d))
    if kind == "gmm":
        w = _array(_get(tab, "weights", p), p + "weights")
        if w.ndim != 1:
            raise ConfigError(p + "weights", "expected a vector")
        J = w.size
        means = _array(_get(tab, "means", p), p + "means", (J, d))
        covs = _get(tab, "covs", p)
        if not isinstance(covs, list) or len(covs) != J:
            a = _array(covs, p + "covs")
            if a.ndim == 0:
                covs = [a] * J
            else:
                raise ConfigError(p + "covs", f"expected {J} covariances")
        covs = np.stack([_cov(c, f"{p}covs[{j}]", d) for j, c in enumerate(covs)])
        return GaussianMixturePrior(w, means, covs)
    if kind == "smooth":
        return SmoothnessPrior(_number(_get(tab, "lambda", p), p + "lambda", positive=True))
    if kind == "fourier_l1":
        lam = _number(_get(tab, "lambda", p), p + "lambda", positive=True)
        w = _get(tab, "weights", p, required=False)
        if w is not None:
            w = _array(w, p + "weights")
        return FourierSparsityPrior(lam, w)
    if kind == "external":
        cmd = _get(tab, "command", p)
        if isinstance(cmd, str):
            cmd = cmd.split()
        if not isinstance(cmd, list) or not cmd or not all(isinstance(c, str) for c in cmd):
            raise ConfigError(p + "command", "expected a command string or list")
        eta_max = _number(tab.get("eta_max", np.inf), p + "eta_max", positive=True)
        return ExternalPrior(SubprocessDenoiser(cmd, d, (0.0, eta_max)))
    raise ConfigError(p + "kind", f"unknown prior kind {kind!r}; valid: gaussian, gmm, smooth, fourier_l1, external")


def _sensing(tab, key, d, base):
    p = key + "."
    kind = tab.get("sensing", "identity")
    if kind == "identity":
        return SensingOp.identity(d)
    if kind == "scaled":
        return SensingOp.scaled(_number(_get(tab, "scale", p), p + "scale"), d)
    if kind == "dense":
        if "matrix" in tab:
            A = _array(tab["matrix"], p + "matrix")
        elif "matrix_file" in tab:
            A = load_csv(_resolve(base, tab["matrix_file"]), p + "matrix_file")
        else:
            raise ConfigError(p + "matrix", "dense sensing needs matrix or matrix_file")
        if A.ndim != 2 or A.shape[1] != d:
            raise ConfigError(p + "matrix", f"shape {A.shape} does not have {d} columns")
        return SensingOp.dense(A)
    raise ConfigError(p + "sensing", f"unknown sensing {kind!r}; valid: identity, scaled, dense")


def _dataclass_from(cls, tab, key, **conv):
    if tab is None:
        return cls()
    if not isinstance(tab, dict):
        raise ConfigError(key, "expected a table")
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in tab.items():
        if k not in names:
            raise ConfigError(f"{key}.{k}", f"unknown key; valid: {', '.join(sorted(names))}")
        kw[k] = conv[k](v, f"{key}.{k}") if k in conv else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, str(e)) from e


def parse_model_config(data: dict, base: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config", "expected a table")
    sigma_v = _number(_get(data, "sigma_v", ""), "sigma_v", positive=True)
    comps_tab = _get(data, "components", "")
    if not isinstance(comps_tab, list) or not comps_tab:
        raise ConfigError("components", "expected a non-empty array of tables")
    comps, hints = [], []
    for k, tab in enumerate(comps_tab):
        key = f"components[{k}]"
        if not isinstance(tab, dict):
            raise ConfigError(key, "expected a table")
        d = _int(_get(tab, "dim", key + "."), key + ".dim", minimum=1)
        sensing = _sensing(tab, key, d, base)
        prior = _prior(_get(tab, "prior", key + "."), key + ".prior", d, base)
        eta = _number(tab.get("relax_eta", 0.0), key + ".relax_eta", nonneg=True)
        comps.append(ComponentSpec(d, sensing, prior, eta))
        hint = moment_hint(prior)
        if "init_mean" in tab or "init_cov" in tab or hint is None:
            hint = (
                _array(tab.get("init_mean", 0.0), key + ".init_mean", (d,)),
                _cov(tab.get("init_cov", 1.0), key + ".init_cov", d),
            )
        hints.append(hint)
    model = MixtureModel(comps, sigma_v)
    try:
        check_model(model)
    except ModelError as e:
        raise ConfigError("components", str(e)) from e

    obs = _get(data, "observation", "")
    if not isinstance(obs, dict):
        raise ConfigError("observation", "expected a table")
    if "y" in obs:
        y = _array(obs["y"], "observation.y")
    elif "file" in obs:
        y = load_csv(_resolve(base, obs["file"]), "observation.file").ravel()
    else:
        raise ConfigError("observation.y", "missing observation (y or file)")
    if y.shape != (model.obs_dim,):
        raise ConfigError("observation.y", f"expected {model.obs_dim} values, got shape {y.shape}")
    truth = None
    if "truth_file" in obs:
        rows = load_csv(_resolve(base, obs["truth_file"]), "observation.truth_file")
        if rows.shape[0] != model.K or any(rows.shape[1] < c.dim for c in comps):
            raise ConfigError("observation.truth_file", "expected one row per component")
        truth = [rows[k, : c.dim] for k, c in enumerate(comps)]

    sched = _dataclass_from(NoiseSchedule, data.get("schedule"), "schedule")
    solver = _dataclass_from(SdeSolverConfig, data.get("solver"), "solver")
    sampler = _dataclass_from(SamplerSettings, data.get("sampler"), "sampler")
    if sampler.anneal not in ("cosine", "constant"):
        raise ConfigError("sampler.anneal", "valid: cosine, constant")
    if sampler.conditional not in ("auto", "exact", "sde"):
        raise ConfigError("sampler.conditional", "valid: auto, exact, sde")
    _int(sampler.sweeps, "sampler.sweeps", 1)
    _int(sampler.chains, "sampler.chains", 1)
    _int(sampler.batch, "sampler.batch", 1)
    for k, c in enumerate(comps):
        if c.relaxed and c.relax_eta * max(sampler.eta_factor, 1.0) > sched.sigma_max:
            raise ConfigError(f"components[{k}].relax_eta", f"annealed level exceeds sigma(T)={sched.sigma_max:.4g}")
    return RunConfig(model, y, sched, solver, sampler, truth, None, hints)


def load_model_config(path) -> RunConfig:
    path = Path(path)
    cfg = parse_model_config(_read_toml(path), path.parent)
    cfg.path = path
    return cfg


# ---------------------------------------------------------------------------
# bench config


def _grid(x, key):
    a = _array(x, key)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] == 0:
        raise ConfigError(key, "expected a list of [sir, snr] pairs")
    return tuple((float(r[0]), float(r[1])) for r in a)


def parse_bench_config(data: dict) -> BenchConfig:
    tab = data.get("bench", data)
    if not isinstance(tab, dict):
        raise ConfigError("bench", "expected a table")
    tab = dict(tab)
    hb = _dataclass_from(HeartbeatGenConfig, tab.pop("heartbeat", None), "bench.heartbeat",
                         rate_range=lambda v, k: tuple(_array(v, k, (2,))), band=lambda v, k: tuple(_array(v, k, (2,))))
    mo = _dataclass_from(MotionGenConfig, tab.pop("motion", None), "bench.motion",
                         segments=lambda v, k: tuple(int(i) for i in _array(v, k, (2,))),
                         velocity_range=lambda v, k: tuple(_array(v, k, (2,))))
    cfg = _dataclass_from(BenchConfig, tab, "bench", grid=_grid)
    for name in ("instances", "chains", "sweeps", "steps"):
        _int(getattr(cfg, name), f"bench.{name}", 1)
    if hb.length != mo.length:
        raise ConfigError("bench.motion.length", "must equal bench.heartbeat.length")
    return dataclasses.replace(cfg, heartbeat=hb, motion=mo)


def load_bench_config(path) -> BenchConfig:
    return parse_bench_config(_read_toml(path))
