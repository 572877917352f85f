"""Command-line interface: ``digsep {sample,oracle,bench,gen-data}``.

Randomness: the root ``--seed`` feeds a ``SeedSequence``; chains are cut into
fixed-size batches and batch ``b`` uses child ``b`` of that sequence, so the
output does not depend on ``--threads``. Files are written by the main thread
only, after all workers finish.

Exit codes: 0 success, 1 configuration error (or no oracle), 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bench import METHODS, BenchConfig, make_instance, rse, run_point
from .config import ConfigError, load_bench_config, load_model_config
from .oracle import NoOracleError, gaussian_posterior_exact, gmm_posterior_exact, relaxed_posterior_exact
from .sampler import dig_run, initialize, posterior_estimate
from .schedule import ScheduleRangeError


class NumericalError(RuntimeError):
    pass


def _fmt(x) -> str:
    return repr(float(x))


def write_manifest(out: Path, config, seed, argv) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    digest = None
    if config is not None:
        digest = hashlib.sha256(Path(config).read_bytes()).hexdigest()
    man = {
        "config": None if config is None else str(config),
        "config_sha256": digest,
        "seed": seed,
        "out": str(out),
        "command": list(argv),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2) + "\n")
    return man


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# sample


def run_chains(cfg, n_chains: int, seed: int, threads: int = 1) -> list[np.ndarray]:
    """Final states of ``n_chains`` DiG chains, batched deterministically."""
    B = cfg.sampler.batch
    sizes = [min(B, n_chains - i) for i in range(0, n_chains, B)]
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    dens = cfg.denoisers()
    dcfg = cfg.dig_config()

    def one(job):
        size, ss = job
        rng = np.random.default_rng(ss)
        init = initialize(cfg.model, cfg.y, cfg.hints, n_chains=size, rng=rng)
        return dig_run(cfg.model, cfg.y, dcfg, dens, init, cfg.schedule).s

    parts = _map(one, list(zip(sizes, children)), threads)
    return [np.concatenate([p[k] for p in parts]) for k in range(cfg.model.K)]


def cmd_sample(args) -> int:
    cfg = load_model_config(args.config)
    n = args.chains if args.chains is not None else cfg.sampler.chains
    if n < 1:
        raise ConfigError("chains", "must be >= 1")
    out = Path(args.out)
    write_manifest(out, args.config, args.seed, args.argv)
    samples = run_chains(cfg, n, args.seed, args.threads)
    if not all(np.all(np.isfinite(s)) for s in samples):
        raise NumericalError("non-finite samples")
    with open(out / "samples.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for c in range(n):
            for k, s in enumerate(samples):
                w.writerow([c, k] + [_fmt(v) for v in s[c]])
    means = posterior_estimate(cfg.model, cfg.y, samples)
    selected = posterior_estimate(cfg.model, cfg.y, samples, misfit_select=True)
    summary = {
        "chains": n,
        "components": [
            {"index": k, "mean": m.tolist(), "misfit_selected_mean": s.tolist()}
            for k, (m, s) in enumerate(zip(means, selected))
        ],
    }
    if cfg.truth is not None:
        for k, t in enumerate(cfg.truth):
            summary["components"][k]["rse"] = rse(means[k], t)
    _write_json(out / "summary.json", summary)
    return 0


# ---------------------------------------------------------------------------
# oracle


def _gaussian_summary(post, K):
    return [{"index": k, "mean": post.block(k)[0].tolist(), "cov": post.block(k)[1].tolist()} for k in range(K)]


def cmd_oracle(args) -> int:
    cfg = load_model_config(args.config)
    model = cfg.model
    out = Path(args.out)
    if args.relaxed:
        if not model.all_gaussian():
            raise NoOracleError("no oracle: relaxed oracle needs Gaussian priors on every component")
        etas = args.eta or [None]
        family = []
        for eta in etas:
            if eta is not None and not eta > 0:
                raise ConfigError("eta", "relaxation levels must be positive")
            post = relaxed_posterior_exact(model, cfg.y, eta).marginal(model.K)
            family.append({"eta": eta, "components": _gaussian_summary(post, model.K)})
        result = {"kind": "relaxed", "family": family}
    elif model.all_gaussian():
        result = {"kind": "gaussian", "components": _gaussian_summary(gaussian_posterior_exact(model, cfg.y), model.K)}
    else:
        post = gmm_posterior_exact(model, cfg.y)
        result = {
            "kind": "gmm",
            "weights": post.weights.tolist(),
            "means": post.means.tolist(),
            "covs": post.covs.tolist(),
            "components": [{"index": 0, "mean": post.mean.tolist(), "cov": post.cov.tolist()}],
        }
    write_manifest(out, args.config, args.seed, args.argv)
    _write_json(out / "oracle.json", result)
    return 0


# ---------------------------------------------------------------------------
# bench / gen-data


def _bench_cfg(args) -> BenchConfig:
    import dataclasses

    cfg = load_bench_config(args.config) if args.config else BenchConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "instances", None) is not None:
        over["instances"] = args.instances
    return dataclasses.replace(cfg, **over)


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError("methods", f"unknown method(s) {bad}; valid: {', '.join(METHODS)}")
    cfg = _bench_cfg(args)
    out = Path(args.out)
    write_manifest(out, args.config, cfg.seed, args.argv)
    results = _map(lambda p: run_point(cfg, p[0], p[1], methods), list(cfg.grid), args.threads)
    with open(out / "rse.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sir", "snr", "method", "rse"])
        for (sir, snr), res in zip(cfg.grid, results):
            for m in methods:
                if not np.isfinite(res[m]):
                    raise NumericalError(f"non-finite RSE at ({sir}, {snr})")
                w.writerow([sir, snr, m, _fmt(res[m])])
    return 0


def cmd_gen_data(args) -> int:
    cfg = _bench_cfg(args)
    out = Path(args.out)
    write_manifest(out, args.config, cfg.seed, args.argv)
    seeds = np.random.SeedSequence([cfg.seed, 0]).spawn(cfg.instances)
    with open(out / "instances.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for i, ss in enumerate(seeds):
            inst = make_instance(cfg, args.sir, args.snr, ss)
            for name in ("y", "s1", "s2", "v"):
                w.writerow([i, name] + [_fmt(v) for v in inst[name]])
    _write_json(out / "levels.json", {"sir": args.sir, "snr": args.snr, "sigma_v": inst["sigma_v"]})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root random seed (default 0)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads")

    p = argparse.ArgumentParser(prog="digsep", description="Diffusion-within-Gibbs component separation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", parents=[common], help="run DiG chains on a model config")
    s.add_argument("config")
    s.add_argument("--chains", type=int, default=None)
    s.set_defaults(fn=cmd_sample)

    o = sub.add_parser("oracle", parents=[common], help="exact posterior for Gaussian / single-GMM configs")
    o.add_argument("config")
    o.add_argument("--relaxed", action="store_true", help="relaxed-model posterior")
    o.add_argument("--eta", type=float, nargs="+", help="relaxation levels (default: config relax_eta)")
    o.set_defaults(fn=cmd_oracle)

    b = sub.add_parser("bench", parents=[common], help="heartbeat / motion RSE grid")
    b.add_argument("config", nargs="?")
    b.add_argument("--methods", default="dig")
    b.add_argument("--instances", type=int, default=None)
    b.set_defaults(fn=cmd_bench)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic bench instances")
    g.add_argument("config", nargs="?")
    g.add_argument("--sir", type=float, default=-20.1)
    g.add_argument("--snr", type=float, default=13.2)
    g.add_argument("--instances", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = ["digsep"] + argv
    if args.command in ("sample", "oracle") and args.seed is None:
        args.seed = 0
    if args.threads < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ConfigError, NoOracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError, ScheduleRangeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
