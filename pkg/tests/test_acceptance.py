"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The bench criterion
takes a few minutes.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import central_difference, condition_joint, gmm1d_noised_logpdf
from digsep.bench import DEFAULT_GRID, BenchConfig, run_point
from digsep.denoise import GaussianDenoiser, GaussianMixtureDenoiser, tweedie_score
from digsep.diffusion import SdeSolverConfig, denoising_posterior_sample
from digsep.model import ComponentSpec, GaussianMixturePrior, GaussianPrior, MixtureModel, SensingOp
from digsep.oracle import (
    discrepancy,
    energy_distance,
    energy_permutation_test,
    gaussian_posterior_exact,
    relaxed_posterior_exact,
)
from digsep.sampler import ChainState, DiGConfig, dig_run, proximal_split_run, sweep, u_conditional
from digsep.sampler import _GaussianFactors, _denoisers, _schedules
from digsep.schedule import NoiseSchedule


@pytest.fixture
def report(capsys):
    def _report(n, name, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {name} | {detail}")
        assert ok, detail

    return _report


def _random_spd(rng, d, rank=None, jitter=0.2):
    A = rng.standard_normal((d, rank or d))
    return A @ A.T + jitter * np.eye(d)


# ---------------------------------------------------------------------------


def test_criterion_1_gaussian_u_update_exact(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(1, 7))
        d0, d1 = m, int(rng.integers(1, 7))
        H = rng.standard_normal((m, d1))
        eta, sig = rng.uniform(0.05, 2.0), rng.uniform(0.05, 2.0)
        model = MixtureModel(
            [
                ComponentSpec(d0, SensingOp.identity(d0), GaussianPrior(np.zeros(d0), np.eye(d0))),
                ComponentSpec(d1, SensingOp.dense(H), GaussianPrior(np.zeros(d1), np.eye(d1)), eta),
            ],
            sig,
        )
        y = rng.standard_normal(m)
        s0, s1 = rng.standard_normal(d0), rng.standard_normal(d1)
        state = ChainState([s0[None], s1[None]], {1: rng.standard_normal((1, d1))}, 0, None)
        mu, cov = u_conditional(model, y, state, 1, sig, eta)
        # dense joint of (u, y') given s1, with y' = y - s0 = H u + v
        C = np.zeros((d1 + m, d1 + m))
        C[:d1, :d1] = eta**2 * np.eye(d1)
        C[:d1, d1:] = eta**2 * H.T
        C[d1:, :d1] = eta**2 * H
        C[d1:, d1:] = eta**2 * H @ H.T + sig**2 * np.eye(m)
        ref_m, ref_c = condition_joint(np.concatenate([s1, H @ s1]), C, np.arange(d1), np.arange(d1, d1 + m), y - s0)
        worst = max(worst, np.abs(mu[0] - ref_m).max(), np.abs(cov - ref_c).max())
    dt = time.perf_counter() - t0
    report(1, "u-update moments vs dense conditioning", worst <= 1e-10 and dt < 5, f"max abs diff {worst:.2e}, {dt:.2f}s")


def test_criterion_2_tweedie_fidelity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    w, mu, var = np.array([0.2, 0.5, 0.3]), np.array([-2.0, 0.5, 3.0]), np.array([0.3, 1.0, 0.6])
    den = GaussianMixtureDenoiser(GaussianMixturePrior(w, mu[:, None], var[:, None, None]))
    worst = 0.0
    for _ in range(200):
        z, eta = rng.uniform(-5, 6), rng.uniform(0.05, 3.0)
        a = tweedie_score(den, np.array([z]), eta)[0]
        b = central_difference(lambda x: gmm1d_noised_logpdf(x, w, mu, var, eta), z, h=1e-5)
        # the floor only matters within ~1e-4 of a root of the score
        worst = max(worst, abs(a - b) / max(abs(b), 1e-4))
    dt = time.perf_counter() - t0
    report(2, "Tweedie score vs finite differences", worst <= 1e-4 and dt < 5, f"max rel err {worst:.2e}, {dt:.2f}s")


def test_criterion_3_sde_convergence(report):
    t0 = time.perf_counter()
    prior = GaussianPrior([1.0, -0.5], [[1.0, 0.3], [0.3, 0.5]])
    den = GaussianDenoiser(prior)
    sched = NoiseSchedule.exponential()
    z, eta, n = np.array([2.0, 2.0]), 1.0, 100_000
    m_ref, c_ref = den.conditional_moments(z, eta)
    v_ref = np.diag(c_ref)
    errs = {}
    for M in (100, 400):
        for seed in range(5):
            x = denoising_posterior_sample(den, sched, SdeSolverConfig(M), np.tile(z, (n, 1)), eta, np.random.default_rng(seed), "sde")
            errs[M, seed] = (np.abs(x.mean(0) - m_ref).max(), np.abs(x.var(0) / v_ref - 1).max())
    mean400 = max(errs[400, s][0] for s in range(5))
    var400 = max(errs[400, s][1] for s in range(5))
    halving = all(errs[400, s][0] <= errs[100, s][0] and errs[400, s][1] <= errs[100, s][1] for s in range(5))
    dt = time.perf_counter() - t0
    ok = mean400 <= 0.02 and var400 <= 0.05 and halving and dt < 120
    detail = (
        f"M=400 mean err {mean400:.4f}, var err {var400:.3%}; "
        f"M=100 mean err {max(errs[100, s][0] for s in range(5)):.4f}; halving {halving}; {dt:.1f}s"
    )
    report(3, "reverse-SDE conditional vs exact", ok, detail)


def test_criterion_4_dig_consistency(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    d = 8
    comps = [
        ComponentSpec(d, SensingOp.identity(d), GaussianPrior(rng.uniform(-3, 3, d), _random_spd(rng, d, rank=2)))
        for _ in range(3)
    ]
    model = MixtureModel(comps, 1.0)
    y = model.forward([c.prior.mean for c in comps]) + rng.standard_normal(d)
    post = gaussian_posterior_exact(model, y)
    cfg = DiGConfig.cosine(model, 50, seed=4, conditional="sde")
    assert cfg.sigma_at(model, 50) == model.sigma_v
    x = np.hstack(dig_run(model, y, cfg, n_chains=2000).s)
    rep = discrepancy(x, post)
    stat, band, p = energy_permutation_test(x, post.sample(2000, 1004), n_perm=200, rng=0)
    dt = time.perf_counter() - t0
    ok = rep.mean_err <= 0.03 and rep.cov_err <= 0.10 and stat <= band and dt < 300
    detail = f"mean err {rep.mean_err:.4f}, cov err {rep.cov_err:.4f}, energy {stat:.5f} (band {band:.5f}, p={p:.3f}); {dt:.1f}s"
    report(4, "3-component DiG vs Gaussian oracle", ok, detail)


def test_criterion_5_relaxed_model(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    d = 4
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    H = Q * np.linspace(1.0, 2.0, d)
    mean0 = rng.uniform(1, 3, d) * rng.choice([-1, 1], d)
    mean1 = rng.uniform(1, 3, d) * rng.choice([-1, 1], d)
    model = MixtureModel(
        [
            ComponentSpec(d, SensingOp.identity(d), GaussianPrior(mean0, 0.2 * np.eye(d))),
            ComponentSpec(d, SensingOp.dense(H), GaussianPrior(mean1, np.eye(d)), 0.1),
        ],
        0.1,
    )
    y = model.forward([mean0, mean1]) + 0.5 * rng.standard_normal(d)
    ref = relaxed_posterior_exact(model, y).marginal(model.K)
    x = np.hstack(dig_run(model, y, DiGConfig.cosine(model, 400, seed=0), n_chains=2000).s)
    rep = discrepancy(x, ref)
    stat, band, p = energy_permutation_test(x, ref.sample(2000, 1000), n_perm=200, rng=0)
    exact = gaussian_posterior_exact(model, y).mean
    gaps = [np.linalg.norm(relaxed_posterior_exact(model, y, e).marginal(model.K).mean - exact) for e in (0.5, 0.1, 0.02)]
    mono = gaps[0] > gaps[1] > gaps[2]
    dt = time.perf_counter() - t0
    ok = rep.mean_err <= 0.03 and rep.cov_err <= 0.10 and stat <= band and mono and dt < 300
    detail = (
        f"mean err {rep.mean_err:.4f}, cov err {rep.cov_err:.4f}, energy {stat:.5f} (band {band:.5f}); "
        f"oracle gap over eta 0.5/0.1/0.02: {gaps[0]:.2e}/{gaps[1]:.2e}/{gaps[2]:.2e}; {dt:.1f}s"
    )
    report(5, "relaxed-model DiG vs relaxed oracle", ok, detail)


def test_criterion_6_dig_vs_proximal_split(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    d = 4
    comps = [
        ComponentSpec(d, SensingOp.identity(d), GaussianPrior(rng.uniform(-2, 2, d), np.diag(rng.uniform(0.5, 2, d))))
        for _ in range(2)
    ]
    model = MixtureModel(comps, 0.5)
    y = model.forward([c.prior.mean for c in comps]) + rng.standard_normal(d)
    post = gaussian_posterior_exact(model, y)
    eta = model.sigma_v  # the splitting level, shared by every component in the baseline
    dig, prox = [], []
    for r in range(10):
        cfg = DiGConfig.cosine(model, 20, seed=r)
        ref = post.sample(500, 2000 + r)
        dig.append(energy_distance(np.hstack(dig_run(model, y, cfg, n_chains=500).s), ref))
        prox.append(energy_distance(proximal_split_run(model, y, cfg, eta, n_chains=500), ref))
    dt = time.perf_counter() - t0
    ok = np.median(dig) <= np.median(prox) and dt < 300
    report(6, "DiG vs proximal split at N=20", ok, f"median energy DiG {np.median(dig):.5f} vs split {np.median(prox):.5f}; {dt:.1f}s")


def test_criterion_7_stationarity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    d = 3
    H = rng.standard_normal((d, d)) + 2 * np.eye(d)
    model = MixtureModel(
        [
            ComponentSpec(d, SensingOp.identity(d), GaussianPrior(rng.uniform(-2, 2, d), _random_spd(rng, d))),
            ComponentSpec(d, SensingOp.dense(H), GaussianPrior(rng.uniform(-2, 2, d), _random_spd(rng, d)), 0.3),
        ],
        0.4,
    )
    y = rng.standard_normal(d)
    joint = relaxed_posterior_exact(model, y)  # blocks s_0, s_1, u_1
    n = 10_000
    x0 = joint.sample(n, 7)
    o = joint.offsets
    state = ChainState([x0[:, o[0] : o[1]], x0[:, o[1] : o[2]]], {1: x0[:, o[2] : o[3]]}, 0, None)
    sweep(
        model, y, state, model.sigma_v, {1: 0.3}, _denoisers(model, None), _schedules(model, NoiseSchedule()),
        SdeSolverConfig(), np.random.default_rng(8), _GaussianFactors(model),
    )
    x1 = np.hstack([state.s[0], state.s[1], state.u[1]])
    se = np.sqrt(np.diag(joint.cov) / n)
    zscore = (x1.mean(0) - joint.mean) / se
    rms_z = float(np.sqrt(np.mean(zscore**2)))
    cov_err = np.linalg.norm(np.cov(x1.T) - joint.cov) / np.linalg.norm(joint.cov)
    dt = time.perf_counter() - t0
    ok = rms_z <= 2.0 and cov_err <= 0.05 and dt < 120
    report(7, "one sweep preserves the posterior", ok, f"RMS mean z {rms_z:.2f} (max |z| {np.abs(zscore).max():.2f}), cov err {cov_err:.4f}; {dt:.1f}s")


def test_criterion_8_bench_structure(report):
    t0 = time.perf_counter()
    cfg = BenchConfig()  # 50 instances per grid point
    res = {p: run_point(cfg, *p)["dig"] for p in DEFAULT_GRID}
    below_one = all(v < 1 for v in res.values())
    rows = {}
    for sir, snr in DEFAULT_GRID:
        rows.setdefault(snr, []).append(res[sir, snr])  # SIR decreasing within a row
    mono = sum(all(a < b for a, b in zip(r, r[1:])) for r in rows.values())
    dt = time.perf_counter() - t0
    ok = below_one and mono == 3 and dt < 900
    table = "; ".join(f"SNR {snr}: " + "/".join(f"{v:.3f}" for v in r) for snr, r in rows.items())
    report(8, "heartbeat bench RSE structure", ok, f"{table}; monotone rows {mono}/3; {dt:.0f}s")


CLI_CONFIG = """
sigma_v = 0.3

[sampler]
sweeps = 20
batch = 8

[observation]
y = [0.5, -1.0, 2.0]

[[components]]
dim = 3
[components.prior]
kind = "gaussian"
mean = [1.0, 0.0, -1.0]
cov = 1.0

[[components]]
dim = 2
sensing = "dense"
matrix = [[1.0, 0.0], [0.5, 1.0], [0.0, 2.0]]
relax_eta = 0.2
[components.prior]
kind = "gmm"
weights = [0.4, 0.6]
means = [[-1.0, 1.0], [1.0, -1.0]]
covs = 0.5
"""


def test_criterion_9_determinism(report, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "run.toml"
    cfg.write_text(CLI_CONFIG)
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        cmd = [sys.executable, "-m", "digsep.cli", "sample", str(cfg), "--chains", "24", "--seed", "9", "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("samples.csv", "summary.json"))
    m0, m1 = (json.loads((o / "manifest.json").read_text()) for o in outs)
    for man, o in zip((m0, m1), outs):
        man.pop("timestamp")
        man["out"] = man["out"].replace(str(o), "OUT")
        man["command"] = [c.replace(str(o), "OUT") for c in man["command"]]
    same_manifest = m0 == m1
    dt = time.perf_counter() - t0
    ok = same and same_manifest and dt < 60
    report(9, "byte-identical reruns", ok, f"outputs identical {same}, manifests equal up to timestamp {same_manifest}; {dt:.1f}s")
