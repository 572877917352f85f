"""Moment error of the warm-started reverse SDE versus step count and grid rule."""

import argparse

import numpy as np

from digsep.denoise import GaussianDenoiser
from digsep.diffusion import SdeSolverConfig, denoising_posterior_sample
from digsep.model import GaussianPrior
from digsep.schedule import NoiseSchedule


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, nargs="+", default=[50, 100, 200, 400])
    p.add_argument("--eta", type=float, default=1.0)
    args = p.parse_args()

    den = GaussianDenoiser(GaussianPrior([1.0, -0.5], [[1.0, 0.3], [0.3, 0.5]]))
    sched = NoiseSchedule.exponential()
    z = np.array([2.0, 2.0])
    m_ref, c_ref = den.conditional_moments(z, args.eta)
    print(f"{'grid':>12} {'M':>5} {'mean err':>10} {'var err':>9}")
    for rho in (None, 3.0, 7.0):
        for M in args.steps:
            me, ve = 0.0, 0.0
            for seed in range(args.seeds):
                cfg = SdeSolverConfig(M, rho=rho)
                x = denoising_posterior_sample(den, sched, cfg, np.tile(z, (args.draws, 1)), args.eta, np.random.default_rng(seed), "sde")
                me = max(me, np.abs(x.mean(0) - m_ref).max())
                ve = max(ve, np.abs(x.var(0) / np.diag(c_ref) - 1).max())
            name = "geometric" if rho is None else f"rho={rho:g}"
            print(f"{name:>12} {M:5d} {me:10.4f} {ve:9.2%}")


if __name__ == "__main__":
    main()
