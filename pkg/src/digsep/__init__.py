"""Diffusion-within-Gibbs posterior sampling for linear component separation."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ComponentSpec,
    ExternalPrior,
    FourierSparsityPrior,
    GaussianMixturePrior,
    GaussianPrior,
    MixtureModel,
    ModelError,
    SensingOp,
    SmoothnessPrior,
)
from .schedule import AnnealSchedule, NoiseSchedule, ScheduleRangeError  # noqa: E402
from .diffusion import SdeSolverConfig, denoising_posterior_sample, reverse_sde_simulate  # noqa: E402
from .sampler import ChainState, DiGConfig, dig_run, initialize, proximal_split_run  # noqa: E402
from .oracle import NoOracleError, gaussian_posterior_exact, relaxed_posterior_exact  # noqa: E402
