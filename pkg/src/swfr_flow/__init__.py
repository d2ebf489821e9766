"""Spherical Wasserstein-Fisher-Rao geodesic flows and weighted sample generation."""

import os

# BLAS threads must be fixed before numpy loads; one thread keeps runs bit-reproducible
_threads = os.environ.get("SWFR_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from .distributions import GaussianMixture, StdNormal, eight_gaussians, bimodal_1d  # noqa: E402
from .flow import FlowConfig, forward_flow, inverse_flow, round_trip  # noqa: E402
from .loss import total_loss  # noqa: E402
from .potential import Potential, init_params  # noqa: E402
from .trainer import GeodesicTrainer, TrainConfig, generate_weighted_samples, online_update, train_geodesic  # noqa: E402

__all__ = [
    "FlowConfig",
    "GaussianMixture",
    "GeodesicTrainer",
    "Potential",
    "StdNormal",
    "TrainConfig",
    "eight_gaussians",
    "forward_flow",
    "generate_weighted_samples",
    "init_params",
    "inverse_flow",
    "online_update",
    "bimodal_1d",
    "round_trip",
    "total_loss",
    "train_geodesic",
]
__version__ = "0.1.0"
