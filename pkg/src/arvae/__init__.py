"""Autoregressive video autoencoder: decoupled motion and residual codecs with a carried decoder state."""

from .model import ARVAE, ArvaeConfig, EncodedVideo, compression_ratio, desk_config, paper_variant
from .motion import MotionEstimator, estimate_motion, warp
from .video_io import Clip, gen_synthetic, load_clip, synthetic_dataset

__version__ = "0.1.0"

__all__ = [
    "ARVAE",
    "ArvaeConfig",
    "Clip",
    "EncodedVideo",
    "MotionEstimator",
    "compression_ratio",
    "desk_config",
    "estimate_motion",
    "gen_synthetic",
    "load_clip",
    "paper_variant",
    "synthetic_dataset",
    "warp",
]
