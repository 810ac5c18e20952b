"""Recurrent multi-scale video restoration for atmospheric turbulence."""

__version__ = "0.1.0"

from .losses import LossConfig, charbonnier, detection_loss, flow_consistency_loss, total_loss, wavelet_loss
from .metrics import EvalReport, evaluate_pair, psnr, ssim, temporal_consistency, yt_slice
from .network import ModelConfig, RestorationNet, build_network, parameter_count
from .recurrent import RecurrentEngine, run_sequence
from .synth import TurbulenceParams, degrade_sequence, generate_tilt_series
from .training import TrainConfig, train, validate
from .video import (
    BoundingBox,
    FlowField,
    VideoSequence,
    compose_flows,
    crop_patch_pair,
    load_sequence,
    save_sequence,
    warp_frame,
)

__all__ = [
    "BoundingBox",
    "EvalReport",
    "FlowField",
    "LossConfig",
    "ModelConfig",
    "RecurrentEngine",
    "RestorationNet",
    "TrainConfig",
    "TurbulenceParams",
    "VideoSequence",
    "build_network",
    "charbonnier",
    "compose_flows",
    "crop_patch_pair",
    "degrade_sequence",
    "detection_loss",
    "evaluate_pair",
    "flow_consistency_loss",
    "generate_tilt_series",
    "load_sequence",
    "parameter_count",
    "psnr",
    "run_sequence",
    "save_sequence",
    "ssim",
    "temporal_consistency",
    "total_loss",
    "train",
    "validate",
    "warp_frame",
    "wavelet_loss",
    "yt_slice",
    "__version__",
]
