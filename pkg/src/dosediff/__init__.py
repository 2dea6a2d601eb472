"""Anchor-guided conditional diffusion for progressive volumetric denoising."""

from .anchors import (
    AnchorSet,
    CalibrationResult,
    ZoneBoundaries,
    anchor_for_timestep,
    calibrate,
    match_timestep,
)
from .denoiser import Checkpoint, ConditionalDenoiser, DenoiserConfig
from .errors import (
    CalibrationError,
    ConfigError,
    DoseDiffError,
    FormatError,
    SamplingError,
    TrainingDiverged,
)
from .metrics import MetricReport, Signature, metric_report, nmae, psnr, signature, ssim
from .phantom import MultiDoseSubject, PhantomSpec, generate_cohort, generate_subject
from .sampler import ProgressiveOutput, sample_patch, sample_volume
from .schedule import (
    NoiseSchedule,
    WeightSchedule,
    forward_sample,
    linear_schedule,
    predict_x0,
    reverse_step,
    weight,
)
from .trainer import TrainConfig, train
from .volio import BodyMask, PatchGrid, Volume, compute_body_mask, make_patch_grid

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "BodyMask",
    "CalibrationError",
    "CalibrationResult",
    "Checkpoint",
    "ConditionalDenoiser",
    "ConfigError",
    "DenoiserConfig",
    "DoseDiffError",
    "FormatError",
    "MetricReport",
    "MultiDoseSubject",
    "NoiseSchedule",
    "PatchGrid",
    "PhantomSpec",
    "ProgressiveOutput",
    "SamplingError",
    "Signature",
    "TrainConfig",
    "TrainingDiverged",
    "Volume",
    "WeightSchedule",
    "ZoneBoundaries",
    "anchor_for_timestep",
    "calibrate",
    "compute_body_mask",
    "forward_sample",
    "generate_cohort",
    "generate_subject",
    "linear_schedule",
    "make_patch_grid",
    "match_timestep",
    "metric_report",
    "nmae",
    "predict_x0",
    "psnr",
    "reverse_step",
    "sample_patch",
    "sample_volume",
    "signature",
    "ssim",
    "train",
    "weight",
]
