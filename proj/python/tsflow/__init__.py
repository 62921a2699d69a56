"""Conditional flow-matching transformer for satellite image time series."""

from ._tsflow import (
    Model,
    SolverConfig,
    change_scores,
    integrate,
    interpolate,
    layer_checks,
    load_checkpoint,
    mae,
    miou,
    psnr,
    read_sample,
    rmse,
    sam,
    ssim,
    synthesize,
    train,
    velocity_target,
)

__all__ = [
    "Model",
    "SolverConfig",
    "change_scores",
    "integrate",
    "interpolate",
    "layer_checks",
    "load_checkpoint",
    "mae",
    "miou",
    "psnr",
    "read_sample",
    "rmse",
    "sam",
    "ssim",
    "synthesize",
    "train",
    "velocity_target",
]
