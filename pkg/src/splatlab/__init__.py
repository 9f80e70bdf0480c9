"""Desk-scale laboratory for trajectory-anchored multi-view editing of
Gaussian splats: exact diffusion samplers, the score-distillation
pseudo-ground-truth zoo, a differentiable orthographic splat renderer,
view-consistent attention control, and the alternating edit/reconstruct
loop that ties them together."""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule,
    ScheduleError,
    add_noise,
    build_schedule,
    ddcm_step,
    ddcm_x0_step,
    ddim_step,
    predict_x0,
)
from .scores import AnalyticGMMScore, Condition, ScoreModel
from .splats import Camera, CloudGradients, GaussianCloud, render, render_backward

__all__ = [
    "AnalyticGMMScore",
    "Camera",
    "CloudGradients",
    "Condition",
    "GaussianCloud",
    "NoiseSchedule",
    "ScheduleError",
    "ScoreModel",
    "add_noise",
    "build_schedule",
    "ddcm_step",
    "ddcm_x0_step",
    "ddim_step",
    "predict_x0",
    "render",
    "render_backward",
]
