"""Dynamic-temperature knowledge distillation at desk scale."""

from dtkd.distill import (
    DistillConfig,
    LossBreakdown,
    TemperaturePair,
    combined_loss,
    dtkd_loss,
    dynamic_temperatures,
    kd_loss_asymmetric,
    kd_loss_fixed,
    sharpness,
    student_logit_gradient,
)
from dtkd.numkit import DomainError

__version__ = "0.1.0"

__all__ = [
    "DistillConfig",
    "DomainError",
    "LossBreakdown",
    "TemperaturePair",
    "combined_loss",
    "dtkd_loss",
    "dynamic_temperatures",
    "kd_loss_asymmetric",
    "kd_loss_fixed",
    "sharpness",
    "student_logit_gradient",
]
