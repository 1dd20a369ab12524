"""Compressive adversarial privacy: release mechanisms plus MI audits."""

from . import (  # noqa: F401
    cli,
    dataset,
    errors,
    linear_game,
    logistic_game,
    neural_game,
    numopt,
    powerfeat,
    privmetrics,
)

__version__ = "0.1.0"
