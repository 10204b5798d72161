"""Optimizers, adversarial training steps and the layer-selective fine-tuning schedule."""

from safer.trainer.log import EpochRecord, TrainLog
from safer.trainer.loop import (
    AXES,
    LoopConfig,
    SaferSchedule,
    SweepBase,
    TrainResult,
    ablation_sweep,
    evaluate,
    latest_checkpoint,
    rank_and_select,
    schedule_for,
    sweep_csv,
    train,
)
from safer.trainer.optim import SGD, OptimizerConfig, cosine_lr, sam_epsilon
from safer.trainer.steps import StepMetrics, at_step, clean_step, safer_step, sam_perturbation, sam_step

__all__ = [
    "AXES", "SGD", "EpochRecord", "LoopConfig", "OptimizerConfig", "SaferSchedule", "StepMetrics", "SweepBase",
    "TrainLog", "TrainResult", "ablation_sweep", "at_step", "clean_step", "cosine_lr", "evaluate",
    "latest_checkpoint", "rank_and_select", "safer_step", "sam_epsilon", "sam_perturbation", "sam_step",
    "schedule_for", "sweep_csv", "train",
]
