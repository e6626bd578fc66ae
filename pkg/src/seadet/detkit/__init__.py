"""Detector assembly: networks, the two-stage detector, and training."""

from .detector import Detector, decode_t
from .train import (
    CHECKPOINT_VERSION,
    COUNTERS,
    CheckpointVersionError,
    DivergenceError,
    MODES,
    TrainState,
    apply_mode,
    derive_seed,
    dg_train_step,
    load_checkpoint,
    make_state,
    reset_counters,
    run_training,
    save_checkpoint,
    total_detection_loss,
    train_step,
)

__all__ = [
    "Detector", "decode_t", "CHECKPOINT_VERSION", "COUNTERS",
    "CheckpointVersionError", "DivergenceError", "MODES", "TrainState",
    "apply_mode", "derive_seed", "dg_train_step", "load_checkpoint",
    "make_state",
    "reset_counters", "run_training", "save_checkpoint",
    "total_detection_loss", "train_step",
]
