"""Weakly-supervised CycleGAN toolkit for histopathology artifact removal."""

from .data import (
    CLASS_NAMES,
    AugmentConfig,
    Batch,
    Manifest,
    TileRecord,
    augment,
    eval_transform,
    load_manifest,
    make_batches,
    split_manifest,
)
from .losses import LossReport, LossWeights
from .synthetic import SyntheticSpec, synthesize_corpus
from .trainer import TrainConfig, lr_schedule, resume, run_training, train_step

__version__ = "0.1.0"
