"""
ncnn
====

A lightweight three-branch convolutional network for binary pain / no-pain
classification of face images, written on top of a small numpy autodiff
engine. Besides the model the package covers the surrounding protocol:
label construction (hard, label-smoothed and score-derived soft targets),
augmentation and subject-disjoint folds, training with the usual optimizers
and schedulers, calibration metrics and two attribution methods.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, ContractError, DimensionError, DomainError, FormatError,
                     IngestionError, NcnnError, TrainingError)
from .labels import CLASSES, NO_PAIN, PAIN, lsr_smooth, nfcs_sigmoid, nfcs_soft_label, target_distribution
from .model import ModelConfig, Model, build_model, classify, load_checkpoint, predict, save_checkpoint
from .data import AugmentationConfig, Sample, augment, generate_synthetic, load_manifest, make_folds
from .training import PRESETS, TrainConfig, sweep, train, train_fold
from .metrics import PredictionRecord, calibration_curve, classification_metrics, ece, paired_t_test
from .attribution import grad_cam, integrated_gradients
