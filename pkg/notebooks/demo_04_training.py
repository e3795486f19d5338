"""
Training one fold
=================

A compact variant of the network trained on small synthetic images. The kept
checkpoint is the epoch with the lowest held-out loss.
"""

import numpy as np

from ncnn.data import AugmentationConfig, generate_synthetic, make_folds
from ncnn.metrics import classification_metrics
from ncnn.model import ModelConfig
from ncnn.training import PRESETS, scheduler_lr, train_fold

samples = generate_synthetic(20, 4, seed=0, size=24)
plan = make_folds(samples, fold_count=5, seed=0)
train, test = plan.split(samples, 0)

config = PRESETS["original"].replace(epochs=30, learning_rate=1e-3)
result = train_fold(train, test, ModelConfig.compact(24), config, AugmentationConfig(count=2))

for h in result.history[::5]:
    print(f"epoch {h['epoch']:3d}  train {h['train_loss']:.4f}  test {h['test_loss']:.4f}")
print("kept epoch", result.checkpoint.epoch, "with test loss", round(result.checkpoint.test_loss, 4))
print(classification_metrics(result.records))

# %%
# The tuned preset anneals the learning rate along a half cosine.

tuned = PRESETS["tuned"]
print([f"{scheduler_lr(tuned.scheduler, tuned.learning_rate, e, tuned.epochs):.2e}" for e in range(0, 121, 20)])
