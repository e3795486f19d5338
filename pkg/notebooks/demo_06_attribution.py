"""
Grad-CAM and Integrated Gradients
=================================

Explains a quickly trained compact model on a synthetic pain face and checks
that the Integrated Gradients attributions add up to the change in the
target logit.
"""

import tempfile
from pathlib import Path

import numpy as np

from ncnn.attribution import export_attribution, grad_cam, integrated_gradients, target_logit
from ncnn.data import AugmentationConfig, generate_synthetic
from ncnn.labels import PAIN
from ncnn.model import ModelConfig
from ncnn.training import PRESETS, train_fold

samples = generate_synthetic(12, 4, seed=1, size=24)
train, test = samples[8:], samples[:8]
result = train_fold(train, test, ModelConfig.compact(24), PRESETS["original"].replace(epochs=25, learning_rate=1e-3),
                    AugmentationConfig(count=1))
model = result.checkpoint.build()

sample = next(s for s in test if s.hard_label == PAIN)
cam = grad_cam(model, sample.image, PAIN)
inside, outside = cam.values[sample.marker_mask].mean(), cam.values[~sample.marker_mask].mean()
print(f"p(pain) = {cam.confidence:.3f}; Grad-CAM mean inside markers {inside:.3f} vs outside {outside:.3f}")

ig = integrated_gradients(model, sample.image, PAIN, steps=256)
delta = target_logit(model, sample.image, PAIN) - target_logit(model, np.zeros_like(sample.image), PAIN)
print(f"sum of attributions {ig.raw.sum():.5f} vs logit change {delta:.5f}")

out = Path(tempfile.mkdtemp())
for amap in (cam, ig):
    paths = export_attribution(amap, sample.image, out / amap.method)
    print(amap.method, "->", sorted(p.name for p in paths.values()))
