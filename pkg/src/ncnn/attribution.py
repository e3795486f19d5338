"""
Grad-CAM and Integrated Gradients for the two-class model.

Both methods explain the pre-softmax logit of the requested class. Gradients
are taken through a frozen view of the model, so explaining never touches the
model's own ``.grad`` buffers and a model can be shared between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from . import tensor as T
from .errors import DimensionError
from .labels import class_index
from .model import Model


@dataclass
class AttributionMap:
    values: np.ndarray  # (H, W), aligned with the input image
    target_class: str
    method: str  # "grad_cam" or "integrated_gradients"
    confidence: float  # model p(target_class) on the explained image
    raw: Optional[np.ndarray] = None  # per-channel IG attributions (C, H, W)
    flag: Optional[str] = None  # "all_zero" when Grad-CAM found no positive evidence


def frozen(model: Model) -> Model:
    """A view of ``model`` whose parameters share storage but record no gradients."""
    params = {}
    for name, p in model.params.items():
        view = T.Tensor.__new__(T.Tensor)
        view.values, view.grad, view.requires_grad, view.name = p.values, None, False, name
        params[name] = view
    return Model(model.config, params)


def bilinear_resize(grid: np.ndarray, shape) -> np.ndarray:
    """Resize a 2-D grid with pixel-centre-aligned bilinear interpolation."""
    out = grid
    for axis, size in enumerate(shape):
        n = out.shape[axis]
        pos = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = pos - lo
        a, b = np.take(out, lo, axis=axis), np.take(out, hi, axis=axis)
        frac = frac.reshape([-1 if i == axis else 1 for i in range(out.ndim)])
        out = a * (1 - frac) + b * frac
    return out


def _confidence(model, image, idx):
    return float(model.predict(image)[idx])


def grad_cam(model: Model, image, target_class: str) -> AttributionMap:
    """Channel-weighted last-conv activations, ReLU'd, upsampled and max-normalized."""
    image = np.asarray(image, dtype=np.float64)
    idx = class_index(target_class)
    view = frozen(model)
    x = T.Tensor(image[None], requires_grad=True)
    with T.Tape() as tape:
        logits, features = view.forward(x, return_features=True)
        score = T.tensor_sum(T.take(logits, idx))
    tape.backward(score)
    acts = features.values[0]
    grads = features.grad[0] if features.grad is not None else np.zeros_like(acts)
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=(0, 0)), 0.0)
    cam = np.maximum(bilinear_resize(cam, image.shape[1:]), 0.0)
    peak = cam.max()
    flag = None
    if peak > 0:
        cam = cam / peak
    else:
        cam = np.zeros_like(cam)
        flag = "all_zero"
    return AttributionMap(cam, target_class, "grad_cam", _confidence(model, image, idx), flag=flag)


def integrated_gradients_fn(score: Callable, image, baseline=None, steps: int = 256, chunk: int = 32) -> np.ndarray:
    """Right Riemann sum of the path integral of ``d score / d x`` from baseline to image.

    ``score`` maps a batch tensor ``(N, ...)`` to a tensor of ``N`` scores.
    Returns per-element attributions with the image's shape.
    """
    image = np.asarray(image, dtype=np.float64)
    baseline = np.zeros_like(image) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if baseline.shape != image.shape:
        raise DimensionError(f"baseline shape {baseline.shape} != image shape {image.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    diff = image - baseline
    total = np.zeros_like(image)
    alphas = np.arange(1, steps + 1) / steps
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk].reshape((-1,) + (1,) * image.ndim)
        x = T.Tensor(baseline + a * diff, requires_grad=True)
        with T.Tape() as tape:
            s = T.tensor_sum(score(x))
        tape.backward(s)
        total += x.grad.sum(axis=0)
    return diff * total / steps


def integrated_gradients(model: Model, image, target_class: str, baseline=None, steps: int = 256) -> AttributionMap:
    """Pixel attributions for the target-class logit; zero (black) baseline by default."""
    image = np.asarray(image, dtype=np.float64)
    idx = class_index(target_class)
    view = frozen(model)
    raw = integrated_gradients_fn(lambda x: T.take(view.forward(x), idx), image, baseline, steps)
    return AttributionMap(raw.sum(axis=0), target_class, "integrated_gradients", _confidence(model, image, idx), raw=raw)


def target_logit(model: Model, image, target_class: str) -> float:
    return float(model.forward(np.asarray(image, dtype=np.float64)).values[class_index(target_class)])


# ---------------------------------------------------------------------------
# export


def _normalized(amap: AttributionMap) -> np.ndarray:
    mag = np.abs(amap.values)
    peak = mag.max()
    return mag / peak if peak > 0 else np.zeros_like(mag)


def export_attribution(amap: AttributionMap, image, path) -> dict:
    """Write ``<path>_mask.png``, ``<path>_overlay.png`` and ``<path>.csv``.

    The mask is the normalized magnitude in grayscale; the overlay blends a
    red-yellow rendering of it at 50% over the input.
    """
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(image, dtype=np.float64)
    if image.shape[1:] != amap.values.shape:
        raise DimensionError(f"map {amap.values.shape} does not match image {image.shape}")
    m = _normalized(amap)
    gray = image[0] if image.shape[0] == 1 else image.mean(axis=0)
    rgb = np.stack([gray] * 3, axis=-1) if image.shape[0] == 1 else image.transpose(1, 2, 0)
    heat = np.stack([np.minimum(1.0, 2 * m), np.clip(2 * m - 1, 0.0, 1.0), np.zeros_like(m)], axis=-1)
    overlay = 0.5 * rgb + 0.5 * heat

    def to8(a):
        return np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)

    paths = {
        "mask": base.with_name(base.name + "_mask.png"),
        "overlay": base.with_name(base.name + "_overlay.png"),
        "csv": base.with_name(base.name + ".csv"),
    }
    Image.fromarray(to8(m), mode="L").save(paths["mask"], format="PNG")
    Image.fromarray(to8(overlay), mode="RGB").save(paths["overlay"], format="PNG")
    np.savetxt(paths["csv"], amap.values, fmt="%.10g", delimiter=",")
    return paths


def read_attribution_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
