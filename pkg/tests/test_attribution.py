import numpy as np
import pytest
from PIL import Image

from ncnn import tensor as T
from ncnn.attribution import (AttributionMap, bilinear_resize, export_attribution, grad_cam, integrated_gradients,
                              integrated_gradients_fn, read_attribution_csv, target_logit)
from ncnn.errors import DimensionError
from ncnn.labels import NO_PAIN, PAIN
from ncnn.model import ModelConfig, build_model

TINY = ModelConfig.compact(16).replace(branch5_filters=3, branch3_filters=2, merge_filters=3, dense_width=4)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(20, 1, 16, 16))


def test_ig_zero_path():
    model = build_model(TINY, 0)
    image = np.random.default_rng(1).uniform(size=(1, 16, 16))
    amap = integrated_gradients(model, image, PAIN, baseline=image.copy(), steps=16)
    assert np.all(amap.raw == 0.0)


@pytest.mark.parametrize("steps", [1, 3, 256])
def test_ig_exact_on_linear_model(steps):
    rng = np.random.default_rng(steps)
    w = rng.normal(size=(2, 5, 5))
    x = rng.normal(size=(2, 5, 5))

    def score(batch):
        return T.dense(T.reshape(batch, (batch.shape[0], -1)), w.reshape(1, -1), np.zeros(1))

    attr = integrated_gradients_fn(score, x, steps=steps)
    np.testing.assert_allclose(attr, w * x, rtol=1e-12, atol=1e-14)


def test_ig_shape_mismatch():
    model = build_model(TINY, 0)
    with pytest.raises(DimensionError):
        integrated_gradients(model, np.zeros((1, 16, 16)), PAIN, baseline=np.zeros((1, 8, 8)))


def test_ig_completeness_random_model(images):
    model = build_model(TINY, 2)
    for image in images[:5]:
        amap = integrated_gradients(model, image, PAIN)
        delta = target_logit(model, image, PAIN) - target_logit(model, np.zeros_like(image), PAIN)
        assert abs(amap.raw.sum() - delta) <= 0.01 * abs(delta) + 1e-9


def test_ig_error_shrinks_with_steps(images):
    model = build_model(TINY, 3)
    image = images[0]
    delta = target_logit(model, image, PAIN) - target_logit(model, np.zeros_like(image), PAIN)
    coarse = abs(integrated_gradients(model, image, PAIN, steps=2).raw.sum() - delta)
    fine = abs(integrated_gradients(model, image, PAIN, steps=256).raw.sum() - delta)
    assert fine <= coarse + 1e-12


def test_ig_does_not_touch_model_grads(images):
    model = build_model(TINY, 4)
    integrated_gradients(model, images[0], NO_PAIN, steps=4)
    grad_cam(model, images[0], NO_PAIN)
    assert all(p.grad is None or not np.any(p.grad) for p in model.parameters())


def test_grad_cam_shape_and_sign(images):
    for seed in range(100):
        model = build_model(TINY, seed)
        image = images[seed % len(images)]
        amap = grad_cam(model, image, PAIN if seed % 2 else NO_PAIN)
        assert amap.values.shape == image.shape[1:]
        assert np.all(amap.values >= 0) and amap.values.max() <= 1.0
        assert amap.flag in (None, "all_zero")
        if amap.flag:
            assert not np.any(amap.values)


def test_grad_cam_single_channel_is_scaled_feature_map(images):
    config = TINY.replace(merge_filters=1)
    image = images[1]
    for seed in range(6):
        model = build_model(config, seed)
        x = T.Tensor(image[None], requires_grad=True)
        with T.Tape() as tape:
            logits, features = model.forward(x, return_features=True)
            score = T.tensor_sum(T.take(logits, 1))
        tape.backward(score)
        weight = features.grad[0, 0].mean()
        acts = features.values[0, 0]
        amap = grad_cam(model, image, PAIN)
        if weight > 0 and acts.max() > 0:
            expected = np.maximum(bilinear_resize(acts, (16, 16)), 0)
            np.testing.assert_allclose(amap.values, expected / expected.max(), atol=1e-12)
        else:
            assert amap.flag == "all_zero"


def test_bilinear_resize_constant_and_identity():
    grid = np.arange(12.0).reshape(3, 4)
    np.testing.assert_allclose(bilinear_resize(grid, (3, 4)), grid)
    np.testing.assert_allclose(bilinear_resize(np.full((2, 2), 0.7), (9, 5)), 0.7)


def test_export_round_trip(tmp_path, images):
    model = build_model(TINY, 5)
    image = images[2]
    amap = integrated_gradients(model, image, PAIN, steps=8)
    paths = export_attribution(amap, image, tmp_path / "deep" / "ig")
    np.testing.assert_allclose(read_attribution_csv(paths["csv"]), amap.values, atol=1e-6, rtol=1e-6)
    with Image.open(paths["overlay"]) as overlay:
        assert overlay.size == (16, 16) and overlay.mode == "RGB"
    with Image.open(paths["mask"]) as mask:
        assert mask.size == (16, 16)


def test_export_all_zero_map_is_black(tmp_path):
    amap = AttributionMap(np.zeros((8, 8)), PAIN, "grad_cam", 0.5, flag="all_zero")
    paths = export_attribution(amap, np.full((1, 8, 8), 0.4), tmp_path / "z")
    with Image.open(paths["mask"]) as mask:
        assert not np.any(np.asarray(mask))


def test_export_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    amap = AttributionMap(np.zeros((4, 4)), PAIN, "grad_cam", 0.5)
    with pytest.raises(OSError):
        export_attribution(amap, np.zeros((1, 4, 4)), blocker / "sub" / "m")
