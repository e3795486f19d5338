"""
Three-branch N-CNN-style classifier with a two-neuron softmax head.

The layer dimensions below are a configurable stand-in for the original
network, not a restatement of it: the input feeds (a) a bare max-pool branch,
(b) a 5x5 conv + pool branch and (c) a 3x3 conv + pool branch; the branches are
concatenated on channels and followed by a 3x3 conv + pool ("last_conv", the
Grad-CAM hook), a small dense layer with dropout, and the 2-way head.

Checkpoints use a small versioned binary layout::

    magic      8 bytes   b"NCNNCKPT"
    version    u32       1
    config     u32 length + canonical JSON (sorted keys)
    header     u32 length + JSON {"epoch", "test_loss", "metadata"}
    records    u32 count, then per record:
                 u16 name length + UTF-8 name
                 u8 ndim + u32 dims
                 float32 little-endian values

All integers are little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, FormatError
from .labels import NO_PAIN, PAIN

MAGIC = b"NCNNCKPT"
FORMAT_VERSION = 1
TABLE1_IMAGE_SIZES = (64, 120, 224)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 120
    input_channels: int = 1
    branch5_filters: int = 64
    branch5_kernel: int = 5
    branch3_filters: int = 32
    branch3_kernel: int = 3
    branch_pool: int = 4
    merge_filters: int = 64
    merge_kernel: int = 3
    merge_pool: int = 2
    dense_width: int = 8
    dropout_rate: float = 0.5

    @classmethod
    def reference(cls, input_size=120, input_channels=1):
        return cls(input_size=input_size, input_channels=input_channels)

    @classmethod
    def compact(cls, input_size=32, input_channels=1):
        """A narrow variant for CPU-scale experiments and tests."""
        return cls(
            input_size=input_size,
            input_channels=input_channels,
            branch5_filters=8,
            branch3_filters=4,
            branch_pool=2,
            merge_filters=8,
        )

    def replace(self, **changes) -> "ModelConfig":
        values = asdict(self)
        values.update(changes)
        return ModelConfig(**values)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**values)

    def geometry(self) -> dict:
        """Spatial extents through the network; raises on an impossible chain."""
        s = self.input_size
        if s < 1 or self.input_channels not in (1, 3):
            raise ConfigurationError(f"input must be positive with 1 or 3 channels, got {s}/{self.input_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        for name in ("branch5_kernel", "branch3_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigurationError(f"{name} must be odd to keep branch extents aligned")
        if self.branch_pool > s:
            raise ConfigurationError(f"branch_pool {self.branch_pool} exceeds input size {s}")
        branch = (s - self.branch_pool) // self.branch_pool + 1
        if self.merge_kernel > branch:
            raise ConfigurationError(
                f"merge_kernel {self.merge_kernel} exceeds branch output extent {branch} "
                f"(input {s}, branch_pool {self.branch_pool})"
            )
        last_conv = branch - self.merge_kernel + 1
        if self.merge_pool > last_conv:
            raise ConfigurationError(f"merge_pool {self.merge_pool} exceeds last conv extent {last_conv}")
        pooled = (last_conv - self.merge_pool) // self.merge_pool + 1
        return {
            "branch": branch,
            "last_conv": last_conv,
            "pooled": pooled,
            "flat": self.merge_filters * pooled * pooled,
        }


def parameter_shapes(config: ModelConfig) -> dict:
    geo = config.geometry()
    c = config.input_channels
    merged = c + config.branch5_filters + config.branch3_filters
    k5, k3, km = config.branch5_kernel, config.branch3_kernel, config.merge_kernel
    return {
        "branch5.weight": (config.branch5_filters, c, k5, k5),
        "branch5.bias": (config.branch5_filters,),
        "branch3.weight": (config.branch3_filters, c, k3, k3),
        "branch3.bias": (config.branch3_filters,),
        "last_conv.weight": (config.merge_filters, merged, km, km),
        "last_conv.bias": (config.merge_filters,),
        "fc.weight": (config.dense_width, geo["flat"]),
        "fc.bias": (config.dense_width,),
        "head.weight": (2, config.dense_width),
        "head.bias": (2,),
    }


class Model:
    """Parameters plus the forward pass. Build with :func:`build_model`."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        self.checkpoint: Optional[Checkpoint] = None

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state(self, state: dict):
        for name, p in self.params.items():
            p.values = np.array(state[name], dtype=np.float64)

    def _check_input(self, x: T.Tensor):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if x.shape[-3:] != expected or x.values.ndim not in (3, 4):
            raise DimensionError(f"model expects images of shape {expected}, got {x.shape}")

    def forward(self, x, training=False, rng=None, return_features=False):
        """Logits for an image ``(C,S,S)`` or batch ``(N,C,S,S)``.

        With ``return_features`` the post-ReLU activation of the last conv
        layer is returned too, as ``(logits, last_conv)``.
        """
        x = T.as_tensor(x)
        self._check_input(x)
        cfg, p = self.config, self.params
        pool = cfg.branch_pool
        a = T.maxpool2d(x, pool)
        b = T.maxpool2d(T.relu(T.conv2d(x, p["branch5.weight"], p["branch5.bias"], padding=cfg.branch5_kernel // 2)), pool)
        c = T.maxpool2d(T.relu(T.conv2d(x, p["branch3.weight"], p["branch3.bias"], padding=cfg.branch3_kernel // 2)), pool)
        merged = T.concat([a, b, c], axis=-3)
        features = T.relu(T.conv2d(merged, p["last_conv.weight"], p["last_conv.bias"]))
        h = T.flatten(T.maxpool2d(features, cfg.merge_pool))
        h = T.relu(T.dense(h, p["fc.weight"], p["fc.bias"]))
        if training:
            h = T.dropout(h, cfg.dropout_rate, rng)
        logits = T.dense(h, p["head.weight"], p["head.bias"])
        if return_features:
            return logits, features
        return logits

    def predict_batch(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """``(N, 2)`` class probabilities in evaluation mode."""
        images = np.asarray(images, dtype=np.float64)
        out = [T.softmax(self.forward(images[i:i + batch_size])).values for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict(self, image) -> np.ndarray:
        x = T.as_tensor(image)
        if x.values.ndim != 3:
            raise DimensionError(f"predict expects a single (C,S,S) image, got {x.shape}")
        return T.softmax(self.forward(x)).values


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def build_model(config: ModelConfig, seed: int) -> Model:
    """He-uniform weights and zero biases, drawn in a fixed parameter order."""
    shapes = parameter_shapes(config)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        values = np.zeros(shape) if name.endswith(".bias") else _he_uniform(rng, shape)
        params[name] = T.Tensor(values, requires_grad=True, name=name)
    return Model(config, params)


def predict(model: Model, image) -> np.ndarray:
    return model.predict(image)


def classify(dist, threshold: float = 0.5) -> str:
    """``PAIN`` iff p(pain) >= threshold (the boundary counts as pain)."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold {threshold} outside [0, 1]")
    return PAIN if dist[1] >= threshold else NO_PAIN


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict
    epoch: int = 0
    test_loss: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, epoch=0, test_loss=float("nan"), metadata=None):
        return cls(model.config, model.state(), epoch, test_loss, dict(metadata or {}))

    def build(self) -> Model:
        model = build_model(self.config, seed=0)
        model.load_state(self.state)
        model.checkpoint = self
        return model


def save_checkpoint(obj, path, metadata=None, epoch=None, test_loss=None) -> None:
    """Write a :class:`Model` or :class:`Checkpoint` to ``path``."""
    if isinstance(obj, Checkpoint):
        ckpt = obj
    elif obj.checkpoint is not None:
        prior = obj.checkpoint
        ckpt = Checkpoint.from_model(obj, prior.epoch, prior.test_loss, prior.metadata)
    else:
        ckpt = Checkpoint.from_model(obj)
    meta = dict(ckpt.metadata)
    if metadata:
        meta.update(metadata)
    header = {
        "epoch": int(ckpt.epoch if epoch is None else epoch),
        "test_loss": float(ckpt.test_loss if test_loss is None else test_loss),
        "metadata": meta,
    }
    shapes = parameter_shapes(ckpt.config)
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for text in (ckpt.config.to_json(), json.dumps(header, sort_keys=True, separators=(",", ":"))):
        raw = text.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
    chunks.append(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        values = np.asarray(ckpt.state[name])
        if values.shape != shape:
            raise FormatError(f"parameter {name} has shape {values.shape}, config implies {shape}", field=name)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(values.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated while reading {what}", field=what)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic bytes; not a checkpoint file", field="magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", field="version")
    texts = []
    for what in ("config", "header"):
        (n,) = r.unpack("<I", what)
        try:
            texts.append(json.loads(r.take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{what} is not valid JSON: {exc}", field=what) from None
    try:
        config = ModelConfig.from_dict(texts[0])
        shapes = parameter_shapes(config)
    except (ConfigurationError, TypeError) as exc:
        raise FormatError(f"invalid model config: {exc}", field="config") from None
    header = texts[1]
    (count,) = r.unpack("<I", "record count")
    if count != len(shapes):
        raise FormatError(f"{count} parameter records, config implies {len(shapes)}", field="record count")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "record name")
        name = r.take(n, "record name").decode("utf-8", errors="replace")
        if name not in shapes:
            raise FormatError(f"unexpected parameter record {name!r}", field=name)
        (ndim,) = r.unpack("<B", name)
        shape = r.unpack(f"<{ndim}I", name)
        if tuple(shape) != shapes[name]:
            raise FormatError(f"parameter {name} recorded as {tuple(shape)}, config implies {shapes[name]}", field=name)
        size = int(np.prod(shape))
        state[name] = np.frombuffer(r.take(4 * size, name), dtype="<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after last record", field="trailer")
    try:
        return Checkpoint(config, state, int(header["epoch"]), float(header["test_loss"]), dict(header["metadata"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header: {exc}", field="header") from None


def load_checkpoint(path) -> Model:
    return read_checkpoint(path).build()
