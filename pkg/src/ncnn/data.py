"""
Samples, manifest ingestion, the synthetic face generator, augmentation and
subject-disjoint folds.

Manifests are JSON-lines files, one object per image::

    {"image_path": "img/S000_0.png", "subject_id": "S000", "source": "synthetic",
     "hard_label": "pain", "nfcs": 4}

``image_path`` is resolved relative to the manifest's directory; ``nfcs`` may
be ``null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError
from .labels import CLASSES, NO_PAIN, PAIN, nfcs_hard_label
from .rng import derive_seed, substream

# canonical marker sites as (row, col) fractions of the face box: brow bulge,
# eye squeeze (left, right), nasolabial furrow, open mouth
MARKER_SITES = ((0.24, 0.50), (0.40, 0.30), (0.40, 0.70), (0.60, 0.50), (0.78, 0.50))
FACE_TONE = (0.40, 0.50)
MARKER_LEVEL = 0.95
# marker counts drawn for each class; the count doubles as the NFCS score
PAIN_MARKERS = (3, 4, 5)
NO_PAIN_MARKERS = (0, 1, 2)


@dataclass
class Sample:
    image: np.ndarray  # (C, S, S) in [0, 1]
    subject_id: str
    source: str
    hard_label: str
    nfcs: Optional[int] = None
    key: str = ""
    marker_mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.hard_label not in CLASSES:
            raise ValueError(f"hard_label must be one of {CLASSES}, got {self.hard_label!r}")
        if self.nfcs is not None and nfcs_hard_label(self.nfcs) != self.hard_label:
            raise ValueError(f"NFCS {self.nfcs} implies {nfcs_hard_label(self.nfcs)}, label says {self.hard_label}")


# ---------------------------------------------------------------------------
# manifests


def _decode(path: Path, size: Optional[int], channels: int) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def load_manifest(path, input_size: Optional[int] = None, channels: int = 1) -> list:
    """Read a JSON-lines manifest into samples, resizing images to ``input_size``."""
    path = Path(path)
    root = path.parent
    samples = []
    with path.open() as fh:
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"malformed JSON ({exc.msg})", row) from None
            if not isinstance(rec, dict):
                raise IngestionError("record is not an object", row)
            missing = {"image_path", "subject_id", "source", "hard_label"} - set(rec)
            if missing:
                raise IngestionError(f"missing fields {sorted(missing)}", row)
            label, nfcs = rec["hard_label"], rec.get("nfcs")
            if label not in CLASSES:
                raise IngestionError(f"hard_label {label!r} not in {CLASSES}", row)
            if nfcs is not None:
                if isinstance(nfcs, bool) or not isinstance(nfcs, int) or not 0 <= nfcs <= 5:
                    raise IngestionError(f"nfcs {nfcs!r} is not an integer in 0-5", row)
                if nfcs_hard_label(nfcs) != label:
                    raise IngestionError(f"nfcs {nfcs} implies {nfcs_hard_label(nfcs)} but hard_label is {label}", row)
            image_path = root / rec["image_path"]
            if not image_path.is_file():
                raise IngestionError(f"image file {image_path} not found", row)
            try:
                image = _decode(image_path, input_size, channels)
            except OSError as exc:
                raise IngestionError(f"cannot decode {image_path}: {exc}", row) from None
            samples.append(Sample(image, str(rec["subject_id"]), str(rec["source"]), label, nfcs, key=str(rec["image_path"])))
    return samples


def write_manifest(samples, directory, image_dir="images") -> Path:
    """Write samples as 8-bit PNGs plus ``manifest.jsonl``; returns the manifest path."""
    directory = Path(directory)
    (directory / image_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"{image_dir}/{s.key or f'{s.subject_id}_{i}'}.png"
        pixels = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        img = Image.fromarray(pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0))
        img.save(directory / name, format="PNG")
        rec = {"image_path": name, "subject_id": s.subject_id, "source": s.source, "hard_label": s.hard_label, "nfcs": s.nfcs}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = directory / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


# ---------------------------------------------------------------------------
# synthetic faces


def _ellipse(shape, center, radii):
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    return ((rows - center[0]) / radii[0]) ** 2 + ((cols - center[1]) / radii[1]) ** 2 <= 1.0


def generate_synthetic(count_subjects: int, images_per_subject: int, seed: int, size: int = 120, channels: int = 1,
                       marker_radius: float = 0.06) -> list:
    """Faces whose class is carried by the number of bright marker blobs.

    Image ``j`` of subject ``i`` is a pain image when ``i + j`` is even, so every
    subject contributes both classes once it has two or more images. By default a
    pain image shows 3-5 markers and a no-pain image 0-2; the marker count is
    recorded as the sample's NFCS score. Subjects differ in face placement,
    skin tone and marker size; ``marker_radius`` is the nominal blob radius as a
    fraction of the image side.
    """
    if count_subjects < 1 or images_per_subject < 1:
        raise ConfigurationError("subject and image counts must be positive")
    samples = []
    for i in range(count_subjects):
        subject = f"S{i:03d}"
        srng = substream(seed, "subject", i)
        tone = srng.uniform(*FACE_TONE)
        offset = srng.uniform(-0.04, 0.04, size=2) * size
        marker_scale = srng.uniform(0.9, 1.1)
        for j in range(images_per_subject):
            rng = substream(seed, "image", i, j)
            pain = (i + j) % 2 == 0
            k = int(rng.choice(PAIN_MARKERS if pain else NO_PAIN_MARKERS))
            center = np.array([size / 2.0 - 0.5, size / 2.0 - 0.5]) + offset + rng.normal(0, 0.01 * size, 2)
            face_radii = (0.42 * size, 0.34 * size)
            img = np.full((size, size), 0.12)
            img[_ellipse(img.shape, center, face_radii)] = tone
            top_left = center - np.array(face_radii)
            mask = np.zeros((size, size), dtype=bool)
            radius = max(1.0, marker_radius * size * marker_scale)
            for site in np.sort(rng.choice(len(MARKER_SITES), size=k, replace=False)):
                pos = top_left + 2 * np.array(face_radii) * np.array(MARKER_SITES[site])
                blob = _ellipse(img.shape, pos, (radius, 1.3 * radius))
                img[blob] = MARKER_LEVEL
                mask |= _ellipse(img.shape, pos, (1.5 * radius, 1.5 * 1.3 * radius))
            img = np.clip(img + rng.normal(0, 0.02, img.shape), 0.0, 1.0)
            image = np.repeat(img[None], channels, axis=0)
            label = PAIN if pain else NO_PAIN
            samples.append(Sample(image, subject, "synthetic", label, k, key=f"{subject}_{j:02d}", marker_mask=mask))
    return samples


def resize_samples(samples, size: int) -> list:
    """Bilinearly resample every image (and marker mask) to ``size x size``."""
    out = []
    for s in samples:
        c, h, w = s.image.shape
        if h == size:
            out.append(s)
            continue
        factors = (1.0, size / h, size / w)
        image = np.clip(ndimage.zoom(s.image, factors, order=1, mode="nearest", grid_mode=True), 0.0, 1.0)
        mask = None
        if s.marker_mask is not None:
            mask = ndimage.zoom(s.marker_mask.astype(float), factors[1:], order=1, mode="nearest", grid_mode=True) >= 0.5
        out.append(replace(s, image=image, marker_mask=mask))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    count: int = 20
    shift: float = 0.20  # fraction of the image side, each axis
    rotation: float = 30.0  # degrees
    shear: float = 0.15  # horizontal shear factor
    brightness: tuple = (0.50, 1.10)
    zoom: tuple = (0.70, 1.50)
    horizontal_flip: bool = True

    @classmethod
    def identity(cls, count=20):
        return cls(count=count, shift=0.0, rotation=0.0, shear=0.0, brightness=(1.0, 1.0), zoom=(1.0, 1.0), horizontal_flip=False)


def affine_matrix(rotation_deg=0.0, shear=0.0, zoom=1.0, flip=False) -> np.ndarray:
    """Forward 2x2 map on (row, col) offsets from the image centre.

    Positive rotation turns content counter-clockwise as displayed (rows grow
    downward); ``zoom > 1`` enlarges content; shear moves columns by
    ``shear * row``.
    """
    t = math.radians(rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    sh = np.array([[1.0, 0.0], [shear, 1.0]])
    fl = np.diag([1.0, -1.0 if flip else 1.0])
    return rot @ sh @ (zoom * fl)


def warp(image: np.ndarray, forward: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    """Apply ``p_out = c + shift + forward @ (p_in - c)`` to every channel.

    Bilinear resampling, reflect padding at the borders.
    """
    c, h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(forward)
    offset = center - inv @ (center + np.asarray(shift, dtype=float))
    return np.stack([ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="reflect") for ch in image])


def augment(sample: Sample, config: AugmentationConfig, seed: int) -> list:
    """``config.count`` randomly transformed copies of ``sample``; labels are copied."""
    rng = np.random.default_rng(seed)
    c, h, w = sample.image.shape
    out = []
    for n in range(config.count):
        shift = rng.uniform(-config.shift, config.shift, size=2) * np.array([h, w])
        rotation = rng.uniform(-config.rotation, config.rotation)
        shear = rng.uniform(-config.shear, config.shear)
        zoom = rng.uniform(*config.zoom)
        flip = bool(config.horizontal_flip and rng.random() < 0.5)
        gain = rng.uniform(*config.brightness)
        forward = affine_matrix(rotation, shear, zoom, flip)
        image = np.clip(warp(sample.image, forward, shift) * gain, 0.0, 1.0)
        mask = None
        if sample.marker_mask is not None:
            mask = warp(sample.marker_mask[None].astype(float), forward, shift)[0] >= 0.5
        out.append(replace(sample, image=image, key=f"{sample.key}#aug{n:02d}", marker_mask=mask))
    return out


def augment_training_set(samples, config: AugmentationConfig, seed: int) -> list:
    """Originals followed by their augmentations, seeded per sample key."""
    out = list(samples)
    if config.count <= 0:
        return out
    for s in samples:
        out.extend(augment(s, config, derive_seed(seed, "augment", s.subject_id, s.key)))
    return out


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    fold_count: int
    seed: int
    test_subjects: tuple  # one tuple of subject ids per fold
    train_subjects: tuple

    def split(self, samples, fold: int):
        test = set(self.test_subjects[fold])
        train = [s for s in samples if s.subject_id not in test]
        held = [s for s in samples if s.subject_id in test]
        return train, held

    def to_dict(self) -> dict:
        return {
            "fold_count": self.fold_count,
            "seed": self.seed,
            "test_subjects": [list(t) for t in self.test_subjects],
            "train_subjects": [list(t) for t in self.train_subjects],
        }


def make_folds(samples, fold_count: int = 10, seed: int = 0) -> FoldPlan:
    """Shuffle subjects by ``seed`` and deal them into near-equal test groups.

    When the subject count is not divisible, the earlier folds take one extra
    subject each.
    """
    subjects = sorted({s.subject_id for s in samples})
    if fold_count < 2 or len(subjects) < fold_count:
        raise ConfigurationError(f"{len(subjects)} subjects cannot fill {fold_count} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = np.array_split(np.array(subjects)[order], fold_count)
    test = tuple(tuple(sorted(g.tolist())) for g in groups)
    train = tuple(tuple(s for s in subjects if s not in set(t)) for t in test)
    return FoldPlan(fold_count, seed, test, train)
