"""Dataset ingestion, augmentation, rebalancing, splitting and synthetic data.

Layout on disk is ``<root>/<ClassName>/*.{png,jpg,jpeg}``; class indices
follow sorted directory-name order.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, DatasetError

log = logging.getLogger(__name__)

KAGGLE_CLASSES = ("MildDemented", "ModerateDemented", "NonDemented", "VeryMildDemented")
# per-class (train, val, test) counts of the published four-class split
KAGGLE_COUNTS = {
    "MildDemented": (574, 143, 179),
    "ModerateDemented": (41, 11, 13),
    "NonDemented": (2048, 512, 640),
    "VeryMildDemented": (1434, 358, 448),
}
SYNTH_CLASSES = ("c0_ring", "c1_cross", "c2_checker", "c3_gradient")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_path: str = "synthetic"

    def __post_init__(self):
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError(f"{self.source_path}: pixels outside [0, 1]")
        if self.label < 0:
            raise DatasetError(f"{self.source_path}: negative label")


class SampleList(list):
    """A list of samples that remembers its class names and skipped files."""

    def __init__(self, items=(), class_names: Sequence[str] = (), skipped: int = 0):
        super().__init__(items)
        self.class_names = list(class_names)
        self.skipped = skipped


@dataclass
class DatasetSplit:
    train: List[Sample]
    val: List[Sample]
    test: List[Sample]
    seed: int = 0
    class_names: List[str] = field(default_factory=list)

    def manifest(self) -> dict:
        return {"seed": self.seed, "class_names": self.class_names,
                **{name: [s.source_path for s in getattr(self, name)]
                   for name in ("train", "val", "test")}}

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2), encoding="utf-8")


def images_labels(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into an (N, 1, S, S) float32 batch and an int label vector."""
    x = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------- loading

def _decode(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L").resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_dataset(root, image_size: int) -> SampleList:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    samples, skipped = [], 0
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(p for p in cdir.iterdir() if p.is_file()):
            try:
                img = _decode(f, image_size)
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping unreadable file %s: %s", f, exc)
                skipped += 1
                continue
            samples.append(Sample(img, label, str(f)))
            count += 1
        if count == 0:
            raise DatasetError(f"class directory {cdir.name} contains no readable images")
    return SampleList(samples, [d.name for d in class_dirs], skipped)


def export_dataset(samples: Sequence[Sample], root, class_names: Sequence[str]) -> List[Path]:
    """Write samples as 8-bit PNGs in the class-directory layout."""
    root = Path(root)
    written, per_class = [], Counter()
    for name in class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        idx = per_class[s.label]
        per_class[s.label] += 1
        path = root / class_names[s.label] / f"{idx:05d}.png"
        pixels = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(path, format="PNG", optimize=False)
        written.append(path)
    return written


# ---------------------------------------------------------------- augmentation

def transform_image(img: np.ndarray, hflip: bool = False, vflip: bool = False,
                    scale: float = 1.0, shear_deg: float = 0.0) -> np.ndarray:
    """Flip, then scale and shear about the image centre with bilinear
    resampling and edge clamping."""
    out = img
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    if scale != 1.0 or shear_deg != 0.0:
        fwd = np.array([[1.0, 0.0], [math.tan(math.radians(shear_deg)), 1.0]]) * scale
        inv = np.linalg.inv(fwd)
        centre = (np.array(out.shape, dtype=np.float64) - 1.0) / 2.0
        out = ndimage.affine_transform(out.astype(np.float64), inv, offset=centre - inv @ centre,
                                       order=1, mode="nearest")
    return np.clip(np.ascontiguousarray(out), 0.0, 1.0).astype(img.dtype)


def augment(s: Sample, rng: np.random.Generator, p: float = 0.5,
            scale_range: Tuple[float, float] = (0.9, 1.1),
            shear_range: float = 10.0) -> Sample:
    """Randomly flip (both axes), scale and shear; each applied with prob ``p``.

    The rng is always advanced by the same amount regardless of which
    transforms fire.
    """
    u = rng.random(4)
    scale = rng.uniform(*scale_range)
    shear = rng.uniform(-shear_range, shear_range)
    img = transform_image(
        s.image,
        hflip=bool(u[0] < p),
        vflip=bool(u[3] < p),
        scale=scale if u[1] < p else 1.0,
        shear_deg=shear if u[2] < p else 0.0,
    )
    return Sample(img, s.label, s.source_path)


def oversample_balance(train: Sequence[Sample], rng: np.random.Generator) -> List[Sample]:
    """Top up every class to the majority count with augmented copies."""
    counts = Counter(s.label for s in train)
    if not counts:
        return list(train)
    target = max(counts.values())
    out = list(train)
    by_class: Dict[int, List[Sample]] = {}
    for s in train:
        by_class.setdefault(s.label, []).append(s)
    for label in sorted(by_class):
        members = by_class[label]
        for k in range(target - len(members)):
            src = members[rng.integers(len(members))]
            copy = augment(src, rng)
            out.append(Sample(copy.image, label, f"{src.source_path}#aug{k}"))
    return out


# ---------------------------------------------------------------- synthetic data

def _motif(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = np.mgrid[-1:1:size * 1j, -1:1:size * 1j]
    cu, cv = rng.uniform(-0.1, 0.1, 2)
    if label == 0:  # ring
        r = rng.uniform(0.45, 0.65)
        dist = np.hypot(u - cu, v - cv)
        img = np.exp(-((dist - r) / 0.12) ** 2)
    elif label == 1:  # cross
        width = rng.uniform(0.12, 0.18)
        img = np.maximum(np.exp(-((u - cu) / width) ** 2), np.exp(-((v - cv) / width) ** 2))
    elif label == 2:  # checker
        period = rng.uniform(0.4, 0.5)
        img = 0.5 + 0.5 * np.sign(np.sin(np.pi * (u - cu) / period) * np.sin(np.pi * (v - cv) / period))
    else:  # gradient
        angle = rng.uniform(-0.35, 0.35)
        img = 0.5 + 0.5 * (np.cos(angle) * u + np.sin(angle) * v) / math.sqrt(2.0)
    return img


def synth_generate(n_per_class: int, size: int, seed: int,
                   noise: float = 0.1) -> SampleList:
    """Four procedural classes (ring, cross, checker, gradient) with Gaussian
    pixel noise. Each sample draws from its own substream of ``seed``."""
    if size < 16:
        raise ConfigError(f"synthetic image size must be >= 16, got {size}")
    samples = []
    for label in range(4):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label, i])
            img = _motif(label, size, rng) + rng.normal(0.0, noise, (size, size))
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(img, label, f"synthetic/{SYNTH_CLASSES[label]}/{i:05d}"))
    return SampleList(samples, SYNTH_CLASSES)


# ---------------------------------------------------------------- splitting

def _class_counts(n: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_val = max(n_val, 1)
        n_train = max(min(n_train, n - n_val - 1), 1)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def is_kaggle_layout(samples: SampleList) -> bool:
    if tuple(samples.class_names) != KAGGLE_CLASSES:
        return False
    counts = Counter(s.label for s in samples)
    return all(counts[i] == sum(KAGGLE_COUNTS[name]) for i, name in enumerate(KAGGLE_CLASSES))


def split(samples: Sequence[Sample], fractions: Sequence[float] = DEFAULT_FRACTIONS,
          seed: int = 0, counts: Optional[Dict[int, Tuple[int, int, int]]] = None) -> DatasetSplit:
    """Stratified, seeded train/val/test split.

    ``counts`` overrides the fractions with absolute per-class sizes. When it
    is omitted and ``samples`` is the published Kaggle layout, that dataset's
    absolute split sizes are used.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positives summing to 1, got {fractions}")
    if counts is None and isinstance(samples, SampleList) and is_kaggle_layout(samples):
        counts = {i: KAGGLE_COUNTS[name] for i, name in enumerate(KAGGLE_CLASSES)}
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    parts: Tuple[List[Sample], List[Sample], List[Sample]] = ([], [], [])
    for label in sorted(by_class):
        members = by_class[label]
        order = rng.permutation(len(members))
        if counts is not None:
            n_train, n_val, _ = counts[label]
        else:
            n_train, n_val, _ = _class_counts(len(members), fractions)
        bounds = (0, n_train, n_train + n_val, len(members))
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            part.extend(members[j] for j in order[lo:hi])
    names = list(getattr(samples, "class_names", []))
    return DatasetSplit(parts[0], parts[1], parts[2], seed, names)
