# hiernas/data.py
"""
Synthetic segmentation data: coloured rectangles, disks and stripes on a
noisy background, one label per pixel (0 = background).
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import InvalidArgumentError, ValidationError
from hiernas.utils import dataclass_from_text, dataclass_to_text, read_json, require_dir, sha256_file, write_json

SHAPES = ("rectangle", "disk", "stripe")
INDEX_FORMAT = "hiernas-dataset/1"
IGNORE_INDEX = 255


@dataclass
class ToyDatasetSpec:
    num_images: int = 100
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes: Tuple[str, ...] = SHAPES
    objects_per_image: int = 3
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> "ToyDatasetSpec":
        if self.height % 32 or self.width % 32 or self.height <= 0 or self.width <= 0:
            raise InvalidArgumentError(f"image size {self.height}x{self.width} is not divisible by 32")
        if self.num_images < 1:
            raise ValidationError(f"num_images must be >= 1, got {self.num_images}")
        if not 1 <= self.num_classes < IGNORE_INDEX:
            raise ValidationError(f"num_classes must be in 1..{IGNORE_INDEX - 1}, got {self.num_classes}")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ValidationError(f"unknown shapes {unknown}; choose from {', '.join(SHAPES)}")
        if self.noise < 0 or self.objects_per_image < 0:
            raise ValidationError("noise and objects_per_image must be non-negative")
        return self

    @classmethod
    def from_file(cls, path: Path) -> "ToyDatasetSpec":
        return dataclass_from_text(cls, Path(path).read_text(encoding="utf-8")).validate()

    def to_text(self) -> str:
        return dataclass_to_text(self)


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N, H, W) int64
    num_classes: int
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ValidationError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.indices is None:
            self.indices = np.arange(len(self.images))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, rows: np.ndarray) -> "ToyDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return ToyDataset(self.images[rows], self.labels[rows], self.num_classes, self.indices[rows])

    def save(self, out_dir: Path, spec: Optional[ToyDatasetSpec] = None) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.save(out_dir / "images.npy", self.images)
        np.save(out_dir / "labels.npy", self.labels)
        index = {
            "format": INDEX_FORMAT,
            "num_images": len(self),
            "height": int(self.images.shape[2]),
            "width": int(self.images.shape[3]),
            "num_classes": self.num_classes,
            "images": {"file": "images.npy", "sha256": sha256_file(out_dir / "images.npy")},
            "labels": {"file": "labels.npy", "sha256": sha256_file(out_dir / "labels.npy")},
            "spec": None if spec is None else {k: v for k, v in vars(spec).items()},
        }
        write_json(out_dir / "index.json", index)
        logger.success("Wrote {} images to {}", len(self), out_dir)
        return out_dir

    @classmethod
    def load(cls, data_dir: Path) -> "ToyDataset":
        data_dir = require_dir(data_dir, "dataset directory")
        index = read_json(data_dir / "index.json") if (data_dir / "index.json").is_file() else None
        if not index or index.get("format") != INDEX_FORMAT:
            raise ValidationError(f"{data_dir}: missing or foreign index.json")
        for key in ("images", "labels"):
            if sha256_file(data_dir / index[key]["file"]) != index[key]["sha256"]:
                raise ValidationError(f"{data_dir}: {key} do not match their recorded checksum")
        images = np.load(data_dir / index["images"]["file"])
        labels = np.load(data_dir / index["labels"]["file"])
        return cls(images.astype(np.float64), labels.astype(np.int64), int(index["num_classes"]))


def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rectangle":
        rh, rw = rng.integers(h // 6, h // 2 + 1), rng.integers(w // 6, w // 2 + 1)
        top, left = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        return (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
    if kind == "disk":
        r = rng.uniform(min(h, w) / 10, min(h, w) / 4)
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # stripe: a horizontal or vertical band across the image
    if rng.random() < 0.5:
        width = rng.integers(max(1, h // 10), h // 5 + 1)
        start = rng.integers(0, h - width + 1)
        return (yy >= start) & (yy < start + width)
    width = rng.integers(max(1, w // 10), w // 5 + 1)
    start = rng.integers(0, w - width + 1)
    return (xx >= start) & (xx < start + width)


def gen_toy_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    """
    Deterministic per seed. Foreground classes are assigned round-robin so
    every class shows up; class c draws shape shapes[(c - 1) % len(shapes)].
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, k = spec.height, spec.width, spec.num_classes
    palette = rng.uniform(0.1, 0.9, size=(k, 3))
    images = np.empty((spec.num_images, 3, h, w))
    labels = np.zeros((spec.num_images, h, w), dtype=np.int64)

    drawable = bool(spec.shapes) and k > 1
    serial = 0
    for n in range(spec.num_images):
        label = labels[n]
        for _ in range(spec.objects_per_image if drawable else 0):
            c = 1 + serial % (k - 1)
            serial += 1
            label[_shape_mask(spec.shapes[(c - 1) % len(spec.shapes)], rng, h, w)] = c
        clean = palette[label].transpose(2, 0, 1)
        images[n] = np.clip(clean + spec.noise * rng.standard_normal((3, h, w)), 0.0, 1.0)
    logger.debug("Generated {} toy images ({}x{}, {} classes)", spec.num_images, h, w, k)
    return ToyDataset(images, labels, k)


def split_train(dataset: ToyDataset, seed: int) -> Tuple[ToyDataset, ToyDataset]:
    """
    Disjoint halves; the first gets the extra item when the size is odd.
    """
    n = len(dataset)
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 items to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    cut = math.ceil(n / 2)
    return dataset.subset(np.sort(perm[:cut])), dataset.subset(np.sort(perm[cut:]))


def class_frequencies(labels: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    valid = labels[labels != ignore_index]
    return np.bincount(valid.reshape(-1), minlength=num_classes)[:num_classes] / max(valid.size, 1)


def iterate_minibatches(
    dataset: ToyDataset,
    batch_size: int,
    rng: np.random.Generator,
    crop: Optional[int] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Yield (images, labels) minibatches; the last one may be smaller.
    With `crop`, each minibatch is cut to one random crop x crop window;
    an axis shorter than `crop` is kept whole.
    """
    if batch_size < 1:
        raise InvalidArgumentError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
    h, w = dataset.images.shape[2:]
    ch, cw = (h, w) if crop is None else (min(crop, h), min(crop, w))
    for start in range(0, len(order), batch_size):
        rows = np.sort(order[start : start + batch_size])
        images, labels = dataset.images[rows], dataset.labels[rows]
        if (ch, cw) != (h, w):
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            images = images[:, :, top : top + ch, left : left + cw]
            labels = labels[:, top : top + ch, left : left + cw]
        yield images, labels
