# hiernas/segsearch.py
"""
Search and retraining configuration, the per-epoch trace, and the
segmentation metrics. The loops themselves live in `hiernas.runner`.
"""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from hiernas.common import ShapeError, ValidationError
from hiernas.data import IGNORE_INDEX, ToyDataset, class_frequencies
from hiernas.utils import dataclass_from_text, dataclass_to_text, sha256_text

TRACE_HEADER = ("epoch", "lossA", "lossB", "miou", "lr", "alpha_entropy", "beta_entropy")


class _TextConfig:
    @classmethod
    def from_file(cls, path: Path):
        return dataclass_from_text(cls, Path(path).read_text(encoding="utf-8")).validate()

    @classmethod
    def from_text(cls, text: str):
        return dataclass_from_text(cls, text).validate()

    def to_text(self) -> str:
        return dataclass_to_text(self)

    def digest(self) -> str:
        return sha256_text(self.to_text())


@dataclass
class SearchConfig(_TextConfig):
    num_layers: int = 6
    num_blocks: int = 3
    filter_multiplier: int = 4
    epochs: int = 40
    batch_size: int = 2
    w_lr_max: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    arch_lr: float = 3e-3
    arch_weight_decay: float = 1e-3
    arch_delay_epochs: int = 20
    clip_gradients: bool = True
    grad_clip: float = 5.0
    crop_size: int = 64
    batch_norm: bool = True
    seed: int = 0

    def validate(self) -> "SearchConfig":
        problems = []
        for name in ("num_layers", "num_blocks", "filter_multiplier", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0 <= self.arch_delay_epochs <= self.epochs:
            problems.append(f"arch_delay_epochs must be in 0..epochs ({self.epochs})")
        for name in ("w_lr_max", "w_lr_min", "arch_lr", "grad_clip"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.w_lr_min > self.w_lr_max:
            problems.append("w_lr_min exceeds w_lr_max")
        if self.w_weight_decay < 0 or self.arch_weight_decay < 0 or not 0 <= self.w_momentum < 1:
            problems.append("weight decays must be >= 0 and momentum in [0, 1)")
        if self.crop_size < 32 or self.crop_size % 32:
            problems.append(f"crop_size {self.crop_size} is not a positive multiple of 32")
        if problems:
            raise ValidationError("invalid search config: " + "; ".join(problems))
        return self


@dataclass
class RetrainConfig(_TextConfig):
    epochs: int = 40
    batch_size: int = 2
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    clip_gradients: bool = True
    grad_clip: float = 5.0
    crop_size: int = 64
    stem: str = "search"
    aspp_branches: int = 3
    holdout: bool = True
    batch_norm: bool = True
    seed: int = 0

    def validate(self) -> "RetrainConfig":
        problems = []
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be >= 1")
        if self.lr_max <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_max:
            problems.append("need 0 < lr_min <= lr_max")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1 or self.grad_clip <= 0:
            problems.append("weight_decay >= 0, momentum in [0, 1) and grad_clip > 0 required")
        if self.crop_size < 32 or self.crop_size % 32:
            problems.append(f"crop_size {self.crop_size} is not a positive multiple of 32")
        if self.stem not in ("search", "deep"):
            problems.append(f"stem must be 'search' or 'deep', got {self.stem!r}")
        if self.aspp_branches not in (3, 5):
            problems.append("aspp_branches must be 3 or 5")
        if problems:
            raise ValidationError("invalid retrain config: " + "; ".join(problems))
        return self


@dataclass
class EpochRecord:
    epoch: int
    loss_a: float
    loss_b: float
    miou: float
    pixel_accuracy: float
    lr: float
    alpha_entropy: float
    beta_entropy: float


@dataclass
class SearchTrace:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if record.alpha_entropy < 0 or record.beta_entropy < 0:
            raise ValidationError(f"epoch {record.epoch}: negative entropy")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> EpochRecord:
        return self.records[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in self.records:
            writer.writerow(
                [r.epoch, repr(r.loss_a), repr(r.loss_b), repr(r.miou), repr(r.lr), repr(r.alpha_entropy), repr(r.beta_entropy)]
            )
        return buf.getvalue()


# ---------------------------------------------------------------- metrics


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ShapeError("miou", np.shape(pred), np.shape(gt))


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """
    Mean intersection-over-union over the classes present in `gt`.
    """
    _check_pair(pred, gt)
    pred, gt = np.asarray(pred), np.asarray(gt)
    valid = gt != ignore_index
    scores = []
    for c in range(num_classes):
        in_gt = (gt == c) & valid
        if not in_gt.any():
            continue
        in_pred = (pred == c) & valid
        scores.append((in_gt & in_pred).sum() / (in_gt | in_pred).sum())
    return float(np.mean(scores)) if scores else 0.0


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray, ignore_index: int = IGNORE_INDEX) -> float:
    _check_pair(pred, gt)
    valid = np.asarray(gt) != ignore_index
    return float((np.asarray(pred)[valid] == np.asarray(gt)[valid]).mean()) if valid.any() else 0.0


def majority_baseline_miou(dataset: ToyDataset) -> Tuple[int, float]:
    """
    mIoU of predicting the dataset's most frequent class at every pixel.
    """
    freq = class_frequencies(dataset.labels, dataset.num_classes)
    majority = int(np.argmax(freq))
    return majority, miou(np.full_like(dataset.labels, majority), dataset.labels, dataset.num_classes)


# ---------------------------------------------------------------- entry points


def run_search(config: SearchConfig, dataset: ToyDataset, on_step=None):
    """
    Bi-level search; returns (SearchTrace, ArchSnapshot, weight ParamStore).
    """
    from hiernas.runner import SearchRunner

    result = SearchRunner(config, dataset, on_step=on_step).run()
    return result.trace, result.snapshot, result.params


def retrain_decoded(cell, path, filter_multiplier: int, dataset: ToyDataset, config: RetrainConfig):
    """
    Train the discrete network from scratch; returns (ParamStore, mIoU).
    """
    from hiernas.runner import RetrainRunner

    result = RetrainRunner(cell, path, filter_multiplier, dataset, config).run()
    return result.params, result.miou
