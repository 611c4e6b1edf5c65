# hiernas/runner.py

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np
from loguru import logger

from hiernas.common import DivergenceError
from hiernas.data import ToyDataset, iterate_minibatches, split_train
from hiernas.microtensor import ParamStore, Tensor, backward, cross_entropy_spatial, no_grad
from hiernas.network import DiscreteNet
from hiernas.optim import Adam, MomentumSGD, clip_grad_norm, cosine_lr
from hiernas.relaxation import ArchSnapshot, SuperNet, alpha_entropy, beta_entropy, normalize_alpha, normalize_beta
from hiernas.search_space import CellGenotype, NetworkPath
from hiernas.segsearch import (
    EpochRecord,
    RetrainConfig,
    SearchConfig,
    SearchTrace,
    majority_baseline_miou,
    miou,
    pixel_accuracy,
)

Batch = Tuple[np.ndarray, np.ndarray]


def evaluate(model: Callable[[np.ndarray], Tensor], dataset: ToyDataset, batch_size: int) -> Tuple[float, float, float]:
    """
    (mean loss, mIoU, pixel accuracy) over a dataset, in order, without recording a graph.
    """
    preds, losses, weights = [], [], []
    with no_grad():
        for images, labels in iterate_minibatches(dataset, batch_size, np.random.default_rng(0), shuffle=False):
            logits = model(images)
            losses.append(cross_entropy_spatial(logits, labels).item())
            weights.append(len(images))
            preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    loss = float(np.average(losses, weights=weights))
    return loss, miou(pred, dataset.labels, dataset.num_classes), pixel_accuracy(pred, dataset.labels)


def _endless(dataset: ToyDataset, batch_size: int, rng: np.random.Generator, crop: int) -> Iterator[Batch]:
    while True:
        yield from iterate_minibatches(dataset, batch_size, rng, crop=crop)


@dataclass
class SearchResult:
    trace: SearchTrace
    snapshot: ArchSnapshot
    params: ParamStore
    net: SuperNet
    counters: Counter = field(default_factory=Counter)
    duration: float = 0.0


class SearchRunner:
    """
    Alternating search: momentum SGD on the weights from trainA minibatches,
    then (after the delay) one Adam step on alpha/beta from a trainB minibatch.
    """

    def __init__(self, config: SearchConfig, dataset: ToyDataset, on_step: Optional[Callable[[str, SuperNet], None]] = None):
        self.config = config.validate()
        self.train_a, self.train_b = split_train(dataset, config.seed)
        self.num_classes = dataset.num_classes
        self.net = SuperNet(
            config.num_layers,
            config.num_blocks,
            config.filter_multiplier,
            dataset.num_classes,
            in_channels=dataset.images.shape[1],
            seed=config.seed,
            batch_norm=config.batch_norm,
        )
        self.w_opt = MomentumSGD(
            self.net.params, lr=config.w_lr_max, momentum=config.w_momentum, weight_decay=config.w_weight_decay
        )
        self.arch_opt = Adam(self.net.arch, lr=config.arch_lr, weight_decay=config.arch_weight_decay)
        self.rng = np.random.default_rng(config.seed + 1)
        self.on_step = on_step
        # (update, split) -> number of minibatches consumed
        self.counters: Counter = Counter()

    def _clip(self, tensors: List[Tensor], epoch: int, minibatch: int) -> None:
        if not self.config.clip_gradients:
            return
        norm = clip_grad_norm(tensors, self.config.grad_clip)
        if not math.isfinite(norm):
            raise DivergenceError(epoch, minibatch, f"gradient norm {norm}")

    def step_weights(self, batch: Batch, epoch: int, minibatch: int) -> float:
        images, labels = batch
        with no_grad():
            alpha = normalize_alpha(self.net.alpha).data
            beta = normalize_beta(self.net.beta).data
        loss = cross_entropy_spatial(self.net(images, alpha, beta), labels)
        if not math.isfinite(loss.item()):
            raise DivergenceError(epoch, minibatch, f"lossA={loss.item()}")
        self.w_opt.zero_grad()
        backward(loss)
        self._clip(self.w_opt.tensors(), epoch, minibatch)
        self.w_opt.step()
        self.counters["w", "trainA"] += 1
        if self.on_step:
            self.on_step("w", self.net)
        return loss.item()

    def step_arch(self, batch: Batch, epoch: int, minibatch: int) -> float:
        images, labels = batch
        loss = cross_entropy_spatial(self.net(images), labels)
        if not math.isfinite(loss.item()):
            raise DivergenceError(epoch, minibatch, f"lossB={loss.item()}")
        self.arch_opt.zero_grad()
        backward(loss)
        self._clip(self.arch_opt.tensors(), epoch, minibatch)
        self.arch_opt.step()
        self.counters["arch", "trainB"] += 1
        if self.on_step:
            self.on_step("arch", self.net)
        return loss.item()

    def run_epoch(self, epoch: int, arch_batches: Iterator[Batch]) -> EpochRecord:
        cfg = self.config
        lr = cosine_lr(epoch, max(cfg.epochs - 1, 0), cfg.w_lr_max, cfg.w_lr_min)
        self.w_opt.lr = lr
        arch_active = epoch >= cfg.arch_delay_epochs
        losses = []
        for m, batch in enumerate(iterate_minibatches(self.train_a, cfg.batch_size, self.rng, crop=cfg.crop_size)):
            losses.append(self.step_weights(batch, epoch + 1, m))
            if arch_active:
                self.step_arch(next(arch_batches), epoch + 1, m)
            logger.debug("epoch {} minibatch {}: lossA={:.4f}", epoch + 1, m, losses[-1])

        loss_b, score, acc = evaluate(self.net, self.train_b, cfg.batch_size)
        self.counters["eval", "trainB"] += 1
        if not math.isfinite(loss_b):
            raise DivergenceError(epoch + 1, -1, f"validation lossB={loss_b}")
        snap = ArchSnapshot.of(self.net)
        return EpochRecord(
            epoch=epoch + 1,
            loss_a=float(np.mean(losses)),
            loss_b=loss_b,
            miou=score,
            pixel_accuracy=acc,
            lr=lr,
            alpha_entropy=alpha_entropy(snap.alpha_probs()),
            beta_entropy=beta_entropy(snap.beta_probs(), snap.mask),
        )

    def run(self) -> SearchResult:
        cfg = self.config
        started = time.monotonic()
        logger.info(
            "Searching L={} B={} F={} for {} epochs on {}/{} images (trainA/trainB)",
            cfg.num_layers,
            cfg.num_blocks,
            cfg.filter_multiplier,
            cfg.epochs,
            len(self.train_a),
            len(self.train_b),
        )
        trace = SearchTrace()
        arch_batches = _endless(self.train_b, cfg.batch_size, np.random.default_rng(cfg.seed + 2), cfg.crop_size)
        for epoch in range(cfg.epochs):
            record = self.run_epoch(epoch, arch_batches)
            trace.append(record)
            logger.info(
                "epoch {}/{} lossA={:.4f} lossB={:.4f} mIoU={:.4f} acc={:.4f} lr={:.5f} H(alpha)={:.4f} H(beta)={:.4f}",
                record.epoch,
                cfg.epochs,
                record.loss_a,
                record.loss_b,
                record.miou,
                record.pixel_accuracy,
                record.lr,
                record.alpha_entropy,
                record.beta_entropy,
            )
        duration = time.monotonic() - started
        logger.success("Search finished in {:.1f}s, final mIoU {:.4f}", duration, trace[-1].miou)
        return SearchResult(trace, ArchSnapshot.of(self.net), self.net.params, self.net, self.counters, duration)


@dataclass
class RetrainResult:
    params: ParamStore
    miou: float
    pixel_accuracy: float
    losses: List[float]
    baseline_miou: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


class RetrainRunner:
    """
    Train a decoded architecture from scratch with momentum SGD and the
    cosine schedule, then score it on the held-out half.
    """

    def __init__(
        self,
        cell: CellGenotype,
        path: NetworkPath,
        filter_multiplier: int,
        dataset: ToyDataset,
        config: RetrainConfig,
    ):
        self.config = config.validate()
        if config.holdout and len(dataset) >= 2:
            self.train, self.val = split_train(dataset, config.seed)
        else:
            if config.holdout:
                logger.warning("Only {} image(s); scoring on the training data", len(dataset))
            self.train = self.val = dataset
        self.net = DiscreteNet(
            cell,
            path,
            filter_multiplier,
            dataset.num_classes,
            in_channels=dataset.images.shape[1],
            seed=config.seed,
            stem=config.stem,
            aspp_branches=config.aspp_branches,
            batch_norm=config.batch_norm,
        )
        self.opt = MomentumSGD(
            self.net.params, lr=config.lr_max, momentum=config.momentum, weight_decay=config.weight_decay
        )
        self.rng = np.random.default_rng(config.seed + 1)

    def run(self) -> RetrainResult:
        cfg = self.config
        losses: List[float] = []
        for epoch in range(cfg.epochs):
            self.opt.lr = cosine_lr(epoch, max(cfg.epochs - 1, 0), cfg.lr_max, cfg.lr_min)
            for m, (images, labels) in enumerate(
                iterate_minibatches(self.train, cfg.batch_size, self.rng, crop=cfg.crop_size)
            ):
                loss = cross_entropy_spatial(self.net(images), labels)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(epoch + 1, m, f"loss={loss.item()}")
                self.opt.zero_grad()
                backward(loss)
                if cfg.clip_gradients:
                    norm = clip_grad_norm(self.opt.tensors(), cfg.grad_clip)
                    if not math.isfinite(norm):
                        raise DivergenceError(epoch + 1, m, f"gradient norm {norm}")
                self.opt.step()
                losses.append(loss.item())
            logger.debug("retrain epoch {}/{} loss={:.4f}", epoch + 1, cfg.epochs, losses[-1])

        _, score, acc = evaluate(self.net, self.val, cfg.batch_size)
        _, baseline = majority_baseline_miou(self.val)
        logger.success("Retrained model: mIoU {:.4f} (majority baseline {:.4f})", score, baseline)
        return RetrainResult(self.net.params, score, acc, losses, baseline)
