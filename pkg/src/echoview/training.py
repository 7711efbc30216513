"""RMSprop training with per-epoch learning-rate decay, best-epoch selection,
k-fold model selection and the shuffled-label negative control."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import AugmentParams, Dataset, DatasetManifest, augment, normalize
from .model import EchoNet, build_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 45
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    rho: float = 0.9
    epsilon: float = 1e-8
    k_folds: int = 5
    seed: int = 0
    bn_calibration: int = 512
    augment: AugmentParams = field(default_factory=AugmentParams)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs a batch variance)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.bn_calibration < 0:
            raise ValueError("bn_calibration must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")

    def lr(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: lr0 * decay**epoch."""
        return self.learning_rate * self.lr_decay ** epoch


# ---------------------------------------------------------------- optimizer

def rmsprop_step(params: list[np.ndarray], grads: list[np.ndarray], state: list[np.ndarray],
                 learning_rate: float, rho: float = 0.9, eps: float = 1e-8,
                 names: list[str] | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One in-place RMSprop update.

    acc <- rho * acc + (1 - rho) * g**2
    p   <- p - lr * g / sqrt(acc + eps)
    """
    for k, (p, g, acc) in enumerate(zip(params, grads, state)):
        if acc.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {k}: {p.shape}, {g.shape}, {acc.shape}")
        sq = np.square(g)
        # one reduction catches NaN/inf; a finite total can only overflow for finite huge g
        if not np.isfinite(sq.sum()) and not np.all(np.isfinite(g)):
            name = names[k] if names else str(k)
            raise TrainingError(f"non-finite gradient in layer {name}")
        acc *= rho
        sq *= 1.0 - rho
        acc += sq
        np.add(acc, eps, out=sq)
        np.sqrt(sq, out=sq)
        step = learning_rate * g
        step /= sq
        p -= step.astype(p.dtype, copy=False)
    return params, state


class RMSprop:
    def __init__(self, model: EchoNet, rho: float = 0.9, eps: float = 1e-8):
        self.names = [n for n, _ in model.parameters()]
        self.tensors = [p for _, p in model.parameters()]
        self.state = [np.zeros_like(p.data) for p in self.tensors]
        self.rho = rho
        self.eps = eps

    def step(self, learning_rate: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.tensors]
        rmsprop_step([p.data for p in self.tensors], grads, self.state, learning_rate,
                     self.rho, self.eps, self.names)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.grad = None


# ---------------------------------------------------------------- convergence log

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class ConvergenceLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def selected(self) -> int:
        """Index of the epoch with the best validation accuracy (earliest on ties)."""
        if not self.epochs:
            raise ValueError("empty log")
        return int(np.argmax([e.val_acc for e in self.epochs]))

    @property
    def best_val_acc(self) -> float:
        return self.epochs[self.selected].val_acc

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.epochs])

    def to_csv(self, path) -> None:
        sel = self.selected
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "selected"])
            for i, e in enumerate(self.epochs):
                w.writerow([e.epoch, repr(e.train_loss), repr(e.train_acc), repr(e.val_loss),
                            repr(e.val_acc), repr(e.lr), int(i == sel)])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceLog":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                                float(r["val_loss"]), float(r["val_acc"]), float(r["lr"])) for r in rows])


# ---------------------------------------------------------------- training loop

def _check_sets(model: EchoNet, train_set: Dataset, val_set: Dataset | None) -> None:
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("validation set is empty")
    labels = train_set.labels
    if labels.max() >= model.num_classes:
        raise ValueError(f"labels exceed the model's {model.num_classes} classes")
    missing = sorted(set(range(model.num_classes)) - set(labels.tolist()))
    if missing:
        names = [train_set.classes[k] if k < len(train_set.classes) else str(k) for k in missing]
        raise ValueError(f"classes absent from the training set: {names}")
    if val_set is not None:
        shared = {r.study_id for r in train_set.records} & {r.study_id for r in val_set.records}
        if shared:
            raise ValueError(f"studies in both training and validation sets: {sorted(shared)[:5]}")


def evaluate_loss_acc(model: EchoNet, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    logits = model.logits(dataset.images, batch_size).astype(np.float64)
    labels = dataset.labels
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


class _BatchAverage:
    """Stand-in for RunningStats that averages the batch statistics it sees."""

    def __init__(self):
        self.count = 0
        self.mean = self.var = 0.0

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.count += 1
        self.mean = self.mean + mean
        self.var = self.var + var


def recalibrate_batchnorm(model: EchoNet, images: np.ndarray, batch_size: int = 64) -> None:
    """Replace the running batch-norm statistics with the average batch
    statistics of ``images`` under the current weights (dropout off).

    The moving averages lag behind weights that change quickly; this pass
    gives inference the statistics of the network as it is now.
    """
    if len(images) < 2:
        raise ValueError("recalibration needs at least 2 images")
    bns = [layer for layer in model.layers if layer.kind == "bn"]
    last = max(i for i, layer in enumerate(model.layers) if layer.kind == "bn")
    saved = [(bn.stats, bn.update_stats) for bn in bns]
    accs = [_BatchAverage() for _ in bns]
    try:
        for bn, acc in zip(bns, accs):
            bn.stats, bn.update_stats = acc, True
        x = model._as_batch(images)
        for s in range(0, len(x), batch_size):
            chunk = x[s:s + batch_size]
            if len(chunk) < 2:
                break
            h = T.Tensor(chunk.astype(bns[0].gamma.data.dtype, copy=False))
            for layer in model.layers[:last + 1]:
                h = layer.forward(h, layer.kind == "bn", None, None)
    finally:
        for bn, (stats, flag) in zip(bns, saved):
            bn.stats, bn.update_stats = stats, flag
    for bn, acc in zip(bns, accs):
        bn.stats.set(acc.mean / acc.count, acc.var / acc.count)


def _batch_images(raw: np.ndarray, mean: np.ndarray, idx: np.ndarray, params: AugmentParams,
                  seed: int, epoch: int) -> np.ndarray:
    out = np.empty((len(idx),) + raw.shape[1:], dtype=np.float32)
    for k, i in enumerate(idx):
        rng = np.random.default_rng([seed, epoch, int(i)])
        out[k] = augment(raw[i], params, rng)
    out -= mean
    return out


def train(model: EchoNet, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          progress: Callable[[EpochRecord], None] | None = None) -> tuple[EchoNet, ConvergenceLog]:
    """Train in place and return the model holding its best-validation weights.

    Images are expected mean-subtracted (see ``normalize``); augmentation is
    applied in the raw [0, 1] domain so the zero fill stays black.
    """
    _check_sets(model, train_set, val_set)
    mean = train_set.training_mean
    if mean is None:
        mean = np.zeros(train_set.images.shape[1:], dtype=np.float32)
    raw = train_set.raw_images()
    labels = train_set.labels
    n = len(train_set)
    opt = RMSprop(model, config.rho, config.epsilon)
    calib = None
    if config.bn_calibration:
        pick = np.random.default_rng([config.seed, 0xB4]).permutation(n)[:config.bn_calibration]
        calib = train_set.images[np.sort(pick)]
    history = ConvergenceLog()
    best_state, best_acc = None, -1.0

    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]
        if len(batches[-1]) < 2:
            batches.pop()
        if not batches:
            raise ValueError("training set too small for one batch of 2")
        loss_sum, correct, seen = 0.0, 0, 0
        for b, idx in enumerate(batches):
            x = _batch_images(raw, mean, idx, config.augment, config.seed, epoch)
            tape = T.Tape()
            drop_rng = np.random.default_rng([config.seed, epoch, b, 1])
            logits, _ = model.forward(x, train=True, tape=tape, rng=drop_rng)
            loss, probs = T.softmax_crossentropy(logits, labels[idx], tape)
            T.backward(tape, loss)
            tape.clear()
            opt.step(lr)
            opt.zero_grad()
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == labels[idx]))
            seen += len(idx)
        if calib is not None and len(calib) >= 2:
            recalibrate_batchnorm(model, calib, config.batch_size)
        val_loss, val_acc = evaluate_loss_acc(model, val_set)
        rec = EpochRecord(epoch + 1, loss_sum / seen, correct / seen, val_loss, val_acc, lr)
        history.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.2e",
                 rec.epoch, rec.train_loss, rec.train_acc, val_loss, val_acc, lr)
        if progress is not None:
            progress(rec)
        if val_acc > best_acc:
            best_acc, best_state = val_acc, model.get_state()

    model.set_state(best_state)
    return model, history


# ---------------------------------------------------------------- k-fold

@dataclass
class KFoldResult:
    model: EchoNet
    best_fold: int
    logs: list[ConvergenceLog]
    fold_studies: list[list[str]]
    training_mean: np.ndarray

    @property
    def val_accuracies(self) -> np.ndarray:
        return np.array([lg.best_val_acc for lg in self.logs])


def study_folds(dataset: Dataset, k: int, seed: int = 0) -> list[list[str]]:
    """Partition study ids into ``k`` folds (seeded shuffle, round robin)."""
    studies = sorted({r.study_id for r in dataset.records})
    if len(studies) < k:
        raise ValueError(f"{len(studies)} studies cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(studies))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(studies[i])
    return folds


def _assign(dataset: Dataset, val_studies: set[str]) -> Dataset:
    from dataclasses import replace
    recs = [replace(r, split="val" if r.study_id in val_studies else "train") for r in dataset.records]
    return Dataset(dataset.raw_images(), DatasetManifest(recs, dataset.classes, None))


def kfold_select(dataset: Dataset, config: TrainConfig,
                 progress: Callable[[int, EpochRecord], None] | None = None) -> KFoldResult:
    """Train one model per study-level fold and keep the best on validation."""
    folds = study_folds(dataset, config.k_folds, config.seed)
    logs, best = [], None
    for f, val_studies in enumerate(folds):
        fold_set = normalize(_assign(dataset, set(val_studies)))
        model = build_model(len(dataset.classes), seed=config.seed + f)
        cb = (lambda rec, f=f: progress(f, rec)) if progress else None
        model, lg = train(model, fold_set.split("train"), fold_set.split("val"), config, cb)
        logs.append(lg)
        if best is None or lg.best_val_acc > best[1]:
            best = (f, lg.best_val_acc, model, fold_set.training_mean)
    f, _, model, mean = best
    return KFoldResult(model, f, logs, folds, mean)


# ---------------------------------------------------------------- negative control

def shuffled_labels(dataset: Dataset, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xC0]).permutation(dataset.labels)


def random_label_control(dataset: Dataset, config: TrainConfig,
                         progress: Callable[[EpochRecord], None] | None = None) -> ConvergenceLog:
    """Train on a dataset whose labels were permuted across all samples.

    ``dataset`` must carry train/val splits; it is re-normalized here.
    """
    shuffled = dataset.with_labels(shuffled_labels(dataset, config.seed))
    shuffled = normalize(shuffled)
    model = build_model(len(dataset.classes), seed=config.seed)
    _, history = train(model, shuffled.split("train"), shuffled.split("val"), config, progress)
    return history
