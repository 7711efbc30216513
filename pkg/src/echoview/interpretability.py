"""Occlusion sensitivity, guided-backprop saliency and exact t-SNE."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import IMAGE_SHAPE, Dataset, write_float_image, write_pgm
from .model import EchoNet


# ---------------------------------------------------------------- occlusion

@dataclass(frozen=True)
class Rect:
    """Masked rectangle (top, left, height, width). ``fill`` is a raw [0, 1]
    intensity; None means the training mean at each covered pixel."""
    top: int
    left: int
    height: int
    width: int
    fill: float | None = None

    def check(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if self.height < 0 or self.width < 0:
            raise ValueError(f"negative rectangle size: {self}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise ValueError(f"rectangle {self} outside the {h}x{w} image")

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class OcclusionSpec:
    masks: dict[str, list[Rect]]
    shape: tuple[int, int] = IMAGE_SHAPE

    def __post_init__(self):
        for rects in self.masks.values():
            for r in rects:
                r.check(self.shape)

    @classmethod
    def default(cls, shape: tuple[int, int] = IMAGE_SHAPE, block: tuple[int, int] = (24, 32)) -> "OcclusionSpec":
        """Centre block, the four corner blocks of the same size, a horizontal
        and a vertical band through the centre, and the whole image."""
        h, w = shape
        bh, bw = block
        top, left = (h - bh) // 2, (w - bw) // 2
        return cls({
            "center-heart": [Rect(top, left, bh, bw)],
            "corner-top-left": [Rect(0, 0, bh, bw)],
            "corner-top-right": [Rect(0, w - bw, bh, bw)],
            "corner-bottom-left": [Rect(h - bh, 0, bh, bw)],
            "corner-bottom-right": [Rect(h - bh, w - bw, bh, bw)],
            "horizontal-band": [Rect((h - bh // 2) // 2, 0, bh // 2, w)],
            "vertical-band": [Rect(0, (w - bw // 2) // 2, h, bw // 2)],
            "full-image": [Rect(0, 0, h, w)],
        }, shape)

    def mask(self, name: str) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for r in self.masks[name]:
            m[r.top:r.top + r.height, r.left:r.left + r.width] = True
        return m


def occlude(images: np.ndarray, rects: Sequence[Rect], mean: np.ndarray | None) -> np.ndarray:
    """Mask mean-subtracted ``images``. Filling with the training mean in raw
    space is a zero in normalized space."""
    out = np.array(images, dtype=np.float32, copy=True)
    shape = out.shape[1:]
    for r in rects:
        r.check(shape)
        sl = (slice(None), slice(r.top, r.top + r.height), slice(r.left, r.left + r.width))
        if r.fill is None:
            out[sl] = 0.0
        else:
            m = 0.0 if mean is None else mean[sl[1:]]
            out[sl] = r.fill - m
    return out


@dataclass
class OcclusionResult:
    baseline: float
    accuracy: dict[str, float]

    def delta(self, name: str) -> float:
        return self.accuracy[name] - self.baseline

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mask_name", "accuracy", "delta_vs_baseline"])
            for name, acc in self.accuracy.items():
                w.writerow([name, repr(acc), repr(acc - self.baseline)])


def occlusion_experiment(model: EchoNet, test_set: Dataset, spec: OcclusionSpec | None = None,
                         batch_size: int = 256) -> OcclusionResult:
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    spec = spec or OcclusionSpec.default(model.input_shape)
    if tuple(spec.shape) != tuple(test_set.images.shape[1:]):
        raise ValueError(f"occlusion spec is for {spec.shape}, images are {test_set.images.shape[1:]}")
    labels = test_set.labels
    mean = test_set.training_mean

    def acc(x):
        return float(np.mean(np.argmax(model.logits(x, batch_size), axis=1) == labels))

    baseline = acc(test_set.images)
    table = {name: acc(occlude(test_set.images, rects, mean)) for name, rects in spec.masks.items()}
    return OcclusionResult(baseline, table)


# ---------------------------------------------------------------- saliency

@dataclass
class SaliencyMap:
    values: np.ndarray
    target: int

    def normalized(self) -> np.ndarray:
        peak = self.values.max()
        return self.values / peak if peak > 0 else np.zeros_like(self.values)

    def mass_fraction(self, mask: np.ndarray) -> float:
        total = self.values.sum()
        return float(self.values[mask].sum() / total) if total > 0 else 0.0

    def save(self, path) -> tuple[Path, Path]:
        """8-bit PGM plus a float32 sidecar (``<path>.f32``) of the normalized map."""
        path = Path(path)
        norm = self.normalized()
        write_pgm(path, norm)
        side = path.with_suffix(".f32")
        write_float_image(side, norm)
        return path, side


def input_gradients(model: EchoNet, images, targets, guided: bool = True) -> np.ndarray:
    """d score[target] / d input for each image (inference mode)."""
    x = model._as_batch(images)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (len(x),))
    if targets.min() < 0 or targets.max() >= model.num_classes:
        raise ValueError(f"target class outside 0..{model.num_classes - 1}")
    tape = T.Tape()
    params = [p for _, p in model.parameters()]
    saved = [p.grad for p in params]
    try:
        logits, inp = model.forward(x, train=False, tape=tape, input_grad=True)
        seed = np.zeros(logits.shape, dtype=logits.data.dtype)
        seed[np.arange(len(x)), targets] = 1.0
        T.backward(tape, logits, seed, guided=guided)
        grad = inp.grad
    finally:
        tape.clear()
        for p, g in zip(params, saved):
            p.grad = g
    if grad is None:
        return np.zeros(x.shape[:3])
    return np.asarray(grad[..., 0], dtype=np.float64)


def guided_backprop_saliency(model: EchoNet, image, target: int) -> SaliencyMap:
    img = np.asarray(image)
    if img.shape != model.input_shape:
        raise T.ShapeError(f"expected one {model.input_shape} image, got {img.shape}")
    g = input_gradients(model, img[None], target, guided=True)[0]
    return SaliencyMap(np.abs(g), int(target))


def saliency_batch(model: EchoNet, images, targets, batch_size: int = 64) -> np.ndarray:
    """Absolute guided gradients for many images, shape (N, H, W)."""
    x = model._as_batch(images)
    targets = np.broadcast_to(np.asarray(targets), (len(x),))
    out = [np.abs(input_gradients(model, x[i:i + batch_size], targets[i:i + batch_size]))
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- features and t-SNE

def extract_features(model: EchoNet, images, batch_size: int = 256) -> np.ndarray:
    """Post-activation output of the last hidden dense layer."""
    return model.features(images, batch_size).reshape(len(model._as_batch(images)), -1)


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_probabilities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-6,
                              max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P(j|i) with each row's Gaussian precision found by
    bisection so exp(entropy) equals ``perplexity``. Returns (P, perplexities)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 3 * perplexity:
        raise ValueError(f"{n} points is too few for perplexity {perplexity} (need >= {3 * perplexity:g})")
    d = _sq_distances(x.reshape(n, -1))
    target = np.log(perplexity)
    p = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            s = w.sum()
            h = np.log(s) + beta * np.dot(di, w) / s
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        row = w / s
        achieved[i] = np.exp(-np.sum(row[row > 0] * np.log(row[row > 0])))
        p[i, np.arange(n) != i] = row
    return p, achieved


def joint_probabilities(x: np.ndarray, perplexity: float = 30.0) -> np.ndarray:
    p, _ = conditional_probabilities(x, perplexity)
    p = p + p.T
    return p / p.sum()


@dataclass
class TSNEResult:
    embedding: np.ndarray
    kl: dict[int, float] = field(default_factory=dict)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / np.maximum(q[m], 1e-300))))


def tsne(x: np.ndarray, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250,
         momentum: tuple[float, float] = (0.5, 0.8), kl_every: int = 50) -> TSNEResult:
    """Exact t-SNE with momentum, per-coordinate gains and early exaggeration.

    The KL divergence against the unexaggerated P is recorded every
    ``kl_every`` iterations and at the last one (1-based iteration keys).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if x.ndim < 2 or x.reshape(n, -1).shape[1] < 1:
        raise ValueError("features must be an N x D matrix with D >= 1")
    if n > 5000:
        raise ValueError("exact t-SNE is limited to 5000 points")
    p = joint_probabilities(x.reshape(n, -1), perplexity)
    p = np.maximum(p, 1e-12)
    p /= p.sum()
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl: dict[int, float] = {}
    for it in range(iterations):
        early = it < exaggeration_iters
        pe = p * exaggeration if early else p
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        w = (pe - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        mom = momentum[0] if early else momentum[1]
        velocity = mom * velocity - learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)
        step = it + 1
        if step % kl_every == 0 or step == iterations:
            kl[step] = _kl(p, np.maximum(q, 1e-12))
    return TSNEResult(y, kl)


def tsne_embed(features: np.ndarray, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> np.ndarray:
    return tsne(features, perplexity, iterations, seed).embedding


def knn_purity(points: np.ndarray, labels, k: int = 5) -> float:
    """Mean fraction of each point's k nearest neighbours (self excluded)
    that share its label."""
    points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    labels = np.asarray(labels)
    if len(points) <= k:
        raise ValueError(f"need more than {k} points")
    d = _sq_distances(points)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))


def write_embedding(path, coords: np.ndarray, labels: Sequence[str], sample_ids: Sequence[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "x", "y"])
        for sid, lab, (cx, cy) in zip(sample_ids, labels, coords):
            w.writerow([sid, lab, repr(float(cx)), repr(float(cy))])
