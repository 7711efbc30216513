"""Classification metrics: confusion matrices, accuracies, F-scores, ROC/AUC,
top-k, confidence summaries and majority-vote video classification.

Zero-division convention: precision, recall and F are 0 whenever their
denominator is 0.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset


# ---------------------------------------------------------------- primitives

def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true labels, columns predicted labels."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{y_true.shape} true labels vs {y_pred.shape} predictions")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def row_percentages(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, rows, out=np.zeros(cm.shape), where=rows > 0)


def f_score(precision: float, recall: float) -> float:
    """F1, the harmonic mean of precision and recall (0 when both are 0)."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError(f"precision/recall must lie in [0, 1], got {precision}, {recall}")
    total = precision + recall
    return 0.0 if total == 0 else 2.0 * precision * recall / total


def precision_recall_f(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    f = np.array([f_score(p, r) for p, r in zip(precision, recall)])
    return precision, recall, f


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points over every distinct score, with +inf/-inf sentinels.

    A sample is called positive when its score >= threshold. Returns
    (false-positive fraction, true-positive fraction, thresholds), thresholds
    descending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    tps = np.cumsum(p)
    fps = np.cumsum(~p)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tps[last] / n_pos, 1.0]
    fpr = np.r_[0.0, fps[last] / n_neg, 1.0]
    thresholds = np.r_[np.inf, s[last], -np.inf]
    return fpr, tpr, thresholds


def roc_auc(scores, positive) -> tuple[float, np.ndarray]:
    """Trapezoidal area under the ROC curve and the (fpr, tpr) polyline."""
    fpr, tpr, _ = roc_curve(scores, positive)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, np.column_stack([fpr, tpr])


def ranked(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties keep the lower index first."""
    return np.argsort(-np.asarray(probs), axis=1, kind="stable")


def topk_accuracy(probs: np.ndarray, labels, k: int) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k must be in 1..{probs.shape[1]}")
    top = ranked(probs)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


@dataclass
class ConfidenceSummary:
    count: int
    median: float
    q1: float
    q3: float

    @classmethod
    def of(cls, values: np.ndarray) -> "ConfidenceSummary":
        if len(values) == 0:
            return cls(0, math.nan, math.nan, math.nan)
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        return cls(len(values), float(med), float(q1), float(q3))


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    classes: tuple[str, ...]
    confusion: np.ndarray
    overall_accuracy: float
    average_accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f_score: np.ndarray
    auc: np.ndarray
    roc: list[np.ndarray | None]
    top1: float
    top2: float
    second_guess_recovery: float
    confidence_correct: ConfidenceSummary
    confidence_incorrect: ConfidenceSummary
    extra: dict = field(default_factory=dict)

    @property
    def f_mean(self) -> float:
        return float(np.mean(self.f_score))

    @property
    def f_sd(self) -> float:
        return float(np.std(self.f_score, ddof=1)) if len(self.f_score) > 1 else 0.0

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def summary(self) -> dict[str, float | int]:
        out = {
            "n_samples": self.total,
            "n_classes": len(self.classes),
            "overall_accuracy": self.overall_accuracy,
            "average_accuracy": self.average_accuracy,
            "f_score_mean": self.f_mean,
            "f_score_sd": self.f_sd,
            "auc_mean": float(np.nanmean(self.auc)) if np.any(np.isfinite(self.auc)) else math.nan,
            "top1_accuracy": self.top1,
            "top2_accuracy": self.top2,
            "second_guess_recovery": self.second_guess_recovery,
            "confidence_correct_n": self.confidence_correct.count,
            "confidence_correct_median": self.confidence_correct.median,
            "confidence_correct_q1": self.confidence_correct.q1,
            "confidence_correct_q3": self.confidence_correct.q3,
            "confidence_incorrect_n": self.confidence_incorrect.count,
            "confidence_incorrect_median": self.confidence_incorrect.median,
            "confidence_incorrect_q1": self.confidence_incorrect.q1,
            "confidence_incorrect_q3": self.confidence_incorrect.q3,
        }
        out.update(self.extra)
        return out

    def write(self, directory) -> list[Path]:
        """Write confusion.csv, metrics.csv, roc_<class>.csv and summary.txt."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        pct = row_percentages(self.confusion)
        path = d / "confusion.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true_label", "predicted_label", "count", "row_percent"])
            for i, ti in enumerate(self.classes):
                for j, pj in enumerate(self.classes):
                    w.writerow([ti, pj, int(self.confusion[i, j]), f"{pct[i, j]:.6f}"])
        written.append(path)
        path = d / "metrics.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "support", "precision", "recall", "f_score", "auc"])
            support = self.confusion.sum(axis=1)
            for k, c in enumerate(self.classes):
                w.writerow([c, int(support[k]), repr(float(self.precision[k])), repr(float(self.recall[k])),
                            repr(float(self.f_score[k])), repr(float(self.auc[k]))])
        written.append(path)
        for k, c in enumerate(self.classes):
            if self.roc[k] is None:
                continue
            path = d / f"roc_{c}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["fpr", "tpr"])
                for fpr, tpr in self.roc[k]:
                    w.writerow([repr(float(fpr)), repr(float(tpr))])
            written.append(path)
        path = d / "summary.txt"
        path.write_text("".join(f"{k}={v!r}\n" for k, v in self.summary().items()))
        written.append(path)
        return written


def evaluate_predictions(probs: np.ndarray, labels, classes: Sequence[str]) -> EvalReport:
    """Build a full report from per-sample class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty test set")
    k = probs.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside the model's {k} classes")
    pred = ranked(probs)[:, 0]
    cm = confusion_matrix(labels, pred, k)
    per_view = np.divide(np.diag(cm), cm.sum(axis=1), out=np.zeros(k), where=cm.sum(axis=1) > 0)
    present = cm.sum(axis=1) > 0
    precision, recall, f = precision_recall_f(cm)
    auc = np.full(k, np.nan)
    roc: list[np.ndarray | None] = [None] * k
    for c in range(k):
        pos = labels == c
        if pos.any() and (~pos).any():
            auc[c], roc[c] = roc_auc(probs[:, c], pos)
    correct = pred == labels
    conf = probs.max(axis=1)
    miss = ~correct
    recovered = (ranked(probs)[:, 1] == labels)[miss] if k > 1 else np.zeros(0, bool)
    return EvalReport(
        classes=tuple(classes),
        confusion=cm,
        overall_accuracy=float(np.trace(cm) / cm.sum()),
        average_accuracy=float(per_view[present].mean()),
        precision=precision,
        recall=recall,
        f_score=f,
        auc=auc,
        roc=roc,
        top1=topk_accuracy(probs, labels, 1),
        top2=topk_accuracy(probs, labels, 2) if k > 1 else 1.0,
        second_guess_recovery=float(recovered.mean()) if miss.any() else math.nan,
        confidence_correct=ConfidenceSummary.of(conf[correct]),
        confidence_incorrect=ConfidenceSummary.of(conf[miss]),
    )


def evaluate_stills(model, test_set: Dataset) -> EvalReport:
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty test set")
    probs = model.predict_proba(test_set.images)
    return evaluate_predictions(probs, test_set.labels, test_set.classes[:model.num_classes])


@dataclass
class TopK:
    top1: float
    topk: float
    k: int
    second_guess_recovery: float
    confidence_correct: ConfidenceSummary
    confidence_incorrect: ConfidenceSummary


def topk_and_confidence(model, test_set: Dataset, k: int = 2, probs: np.ndarray | None = None) -> TopK:
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty test set")
    if not 1 <= k < model.num_classes:
        raise ValueError(f"k must be below the number of classes ({model.num_classes})")
    if probs is None:
        probs = model.predict_proba(test_set.images)
    rep = evaluate_predictions(probs, test_set.labels, test_set.classes[:model.num_classes])
    return TopK(rep.top1, topk_accuracy(probs, test_set.labels, k), k, rep.second_guess_recovery,
                rep.confidence_correct, rep.confidence_incorrect)


# ---------------------------------------------------------------- video voting

@dataclass
class VideoVote:
    label: int
    tally: np.ndarray
    summed_probability: np.ndarray


def majority_vote(frame_probs: np.ndarray) -> VideoVote:
    """Plurality of per-frame argmax labels; ties go to the larger summed
    probability, then to the lowest class index."""
    frame_probs = np.atleast_2d(np.asarray(frame_probs, dtype=np.float64))
    if frame_probs.shape[0] == 0:
        raise ValueError("a video needs at least one frame")
    k = frame_probs.shape[1]
    votes = ranked(frame_probs)[:, 0]
    tally = np.bincount(votes, minlength=k)
    summed = frame_probs.sum(axis=0)
    leaders = np.flatnonzero(tally == tally.max())
    if len(leaders) > 1:
        best = summed[leaders].max()
        leaders = leaders[summed[leaders] == best]
    return VideoVote(int(leaders[0]), tally, summed)


def classify_video(model, frames) -> VideoVote:
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if len(frames) == 0:
        raise ValueError("a video needs at least one frame")
    return majority_vote(model.predict_proba(frames))


def clips_of(dataset: Dataset) -> dict[str, np.ndarray]:
    """clip_id -> sample indices (stills are skipped)."""
    out: dict[str, list[int]] = {}
    for i, r in enumerate(dataset.records):
        if r.clip_id is not None:
            out.setdefault(r.clip_id, []).append(i)
    return {c: np.array(v) for c, v in out.items()}


def evaluate_videos(model, dataset: Dataset, probs: np.ndarray | None = None,
                    frames_per_clip: int | None = None) -> EvalReport:
    """Clip-level report by majority vote. ``frames_per_clip`` limits the vote
    to each clip's first frames (default: all)."""
    if probs is None:
        probs = model.predict_proba(dataset.images)
    labels = dataset.labels
    clip_probs, clip_labels = [], []
    for clip, idx in clips_of(dataset).items():
        idx = idx[np.argsort([dataset.records[i].frame_index for i in idx], kind="stable")]
        if frames_per_clip is not None:
            idx = idx[:frames_per_clip]
        if len(set(labels[idx].tolist())) != 1:
            raise ValueError(f"clip {clip} mixes labels")
        vote = majority_vote(probs[idx])
        p = np.zeros(probs.shape[1])
        p[vote.label] = 1.0
        # rank the runners-up by vote count, then summed probability
        p += 0.5 * vote.tally / vote.tally.sum() + 1e-6 * vote.summed_probability / len(idx)
        clip_probs.append(p / p.sum())
        clip_labels.append(labels[idx[0]])
    if not clip_labels:
        raise ValueError("dataset holds no video clips")
    rep = evaluate_predictions(np.array(clip_probs), np.array(clip_labels), dataset.classes[:probs.shape[1]])
    rep.extra["n_clips"] = len(clip_labels)
    return rep


def binomial_majority_error(p: float, n: int) -> float:
    """P(more than half of n i.i.d. binary votes are wrong) for per-vote error p.
    For even n a tie counts as half an error."""
    total = 0.0
    for k in range(n + 1):
        term = math.comb(n, k) * p ** k * (1 - p) ** (n - k)
        if 2 * k > n:
            total += term
        elif 2 * k == n:
            total += 0.5 * term
    return total


def simulate_vote_errors(p: float, n_frames: int, trials: int, num_classes: int = 12,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Run ``majority_vote`` on synthetic clips whose frames are each wrong with
    probability ``p`` (always voting the same wrong class). Returns a boolean
    array of clip errors."""
    rng = np.random.default_rng(0) if rng is None else rng
    truth = rng.integers(0, num_classes, trials)
    wrong = (truth + 1 + rng.integers(0, num_classes - 1, trials)) % num_classes
    flips = rng.random((trials, n_frames)) < p
    errors = np.empty(trials, dtype=bool)
    for t in range(trials):
        probs = np.full((n_frames, num_classes), 0.2 / (num_classes - 1))
        winners = np.where(flips[t], wrong[t], truth[t])
        probs[np.arange(n_frames), winners] = 0.8
        errors[t] = majority_vote(probs).label != truth[t]
    return errors
