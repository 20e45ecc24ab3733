"""Assemble monitor training data, train the monitor, and evaluate it.

Per-image safety labels inherit the dataset-level label of the degraded set
each image came from; that label noise near region borders is inherent to
the approach. Splits and cross-validation folds are stratified by level and
driven by seeded shuffles, so index assignments are reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import component
from .assess import SafetyLabel
from .component import ClassifierModel, TrainConfig
from .degrade import DegradedDataset
from .imageio import Image, LabeledDataset
from .rng import Xoshiro256, derive_seed


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class MonitorDataset:
    pixels: np.ndarray  # (n, h, w, c) float64
    levels: np.ndarray  # (n,) ints in [1, m]
    m: int
    provenance: list[tuple[str, int]] | None = None  # (dataset_id, source index)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.pixels.shape[0] != self.levels.shape[0]:
            raise ValueError("pixels and levels must have equal length")
        if self.levels.size and (self.levels.min() < 1 or self.levels.max() > self.m):
            raise ValueError(f"levels must lie in [1, {self.m}]")
        if self.provenance is not None and len(self.provenance) != len(self.levels):
            raise ValueError("provenance length mismatch")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def image(self, i: int) -> Image:
        return Image.from_array(self.pixels[i])

    def subset(self, indices) -> "MonitorDataset":
        idx = np.asarray(indices)
        prov = [self.provenance[i] for i in idx] if self.provenance is not None else None
        return MonitorDataset(self.pixels[idx], self.levels[idx], self.m, prov)

    def as_labeled(self) -> LabeledDataset:
        # levels 1..m become class indices 0..m-1
        return LabeledDataset(self.pixels, self.levels - 1, k=self.m)


def split_level_indices(levels: np.ndarray, train_fraction: float,
                        seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split on indices alone (no pixel data touched).

    Per level: seeded shuffle, then train takes round(fraction * n) samples.
    Train/test blocks concatenate level by level (ascending), and the train
    block is shuffled once more at the end.
    """
    levels = np.asarray(levels)
    rng = Xoshiro256(seed)
    train_parts, test_parts = [], []
    for level in sorted(set(levels.tolist())):
        idx = np.flatnonzero(levels == level)
        if idx.size < 2:
            raise SplitError(f"level {level} has only {idx.size} sample(s); need at least 2")
        idx = idx[rng.permutation(idx.size)]
        n_train = round(train_fraction * idx.size)
        train_parts.append(idx[:n_train])
        test_parts.append(idx[n_train:])
    train = np.concatenate(train_parts)
    test = np.concatenate(test_parts)
    train = train[rng.permutation(train.size)]
    return train, test


def prepare(labeled_sets: list[tuple[DegradedDataset, SafetyLabel]],
            spec: SplitSpec, m: int) -> tuple[MonitorDataset, MonitorDataset]:
    """Pool degraded datasets under their per-dataset safety labels and split."""
    if not labeled_sets:
        raise SplitError("no labeled datasets to prepare")
    total = sum(len(dd.data) for dd, _ in labeled_sets)
    h, w, c = labeled_sets[0][0].data.image_shape
    pixels = np.empty((total, h, w, c), dtype=np.float64)
    levels = np.empty(total, dtype=np.int64)
    provenance: list[tuple[str, int]] = []
    pos = 0
    for dd, label in labeled_sets:
        n = len(dd.data)
        if dd.data.image_shape != (h, w, c):
            raise SplitError(f"dataset {dd.dataset_id} has mismatched image shape")
        pixels[pos:pos + n] = dd.data.pixels
        levels[pos:pos + n] = label.level
        provenance.extend((dd.dataset_id, i) for i in range(n))
        pos += n
    train_idx, test_idx = split_level_indices(levels, spec.train_fraction, spec.seed)
    full = MonitorDataset(pixels, levels, m, provenance)
    return full.subset(train_idx), full.subset(test_idx)


def train_monitor(train: MonitorDataset, layers, config: TrainConfig) -> ClassifierModel:
    if len(np.unique(train.levels)) < 2:
        raise SplitError("monitor training needs at least two distinct safety levels")
    return component.train(train.as_labeled(), layers, config)


def monitor_probs(model: ClassifierModel, data: MonitorDataset) -> np.ndarray:
    return model.predict_proba(data.pixels)


# ---------------------------------------------------------------------------
# Metrics

def confusion_matrix(true_levels, predicted_levels, m: int) -> np.ndarray:
    """(m, m) counts; entry (r, c) is true level r+1 predicted as c+1."""
    t = np.asarray(true_levels, dtype=np.int64)
    p = np.asarray(predicted_levels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("true and predicted sequences differ in length")
    if t.size and not ((1 <= t.min() and t.max() <= m) and (1 <= p.min() and p.max() <= m)):
        raise ValueError(f"levels must lie in [1, {m}]")
    mat = np.zeros((m, m), dtype=np.int64)
    np.add.at(mat, (t - 1, p - 1), 1)
    return mat


class RocError(ValueError):
    pass


def roc_curve(scores, positives) -> list[tuple[float, float, float]]:
    """Threshold-swept ROC points as (threshold, fpr, tpr).

    Sweeps descending over distinct scores; tied scores enter together.
    Starts at (inf, 0, 0) and ends at (min score, 1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise RocError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = s_sorted.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            tp += bool(y_sorted[j])
            fp += not y_sorted[j]
            j += 1
        points.append((float(s_sorted[i]), fp / neg, tp / pos))
        i = j
    return points


def auc(scores, positives) -> float:
    """Rank-statistic AUC: P(score_pos > score_neg) with ties counting half.

    Equals the trapezoidal area under the threshold-swept ROC curve.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise RocError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[order[j]] == s[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # average rank for the tie group
        i = j
    rank_sum = float(ranks[y].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def trapezoid_area(points) -> float:
    area = 0.0
    for (_, fpr0, tpr0), (_, fpr1, tpr1) in zip(points, points[1:]):
        area += (fpr1 - fpr0) * (tpr1 + tpr0) / 2.0
    return area


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    roc_curves: dict[str, list[tuple[float, float, float]]]
    auc: dict[str, float | None]
    fold_metrics: list[float] | None = None
    notes: dict = field(default_factory=dict)


def _build_report(true_levels: np.ndarray, probs: np.ndarray, m: int,
                  fold_metrics=None) -> EvalReport:
    preds = probs.argmax(axis=1) + 1
    conf = confusion_matrix(true_levels, preds, m)
    accuracy = float(np.trace(conf) / conf.sum())
    curves: dict[str, list] = {}
    aucs: dict[str, float | None] = {}
    for level in range(1, m + 1):
        positives = true_levels == level
        key = f"level_{level}"
        if positives.any() and (~positives).any():
            curves[key] = roc_curve(probs[:, level - 1], positives)
            aucs[key] = auc(probs[:, level - 1], positives)
        else:
            aucs[key] = None  # level absent from the evaluated data
    # micro-average: pool every (sample, level) pair into one binary problem
    pooled_scores = probs.reshape(-1)
    pooled_pos = (true_levels[:, None] == np.arange(1, m + 1)[None, :]).reshape(-1)
    curves["aggregate"] = roc_curve(pooled_scores, pooled_pos)
    aucs["aggregate"] = auc(pooled_scores, pooled_pos)
    return EvalReport(
        accuracy=accuracy, confusion=conf, roc_curves=curves, auc=aucs,
        fold_metrics=list(fold_metrics) if fold_metrics is not None else None,
        notes={"aggregate_roc": "micro-average over (sample, level) pairs"},
    )


def evaluate_monitor(model: ClassifierModel, data: MonitorDataset) -> EvalReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate on empty data")
    return _build_report(data.levels, monitor_probs(model, data), data.m)


def kfold_indices(levels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Stratified fold test-sets: per level, seeded shuffle then round-robin."""
    if k < 2:
        raise SplitError("cross-validation needs k >= 2")
    levels = np.asarray(levels)
    rng = Xoshiro256(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for level in sorted(set(levels.tolist())):
        idx = np.flatnonzero(levels == level)
        if idx.size < k:
            raise SplitError(f"level {level} has {idx.size} samples; need at least k={k}")
        idx = idx[rng.permutation(idx.size)]
        for i, sample in enumerate(idx):
            folds[i % k].append(int(sample))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def kfold_cv(data: MonitorDataset, k: int, layers, config: TrainConfig) -> EvalReport:
    """k-fold cross-validation; pooled metrics over each sample's held-out
    prediction plus per-fold accuracies."""
    folds = kfold_indices(data.levels, k, config.seed)
    n = len(data)
    probs = np.zeros((n, data.m), dtype=np.float64)
    fold_acc: list[float] = []
    all_idx = np.arange(n)
    for j, test_idx in enumerate(folds):
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        train_part = data.subset(all_idx[mask])
        fold_cfg = config.with_seed(derive_seed(config.seed, f"fold-{j}"))
        model = train_monitor(train_part, layers, fold_cfg)
        p = model.predict_proba(data.pixels[test_idx])
        probs[test_idx] = p
        preds = p.argmax(axis=1) + 1
        fold_acc.append(float((preds == data.levels[test_idx]).mean()))
    return _build_report(data.levels, probs, data.m, fold_metrics=fold_acc)


# ---------------------------------------------------------------------------
# Report writers

def write_confusion_csv(report: EvalReport, level_names_by_level: list[str], path) -> None:
    m = report.confusion.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\predicted", *level_names_by_level])
        for r in range(m):
            writer.writerow([level_names_by_level[r], *report.confusion[r].tolist()])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in points:
            writer.writerow([repr(thr), repr(fpr), repr(tpr)])


def write_summary_json(report: EvalReport, path, extra: dict | None = None) -> None:
    payload = {
        "accuracy": report.accuracy,
        "auc": report.auc,
        "fold_accuracies": report.fold_metrics,
        "confusion": report.confusion.tolist(),
        "notes": report.notes,
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
