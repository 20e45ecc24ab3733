"""Measure the classifier on every degraded dataset and label the results.

Safety levels are ordinals 1..m with 1 the most hazardous and m nominal
operation. A record's level drops by one for every threshold its accuracy
falls below; accuracy exactly equal to a threshold keeps the safer level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .component import count_correct
from .degrade import DegradedDataset


@dataclass(frozen=True)
class PerformanceRecord:
    dataset_id: str
    assignment: dict[str, float]
    correct_count: int
    sample_count: int

    @property
    def accuracy(self) -> float:
        return self.correct_count / self.sample_count


@dataclass(frozen=True)
class ThresholdSpec:
    """Strictly decreasing accuracy thresholds plus m = len+1 level names.

    Thresholds are fractions in (0, 1); display as percentages only at the
    rendering edge. level_names is ordered safest-first, so level m maps to
    level_names[0].
    """

    thresholds: tuple[float, ...]
    level_names: tuple[str, ...]

    def __post_init__(self):
        if not self.thresholds:
            raise ValueError("at least one threshold is required")
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        if any(b >= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly decreasing")
        if len(self.level_names) != len(self.thresholds) + 1:
            raise ValueError("need exactly one more level name than thresholds")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "level_names", tuple(self.level_names))

    @property
    def m(self) -> int:
        return len(self.level_names)

    def name_for_level(self, level: int) -> str:
        if not 1 <= level <= self.m:
            raise ValueError(f"level {level} outside [1, {self.m}]")
        return self.level_names[self.m - level]


@dataclass(frozen=True)
class SafetyLabel:
    level: int  # 1 = most hazardous, m = nominal


def label_accuracy(accuracy: float, spec: ThresholdSpec) -> SafetyLabel:
    crossed = sum(1 for t in spec.thresholds if accuracy < t)
    return SafetyLabel(level=spec.m - crossed)


def label_record(record: PerformanceRecord, spec: ThresholdSpec) -> SafetyLabel:
    return label_accuracy(record.accuracy, spec)


def assess_all(provider, degraded: list[DegradedDataset]) -> list[PerformanceRecord]:
    """One record per dataset, in the given (plan) order."""
    records = []
    for dd in degraded:
        try:
            correct = count_correct(provider, dd.data)
        except Exception as exc:
            raise type(exc)(f"[{dd.dataset_id}] {exc}") from exc
        records.append(PerformanceRecord(
            dataset_id=dd.dataset_id,
            assignment=dict(dd.assignment),
            correct_count=correct,
            sample_count=len(dd.data),
        ))
    return records


@dataclass
class HeatmapGrid:
    factor_names: tuple[str, str]
    levels_a: tuple[float, ...]  # rows
    levels_b: tuple[float, ...]  # columns
    accuracy: np.ndarray  # (len(levels_a), len(levels_b))
    labels: np.ndarray  # same shape, safety levels

    def level_census(self, m: int) -> dict[int, int]:
        return {lvl: int((self.labels == lvl).sum()) for lvl in range(1, m + 1)}


def heatmap_grid(records: list[PerformanceRecord], spec: ThresholdSpec) -> HeatmapGrid:
    """Arrange records over a complete 2-factor grid; cell (i, j) holds the
    accuracy for (level i of factor 1, level j of factor 2)."""
    if not records:
        raise ValueError("no records")
    names = list(records[0].assignment.keys())
    if len(names) != 2:
        raise ValueError(
            f"heatmap needs exactly two factors, got {len(names)}; "
            "use the records CSV report for other factor counts"
        )
    fa, fb = names
    levels_a = tuple(sorted({r.assignment[fa] for r in records}))
    levels_b = tuple(sorted({r.assignment[fb] for r in records}))
    acc = np.full((len(levels_a), len(levels_b)), np.nan)
    lab = np.zeros((len(levels_a), len(levels_b)), dtype=np.int64)
    pos_a = {e: i for i, e in enumerate(levels_a)}
    pos_b = {e: j for j, e in enumerate(levels_b)}
    for r in records:
        i, j = pos_a[r.assignment[fa]], pos_b[r.assignment[fb]]
        if not np.isnan(acc[i, j]):
            raise ValueError(f"duplicate grid cell for {r.dataset_id}")
        acc[i, j] = r.accuracy
        lab[i, j] = label_record(r, spec).level
    if np.isnan(acc).any():
        raise ValueError("records do not cover the full factor grid")
    return HeatmapGrid((fa, fb), levels_a, levels_b, acc, lab)


# ---------------------------------------------------------------------------
# Report writers

def write_records_csv(records, path, spec: ThresholdSpec | None = None,
                      labels: list[SafetyLabel] | None = None) -> None:
    factor_names = list(records[0].assignment.keys()) if records else []
    header = ["dataset_id", *factor_names, "correct", "count", "accuracy"]
    if labels is not None:
        header += ["level", "level_name"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, r in enumerate(records):
            row = [r.dataset_id]
            row += [repr(r.assignment[n]) for n in factor_names]
            row += [r.correct_count, r.sample_count, repr(r.accuracy)]
            if labels is not None:
                row += [labels[i].level, spec.name_for_level(labels[i].level)]
            writer.writerow(row)


def write_heatmap_csv(grid: HeatmapGrid, path) -> None:
    fa, fb = grid.factor_names
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"{fa}\\{fb}", *[repr(e) for e in grid.levels_b]])
        for i, ea in enumerate(grid.levels_a):
            writer.writerow([repr(ea), *[repr(v) for v in grid.accuracy[i]]])


_LEVEL_COLORS = {1: "#d62728", 2: "#e8a33d", 3: "#2ca02c"}  # red / amber / green


def _level_color(level: int, m: int) -> str:
    # three canonical colors; interpolate index for other m
    if m == 3:
        return _LEVEL_COLORS[level]
    frac = (level - 1) / max(m - 1, 1)
    palette = [_LEVEL_COLORS[1], _LEVEL_COLORS[2], _LEVEL_COLORS[3]]
    return palette[min(int(frac * 3), 2)]


def _cell_fill(acc: float) -> str:
    # white at 0 toward steel blue at 1
    r = int(255 + (70 - 255) * acc)
    g = int(255 + (130 - 255) * acc)
    b = int(255 + (180 - 255) * acc)
    return f"#{r:02x}{g:02x}{b:02x}"


def write_heatmap_svg(grid: HeatmapGrid, spec: ThresholdSpec, path) -> None:
    """Accuracy grid as SVG: fill shade by accuracy, border color by level."""
    cell, margin = 64, 70
    rows, cols = grid.accuracy.shape
    width = margin + cols * cell + 20
    height = margin + rows * cell + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="11">',
        f'<text x="{margin + cols * cell / 2:.0f}" y="18" text-anchor="middle">'
        f'{grid.factor_names[1]} ε →</text>',
        f'<text x="14" y="{margin + rows * cell / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {margin + rows * cell / 2:.0f})">'
        f'{grid.factor_names[0]} ε →</text>',
    ]
    for j, eb in enumerate(grid.levels_b):
        parts.append(
            f'<text x="{margin + j * cell + cell / 2:.0f}" y="{margin - 8}" '
            f'text-anchor="middle">{eb:.3g}</text>'
        )
    for i, ea in enumerate(grid.levels_a):
        parts.append(
            f'<text x="{margin - 8}" y="{margin + i * cell + cell / 2 + 4:.0f}" '
            f'text-anchor="end">{ea:.3g}</text>'
        )
    for i in range(rows):
        for j in range(cols):
            acc = float(grid.accuracy[i, j])
            lvl = int(grid.labels[i, j])
            x, y = margin + j * cell, margin + i * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_cell_fill(acc)}" stroke="{_level_color(lvl, spec.m)}" '
                f'stroke-width="3"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 4:.0f}" '
                f'text-anchor="middle">{acc:.2f}</text>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
