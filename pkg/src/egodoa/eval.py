"""Metrics and detection post-processing.

Azimuth metrics (cyclic AE, accuracy, error histograms), greedy NMS on
the 90x180 spherical score grid, Hungarian matching, the E1/E2 distance
statistics and average precision for the wearer-activity head.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import SpherePoint, cyclic_abs_error, great_circle_deg, in_fov

GRID = (90, 180)  # (elevation rows, azimuth columns), 2 degree cells
CELL_DEG = 2.0
N_BINS = 360


class MetricError(ValueError):
    """A metric is undefined for the given input."""


# azimuth metrics

def accuracy_at(preds, gts, threshold: float = 2.0) -> float:
    """Percentage of predictions whose cyclic error is strictly below ``threshold``."""
    preds, gts = np.asarray(preds, dtype=float), np.asarray(gts, dtype=float)
    if preds.shape != gts.shape:
        raise MetricError(f"length mismatch {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise MetricError("accuracy of an empty set is undefined")
    return float(np.mean(np.asarray(cyclic_abs_error(gts, preds)) < threshold) * 100.0)


def mean_ae(preds, gts) -> float:
    preds, gts = np.asarray(preds, dtype=float), np.asarray(gts, dtype=float)
    if preds.size == 0:
        raise MetricError("mean AE of an empty set is undefined")
    return float(np.mean(cyclic_abs_error(gts, preds)))


@dataclass
class ErrorHistogram:
    """Mean AE per integer ground-truth degree; ``count == 0`` marks empty bins (AE is NaN)."""
    mean_ae: np.ndarray
    count: np.ndarray

    @property
    def populated(self) -> np.ndarray:
        return np.flatnonzero(self.count > 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gt_bin_deg", "mean_ae_deg", "count"])
        for b in self.populated:
            w.writerow([int(b), f"{self.mean_ae[b]:.6f}", int(self.count[b])])
        return buf.getvalue()


def error_histogram(preds, gts) -> ErrorHistogram:
    preds, gts = np.asarray(preds, dtype=float), np.asarray(gts, dtype=float)
    if preds.size == 0:
        raise MetricError("histogram of an empty set is undefined")
    ae = np.asarray(cyclic_abs_error(gts, preds), dtype=float).ravel()
    bins = np.round(gts.ravel()).astype(int) % N_BINS
    count = np.bincount(bins, minlength=N_BINS)
    total = np.bincount(bins, weights=ae, minlength=N_BINS)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return ErrorHistogram(mean, count)


# spherical grid

def sphere_to_cell(p: SpherePoint) -> tuple[int, int]:
    """(row, col) of the grid cell containing a direction.

    Column j covers azimuths centred on 2j degrees; row i covers
    elevations centred on -89 + 2i degrees.
    """
    col = int(math.floor((p.azimuth + CELL_DEG / 2) / CELL_DEG)) % GRID[1]
    row = int(math.floor((p.elevation + 90.0) / CELL_DEG))
    return min(max(row, 0), GRID[0] - 1), col


def cell_to_sphere(row: float, col: float) -> SpherePoint:
    return SpherePoint(azimuth=CELL_DEG * col, elevation=-89.0 + CELL_DEG * row)


@dataclass
class DetectionSet:
    points: list[SpherePoint]
    scores: list[float]
    cells: list[tuple[int, int]]
    radius: float
    threshold: float

    def __len__(self):
        return len(self.points)


def _cell_dist2(rows, cols, r0, c0, n_cols):
    dc = np.abs(cols - c0)
    dc = np.minimum(dc, n_cols - dc)
    return (rows - r0) ** 2 + dc ** 2


def nms_sphere(score, radius: float = 5.0, threshold: float = 0.0) -> DetectionSet:
    """Greedy NMS: take the global maximum above ``threshold``, suppress
    every cell within ``radius`` (Euclidean cell units, azimuth wraps),
    repeat until nothing is left.

    Scores must exceed ``threshold`` strictly. Ties pick the first cell in
    row-major order.
    """
    s = np.array(score, dtype=float)
    if s.ndim != 2:
        raise ValueError("score map must be 2-D")
    n_rows, n_cols = s.shape
    rows, cols = np.mgrid[0:n_rows, 0:n_cols]
    alive = np.isfinite(s) & (s > threshold)
    flat = s.ravel()
    order = np.argsort(-flat, kind="stable")
    pts, scs, cells = [], [], []
    alive_flat = alive.ravel()
    r2 = radius * radius
    for k in order:
        if not alive_flat[k]:
            continue
        r0, c0 = divmod(int(k), n_cols)
        pts.append(cell_to_sphere(r0, c0) if (n_rows, n_cols) == GRID else SpherePoint(c0 * 360.0 / n_cols))
        scs.append(float(flat[k]))
        cells.append((r0, c0))
        alive_flat &= ~(_cell_dist2(rows, cols, r0, c0, n_cols).ravel() <= r2)
    return DetectionSet(pts, scs, cells, radius, threshold)


# matching and distance statistics

@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]
    total_cost: float


def hungarian_match(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of min(P, G) pairs."""
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    p, g = c.shape
    if p == 0 or g == 0:
        return Assignment([], list(range(p)), list(range(g)), 0.0)
    ri, ci = linear_sum_assignment(c)
    pairs = sorted(zip(ri.tolist(), ci.tolist()))
    mp = {a for a, _ in pairs}
    mg = {b for _, b in pairs}
    return Assignment(pairs, [i for i in range(p) if i not in mp], [j for j in range(g) if j not in mg],
                      float(c[ri, ci].sum()))


@dataclass
class DistanceStats:
    mean_e1: float
    std1: float
    mean_e2: float
    std2: float
    n_pred: int
    n_gt: int
    n_matched: int


def mean_e1_e2(preds, gts) -> DistanceStats:
    """Great-circle E1 (prediction side) and E2 (ground-truth side) statistics.

    Unmatched predictions or ground truths count as 180 degrees. An empty
    side reports zeros with its count.
    """
    pts = list(preds.points) if isinstance(preds, DetectionSet) else list(preds)
    gts = list(gts)
    cost = np.array([[great_circle_deg(a, b) for b in gts] for a in pts]).reshape(len(pts), len(gts))
    asg = hungarian_match(cost)
    e1 = np.full(len(pts), 180.0)
    e2 = np.full(len(gts), 180.0)
    for i, j in asg.pairs:
        e1[i] = e2[j] = cost[i, j]

    def stats(x):
        return (float(np.mean(x)), float(np.std(x))) if x.size else (0.0, 0.0)
    m1, s1 = stats(e1)
    m2, s2 = stats(e2)
    return DistanceStats(m1, s1, m2, s2, len(pts), len(gts), len(asg.pairs))


def average_precision(scores, labels) -> float:
    """All-points interpolated AP. Equal scores keep their input order."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_pos
    # monotone envelope from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * env))


# reports

SPLITS = ("overall", "in_fov", "out_fov")


@dataclass
class SplitMetrics:
    count: int
    accuracy: float | None
    mean_ae: float | None

    @classmethod
    def of(cls, preds, gts, threshold=2.0):
        if len(preds) == 0:
            return cls(0, None, None)
        return cls(len(preds), accuracy_at(preds, gts, threshold), mean_ae(preds, gts))


@dataclass
class EvalReport:
    """Per-method metrics with the in-view / out-of-view / overall split."""
    method: str
    splits: dict[str, SplitMetrics]
    histogram: ErrorHistogram
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, method: str, preds, gts, threshold: float = 2.0, extra=None) -> "EvalReport":
        preds = np.asarray(preds, dtype=float)
        gts = np.asarray(gts, dtype=float)
        mask = np.asarray(in_fov(gts), dtype=bool)
        splits = {"overall": SplitMetrics.of(preds, gts, threshold),
                  "in_fov": SplitMetrics.of(preds[mask], gts[mask], threshold),
                  "out_fov": SplitMetrics.of(preds[~mask], gts[~mask], threshold)}
        return cls(method, splits, error_histogram(preds, gts), dict(extra or {}))

    def to_dict(self) -> dict:
        return {"method": self.method,
                "splits": {k: {"count": v.count, "accuracy": _r(v.accuracy), "mean_ae": _r(v.mean_ae)}
                           for k, v in self.splits.items()},
                **({"extra": self.extra} if self.extra else {})}


def _r(x):
    return None if x is None else round(float(x), 6)


def reports_to_json(reports: list[EvalReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "split", "count", "accuracy", "mean_ae"])
    for r in reports:
        d = r.to_dict()["splits"]
        for s in SPLITS:
            row = d[s]
            w.writerow([r.method, s, row["count"],
                        "" if row["accuracy"] is None else f"{row['accuracy']:.6f}",
                        "" if row["mean_ae"] is None else f"{row['mean_ae']:.6f}"])
    return buf.getvalue()
