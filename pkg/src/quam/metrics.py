"""Detection and calibration metrics, uncertainty maps and the simplex
likelihood-surface experiment.

Ranking metrics follow the usual conventions: AUROC is the probability a
random positive outranks a random negative with half credit for ties
(mid-rank Mann-Whitney); AUPR uses step interpolation over descending
score thresholds; FPR@TPR is the smallest false-positive rate over
thresholds reaching the target true-positive rate (score >= t counts as
positive).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .data import LabeledDataset
from .models import (
    ArchSpec,
    TrainConfig,
    TrainingDiverged,
    forward_graph,
    mean_train_loss,
    train_with_point_loss,
)

__all__ = [
    "ScoredLabels",
    "auroc",
    "aupr",
    "fpr_at_tpr",
    "selective_auc",
    "ece",
    "calibration_bins",
    "uncertainty_grid",
    "grid_rows",
    "simplex_grid",
    "simplex_surface",
]


@dataclass(frozen=True)
class ScoredLabels:
    """Real scores with binary labels (1 = positive: OOD / misclassified)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if s.shape != y.shape or s.ndim != 1:
            raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def require_both_classes(self):
        if self.labels.sum() in (0, len(self.labels)):
            raise ValueError("ranking metrics need at least one positive and one negative")


def auroc(s: ScoredLabels) -> float:
    """Mid-rank Mann-Whitney statistic; ties get half credit."""
    s.require_both_classes()
    order = np.argsort(s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    ranks = np.empty(len(sorted_scores))
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0  # mid-rank, 1-based
        i = j + 1
    rank_by_item = np.empty(len(ranks))
    rank_by_item[order] = ranks
    n_pos = int(s.labels.sum())
    n_neg = len(s.labels) - n_pos
    rank_sum = rank_by_item[s.labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pr_points(s: ScoredLabels):
    """Precision/recall at every distinct descending threshold."""
    order = np.argsort(-s.scores, kind="mergesort")
    y = s.labels[order]
    scores = s.scores[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    distinct = np.nonzero(np.diff(scores))[0]
    cut = np.r_[distinct, len(y) - 1]
    tp, fp = tp[cut], fp[cut]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    return precision, recall


def aupr(s: ScoredLabels) -> float:
    """Area under precision-recall by step interpolation (positives = 1)."""
    s.require_both_classes()
    precision, recall = _pr_points(s)
    prev_r = 0.0
    area = 0.0
    for p, r in zip(precision, recall):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


def fpr_at_tpr(s: ScoredLabels, tpr_target: float = 0.95) -> float:
    """Minimal FPR over thresholds with TPR >= target (score >= t is positive)."""
    s.require_both_classes()
    thresholds = np.unique(s.scores)
    n_pos = s.labels.sum()
    n_neg = len(s.labels) - n_pos
    best = 1.0
    for t in thresholds:
        flag = s.scores >= t
        tpr = (flag & (s.labels == 1)).sum() / n_pos
        if tpr >= tpr_target:
            fpr = (flag & (s.labels == 0)).sum() / n_neg
            best = min(best, float(fpr))
    return best


def selective_auc(uncertainties, correct) -> float:
    """Area of accuracy vs. retained fraction, retaining lowest uncertainty first.

    Tied uncertainties accrue their group's correctness at the group's
    average rate, so a constant score gives exactly the overall accuracy.
    The curve starts at fraction 1/n (the empty prefix is undefined).
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if u.shape != ok.shape or u.ndim != 1 or len(u) == 0:
        raise ValueError("uncertainties and correctness must be equal-length nonempty vectors")
    order = np.argsort(u, kind="mergesort")
    u_sorted, ok_sorted = u[order], ok[order]
    n = len(u)
    cum = np.empty(n)
    i = 0
    total = 0.0
    while i < n:
        j = i
        while j + 1 < n and u_sorted[j + 1] == u_sorted[i]:
            j += 1
        rate = ok_sorted[i : j + 1].mean()
        for k in range(i, j + 1):
            total += rate
            cum[k] = total
        i = j + 1
    ks = np.arange(1, n + 1)
    acc = cum / ks
    frac = ks / n
    if n == 1:
        return float(acc[0])
    return float(np.trapezoid(acc, frac) / (frac[-1] - frac[0]))


def calibration_bins(pred_probs, labels, n_bins: int = 10):
    """Per-bin (count, mean confidence, accuracy) on equal-width bins."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    rows = []
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (conf >= lo) & (conf < hi) if b < n_bins - 1 else (conf >= lo) & (conf <= hi)
        count = int(mask.sum())
        if count:
            rows.append((count, float(conf[mask].mean()), float((pred[mask] == y[mask]).mean())))
        else:
            rows.append((0, 0.0, 0.0))
    return rows


def ece(pred_probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error: sum over bins of (n_b/n)|acc_b - conf_b|."""
    rows = calibration_bins(pred_probs, labels, n_bins)
    n = sum(c for c, _, _ in rows)
    return float(sum(c / n * abs(acc - conf) for c, conf, acc in rows if c))


# --------------------------------------------------------------------------
# 2D uncertainty maps
# --------------------------------------------------------------------------


def uncertainty_grid(method, x_range, y_range, resolution: int):
    """Evaluate `method((x, y)) -> UncertaintyBreakdown` at every grid node.

    Returns (points, breakdowns) with resolution**2 rows in row-major
    order (y varies fastest within a row of constant x index).
    """
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    points = np.array([(x, y) for x in xs for y in ys])
    breakdowns = [method(p) for p in points]
    return points, breakdowns


def grid_rows(points, breakdowns):
    """CSV rows (x, y, total, aleatoric, epistemic)."""
    return [(float(p[0]), float(p[1]), b.total, b.aleatoric, b.epistemic) for p, b in zip(points, breakdowns)]


# --------------------------------------------------------------------------
# simplex likelihood surface
# --------------------------------------------------------------------------


def simplex_grid(resolution: int) -> np.ndarray:
    """Triangular grid on the 3-class probability simplex: r(r+1)/2 points."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = []
    m = resolution - 1
    for i in range(resolution):
        for j in range(resolution - i):
            k = m - i - j
            pts.append((i / m, j / m, k / m))
    return np.array(pts)


def simplex_surface(
    data: LabeledDataset,
    x,
    arch: ArchSpec,
    resolution: int,
    repeats: int,
    cfg: TrainConfig,
):
    """Best achievable training likelihood when the prediction at `x` is pinned.

    For every simplex grid point, trains `repeats` models on the combined
    loss (mean training cross-entropy plus cross-entropy at `x` against the
    pinned target) and records the median per-sample training likelihood
    exp(-mean CE).  Non-convergent runs are excluded and counted.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    targets = simplex_grid(resolution)
    rows = []
    for ti, target in enumerate(targets):
        t_row = target.reshape(1, -1)

        def pin_loss(tape: Tape, leaves):
            out = forward_graph(tape, leaves, x, arch)
            logp = tape.forward_op("log_softmax", out)
            picked = tape.forward_op("mul", logp, tape.constant(t_row))
            return tape.forward_op("scalar_mul", tape.forward_op("reduce_sum", picked), -1.0)

        likes = []
        failures = 0
        for rep in range(repeats):
            run_cfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed + 1000 * ti + rep)
            try:
                params = train_with_point_loss(data, arch, run_cfg, extra_loss=pin_loss)
            except TrainingDiverged:
                failures += 1
                continue
            likes.append(np.exp(-mean_train_loss(params, data)))
        med = float(np.median(likes)) if likes else float("nan")
        rows.append({"target": tuple(float(v) for v in target), "median_likelihood": med, "failures": failures})
    return rows
