"""K-means clustering and label-agreement metrics.

The k-means here is deliberately small and deterministic: k-means++ seeding
from a supplied stream, Lloyd iterations with a relative inertia tolerance,
and empty clusters reseeded to the farthest point.  Label metrics align
predicted and true classes with an optimal one-to-one matching before
scoring, so they are invariant to relabeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .errors import ClusterError
from .grid import Rng


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,) int
    inertia: float


def _pairwise_sq(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared distances via expansion; clip negatives from rounding
    d2 = (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _weighted_pick(rng: Rng, weights: np.ndarray) -> int:
    total = float(weights.sum())
    if total <= 0:
        # all points coincide with centers; any index works
        return int(rng.integers(0, weights.size))
    r = rng.uniform() * total
    return int(np.searchsorted(np.cumsum(weights), r, side="right").clip(0, weights.size - 1))


def kmeans(
    points: np.ndarray,
    k: int,
    rng: Rng,
    max_iters: int = 100,
    rel_tol: float = 1e-4,
) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding.

    Stops when the relative inertia improvement drops below ``rel_tol`` or
    after ``max_iters`` assignment/update rounds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ClusterError(f"points must be (n, d), got shape {pts.shape}")
    n = pts.shape[0]
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    if n < k:
        raise ClusterError(f"cannot form {k} clusters from {n} points")

    centers = np.empty((k, pts.shape[1]), dtype=np.float64)
    centers[0] = pts[int(rng.integers(0, n))]
    for j in range(1, k):
        d2 = _pairwise_sq(pts, centers[:j]).min(axis=1)
        centers[j] = pts[_weighted_pick(rng, d2)]

    labels = np.zeros(n, dtype=np.int64)
    prev_inertia = np.inf
    inertia = np.inf
    for _ in range(max_iters):
        d2 = _pairwise_sq(pts, centers)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        for j in range(k):
            member = labels == j
            if member.any():
                centers[j] = pts[member].mean(axis=0)
            else:
                farthest = int(d2.min(axis=1).argmax())
                centers[j] = pts[farthest]
        if np.isfinite(prev_inertia) and prev_inertia - inertia <= rel_tol * max(
            prev_inertia, 1e-300
        ):
            break
        prev_inertia = inertia

    d2 = _pairwise_sq(pts, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centers=centers, labels=labels, inertia=inertia)


@dataclass(frozen=True)
class LabelAgreement:
    accuracy: float
    mean_iou: float
    macro_f1: float
    mapping: dict[int, int]  # predicted class -> matched true class


def evaluate_labels(
    predicted: list[np.ndarray], truth: list[np.ndarray]
) -> LabelAgreement:
    """Score predicted label maps against ground truth, up to relabeling.

    Predicted classes are matched one-to-one to true classes by maximizing
    total pixel overlap (optimal assignment on the confusion matrix), then
    accuracy, mean IoU, and macro F1 are computed over the union of classes
    present in either side after mapping.  Class 0 participates like any
    other class.
    """
    if len(predicted) != len(truth):
        raise ClusterError("predicted and truth lists differ in length")
    if not predicted:
        raise ClusterError("no label maps to evaluate")
    pred_flat = np.concatenate([np.asarray(p).ravel() for p in predicted])
    true_flat = np.concatenate([np.asarray(t).ravel() for t in truth])
    if pred_flat.shape != true_flat.shape:
        raise ClusterError("predicted and truth label maps differ in size")
    n_true = int(true_flat.max()) + 1
    n_pred = int(pred_flat.max()) + 1
    side = max(n_true, n_pred)
    confusion = np.zeros((side, side), dtype=np.int64)
    np.add.at(confusion, (true_flat.astype(np.int64), pred_flat.astype(np.int64)), 1)

    rows, cols = scipy.optimize.linear_sum_assignment(confusion, maximize=True)
    mapping = {int(c): int(r) for r, c in zip(rows, cols)}
    remapped = np.array([mapping[i] for i in range(side)], dtype=np.int64)[pred_flat]

    total = true_flat.size
    accuracy = float((remapped == true_flat).sum() / total)

    classes = sorted(set(np.unique(true_flat)) | set(np.unique(remapped)))
    ious = []
    f1s = []
    for c in classes:
        tp = int(((remapped == c) & (true_flat == c)).sum())
        fp = int(((remapped == c) & (true_flat != c)).sum())
        fn = int(((remapped != c) & (true_flat == c)).sum())
        denom = tp + fp + fn
        ious.append(tp / denom if denom else 1.0)
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0)
    return LabelAgreement(
        accuracy=accuracy,
        mean_iou=float(np.mean(ious)),
        macro_f1=float(np.mean(f1s)),
        mapping=mapping,
    )
