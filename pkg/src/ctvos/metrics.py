"""Region (J), boundary (F) and overall (G) segmentation scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def j_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _check(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor in the background or on the frame edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def tolerance_radius(height: int, width: int, fraction: float = 0.008) -> int:
    return int(math.ceil(fraction * math.hypot(height, width)))


def f_measure(pred: np.ndarray, gt: np.ndarray, radius: float | None = None) -> float:
    """Boundary F-score with a Euclidean match tolerance of ``radius`` pixels."""
    pred, gt = _check(pred, gt)
    if radius is None:
        radius = tolerance_radius(*pred.shape)
    pb, gb = boundary(pred), boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float(np.mean(dist_to_gt[pb] <= radius))
    recall = float(np.mean(dist_to_pred[gb] <= radius))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    """Per-(sequence, object) means and their overall averages."""

    rows: list[tuple[str, int, float, float]] = field(default_factory=list)

    @property
    def j_mean(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else 0.0

    @property
    def f_mean(self) -> float:
        return float(np.mean([r[3] for r in self.rows])) if self.rows else 0.0

    @property
    def g(self) -> float:
        return (self.j_mean + self.f_mean) / 2

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def to_tsv(self) -> str:
        lines = ["sequence\tobject\tJ\tF\tG"]
        for seq, obj, j, f in self.rows:
            lines.append(f"{seq}\t{obj}\t{j:.6f}\t{f:.6f}\t{(j + f) / 2:.6f}")
        lines.append(f"MEAN\t-\t{self.j_mean:.6f}\t{self.f_mean:.6f}\t{self.g:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_sequence(pred: np.ndarray, gt: np.ndarray, sequence: str = "",
                      object_ids: Sequence[int] | None = None,
                      radius: float | None = None) -> EvalReport:
    """Score ``pred`` against ``gt``, both ``[K,T,H,W]``; frame 0 is skipped."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k, t = gt.shape[:2]
    ids = list(object_ids) if object_ids is not None else list(range(1, k + 1))
    report = EvalReport()
    for i in range(k):
        js = [j_measure(pred[i, f], gt[i, f]) for f in range(1, t)]
        fs = [f_measure(pred[i, f], gt[i, f], radius) for f in range(1, t)]
        report.rows.append((sequence, ids[i], float(np.mean(js)), float(np.mean(fs))))
    return report


def evaluate_corpus(results: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> EvalReport:
    report = EvalReport()
    for seq in sorted(results):
        pred, gt = results[seq]
        report.extend(evaluate_sequence(pred, gt, seq))
    return report
