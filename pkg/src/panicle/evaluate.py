"""Counting metrics and instance-segmentation scoring.

Counting quality is MAE and R^2 over per-image totals.  Segmentation is
scored by aligning predicted and true instances one-to-one with the
Hungarian algorithm on IoU, thresholding matches at IoU 0.5, pooling
TP/FP/FN over the test set per operating point, and integrating the
monotone precision envelope over recall for average precision.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateInputError, ParameterError
from .instseg import FitnessParams, detect_superpixels, instance_pixel_sets, segment_instances

DEFAULT_ALPHA_GRID = (0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60)
DEFAULT_BETA_GRID = (0.6, 0.8, 1.0, 1.2, 1.4)
DEFAULT_IOU_THRESHOLD = 0.5


def mae(preds, truths) -> float:
    """Mean absolute error between paired count lists."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ParameterError("preds and truths must be equal-length non-empty lists")
    return float(np.mean(np.abs(p - t)))


def r_squared(preds, truths) -> float:
    """Coefficient of determination about the truth mean."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ParameterError("preds and truths must be equal-length lists of length >= 2")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateInputError("truths are all identical; R^2 is undefined")
    ss_res = float(np.sum((p - t) ** 2))
    return 1.0 - ss_res / ss_tot


def instance_iou(a, b) -> float:
    """Intersection over union of two pixel-index sets."""
    sa = a if isinstance(a, (set, frozenset)) else frozenset(a)
    sb = b if isinstance(b, (set, frozenset)) else frozenset(b)
    if not sa or not sb:
        raise ParameterError("instance pixel sets must be non-empty")
    inter = len(sa & sb)
    return inter / (len(sa) + len(sb) - inter)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one instance alignment: matched (pred, truth, iou) triples plus
    the unmatched IDs on each side.  Matched pairs always have IoU > 0."""

    pairs: tuple
    unmatched_pred: tuple
    unmatched_truth: tuple

    @property
    def total_iou(self) -> float:
        return float(sum(iou for _, _, iou in self.pairs))


def hungarian_match(pred_instances: dict, truth_instances: dict) -> MatchResult:
    """Max-total-IoU one-to-one matching; zero-IoU pairs stay unmatched."""
    pred_ids = sorted(pred_instances)
    truth_ids = sorted(truth_instances)
    if not pred_ids or not truth_ids:
        return MatchResult((), tuple(pred_ids), tuple(truth_ids))
    iou = np.zeros((len(pred_ids), len(truth_ids)))
    for i, pid in enumerate(pred_ids):
        ps = pred_instances[pid]
        for j, tid in enumerate(truth_ids):
            ts = truth_instances[tid]
            inter = len(ps & ts)
            if inter:
                iou[i, j] = inter / (len(ps) + len(ts) - inter)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    pairs = []
    matched_p, matched_t = set(), set()
    for i, j in zip(rows, cols):
        if iou[i, j] > 0.0:
            pairs.append((pred_ids[i], truth_ids[j], float(iou[i, j])))
            matched_p.add(pred_ids[i])
            matched_t.add(truth_ids[j])
    return MatchResult(
        tuple(pairs),
        tuple(p for p in pred_ids if p not in matched_p),
        tuple(t for t in truth_ids if t not in matched_t),
    )


def match_counts(match: MatchResult, iou_threshold: float) -> tuple[int, int, int]:
    """(tp, fp, fn) with matches below the IoU threshold counted as both FP and FN."""
    tp = sum(1 for _, _, iou in match.pairs if iou >= iou_threshold)
    weak = len(match.pairs) - tp
    fp = weak + len(match.unmatched_pred)
    fn = weak + len(match.unmatched_truth)
    return tp, fp, fn


def average_precision(recalls, precisions) -> float:
    """Area under the monotone non-increasing precision envelope over recall."""
    r = np.asarray(recalls, dtype=np.float64)
    p = np.asarray(precisions, dtype=np.float64)
    if r.size == 0:
        return 0.0
    order = np.argsort(r, kind="stable")
    r = r[order]
    p = p[order]
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    prev = np.concatenate([[0.0], r[:-1]])
    return float(np.sum((r - prev) * envelope))


def average_precision_scan(recalls, precisions) -> float:
    """Reference AP: explicit max-over-suffix envelope, quadratic scan."""
    pts = sorted(zip(np.asarray(recalls, dtype=np.float64), np.asarray(precisions, dtype=np.float64)))
    ap = 0.0
    prev = 0.0
    for i, (r, _) in enumerate(pts):
        envelope = max(pp for _, pp in pts[i:])
        ap += (r - prev) * envelope
        prev = r
    return ap


@dataclass(frozen=True)
class SegEvalCase:
    """Everything needed to score one image at any (alpha, beta) point."""

    image: object
    spmap: object
    detection: object  # full-resolution detection probability map
    density: object  # full-resolution region density map
    truth: dict  # truth instance ID -> pixel-index set


@dataclass(frozen=True)
class PRPoint:
    alpha: float
    beta: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def pr_curve_and_map(
    cases: list,
    alpha_grid=DEFAULT_ALPHA_GRID,
    beta_grid=DEFAULT_BETA_GRID,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    params: FitnessParams | None = None,
) -> tuple[list, float]:
    """Sweep the (alpha, beta) grid, pool TP/FP/FN over images per point, and
    integrate AP over the resulting PR points.  Single class, so mAP == AP."""
    base = params or FitnessParams()
    if not any(case.truth for case in cases):
        raise DegenerateInputError("no truth instances in any evaluation image")
    points = []
    for alpha in alpha_grid:
        for beta in beta_grid:
            p = FitnessParams(gamma=base.gamma, delta=base.delta, beta=beta)
            tp = fp = fn = 0
            for case in cases:
                detected = detect_superpixels(case.detection, case.spmap, alpha)
                assignment = segment_instances(detected, case.image, case.spmap, case.density, p)
                preds = instance_pixel_sets(assignment, case.spmap)
                match = hungarian_match(preds, case.truth)
                dtp, dfp, dfn = match_counts(match, iou_threshold)
                tp += dtp
                fp += dfp
                fn += dfn
            points.append(PRPoint(alpha=alpha, beta=beta, tp=tp, fp=fp, fn=fn))
    recalls = [pt.recall for pt in points]
    precisions = [pt.precision for pt in points]
    return points, average_precision(recalls, precisions)


def save_pr_csv(path, points: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "tp", "fp", "fn", "precision", "recall"])
        for pt in points:
            writer.writerow(
                [pt.alpha, pt.beta, pt.tp, pt.fp, pt.fn, f"{pt.precision:.6f}", f"{pt.recall:.6f}"]
            )


def save_map_summary(path, map_value: float, iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> None:
    with open(path, "w") as fh:
        json.dump({"map": map_value, "iou_threshold": iou_threshold}, fh, indent=1)
        fh.write("\n")


def save_count_metrics_csv(path, rows: list) -> None:
    """Rows of (segment_id, truth, raw, tta, isotonic) per-image counts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "truth", "raw", "tta", "isotonic"])
        for seg, truth, raw, tta, iso in rows:
            writer.writerow([seg, f"{truth:.6f}", f"{raw:.6f}", f"{tta:.6f}", f"{iso:.6f}"])
