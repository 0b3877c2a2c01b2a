"""Evaluation metrics: AUROC, average precision, per-region overlap, mIoU, NoC.

All functions are pure numpy and operate on flat score/label arrays or 2-D
maps. Rank-based metrics are exact (ties handled explicitly); the region
overlap score integrates a right-continuous step curve over the false
positive rate axis.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = [
    "auroc",
    "average_precision",
    "pro",
    "miou",
    "iou",
    "noc_from_trace",
    "aggregate_noc",
    "format_iis_table",
    "format_ad_table",
]

# 8-connectivity for ground-truth region labelling
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals the probability that a random positive outranks a random
    negative, with ties counting 1/2. Raises ValueError unless both
    classes are present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # midranks: average rank within each tie group, 1-based
    ranks = np.empty(scores.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum_pos = ranks[labels].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve by step-wise summation.

    Thresholds sweep the distinct score values in descending order; equal
    scores enter as a single step. Raises ValueError when no positives
    exist.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = labels[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    pred = np.arange(1, scores.size + 1, dtype=np.float64)
    # keep only the last index of each tie group (threshold = that score)
    group_end = np.append(sorted_scores[1:] != sorted_scores[:-1], True)
    tp = tp[group_end]
    pred = pred[group_end]
    precision = tp / pred
    recall = tp / n_pos
    recall_prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - recall_prev) * precision))


def pro(score_map, gt_mask, fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over false positive rate.

    For each threshold the per-region overlap is the mean, over 8-connected
    ground-truth components, of the fraction of component pixels predicted
    anomalous. The (fpr, overlap) operating points, both non-decreasing as
    the threshold drops, form a right-continuous step curve anchored at
    (0, 0); the curve is integrated up to ``fpr_limit`` and normalized by it.
    """
    score_map = np.asarray(score_map, dtype=np.float64)
    gt_mask = np.asarray(gt_mask).astype(bool)
    if score_map.shape != gt_mask.shape:
        raise ValueError("score map and ground truth shapes differ")
    if not (0.0 < fpr_limit <= 1.0):
        raise ValueError("fpr_limit must lie in (0, 1]")
    components, n_regions = ndimage.label(gt_mask, structure=_STRUCTURE_8)
    if n_regions == 0:
        raise ValueError("ground truth contains no anomalous region")
    n_neg = int((~gt_mask).sum())

    # Sort thresholds descending; at threshold t the prediction is score >= t.
    flat_scores = score_map.ravel()
    order = np.argsort(-flat_scores, kind="mergesort")
    sorted_scores = flat_scores[order]
    flat_labels = components.ravel()[order]
    group_end = np.append(sorted_scores[1:] != sorted_scores[:-1], True)

    region_sizes = np.bincount(components.ravel(), minlength=n_regions + 1)[1:]
    # per-threshold-group hit counts, cumulated as the prediction grows
    n_groups = int(group_end.sum())
    group_idx = np.concatenate(([0], np.cumsum(group_end)[:-1]))
    counts = np.zeros((n_groups, n_regions + 1), dtype=np.float64)
    np.add.at(counts, (group_idx, flat_labels), 1.0)
    cum = np.cumsum(counts, axis=0)

    overlaps = (cum[:, 1:] / region_sizes).mean(axis=1)
    if n_neg == 0:
        fprs = np.ones(n_groups)
    else:
        fprs = cum[:, 0] / n_neg

    # step integration of overlap(fpr) with anchor (0, 0) below the first point
    fprs = np.concatenate(([0.0], fprs))
    overlaps = np.concatenate(([0.0], overlaps))
    widths = np.minimum(np.append(fprs[1:], 1.0), fpr_limit) - np.minimum(fprs, fpr_limit)
    area = float(np.sum(overlaps * np.clip(widths, 0.0, None)))
    return area / fpr_limit


def iou(prediction, gt) -> float:
    """Intersection over union of two binary masks; empty union counts as 1."""
    prediction = np.asarray(prediction).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if prediction.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    union = np.logical_or(prediction, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(prediction, gt).sum() / union)


def miou(predictions, gts) -> float:
    """Mean IoU over paired binarized masks."""
    predictions = list(predictions)
    gts = list(gts)
    if len(predictions) != len(gts):
        raise ValueError("prediction and ground truth counts differ")
    if not predictions:
        raise ValueError("miou needs at least one pair")
    return float(np.mean([iou(p, g) for p, g in zip(predictions, gts)]))


def noc_from_trace(trace, target: float, cap: int) -> int:
    """First 1-based click index whose IoU reaches ``target``, else ``cap``."""
    for i, value in enumerate(trace, start=1):
        if value >= target:
            return i
    return cap


def aggregate_noc(traces, target: float, cap: int) -> tuple[float, float]:
    """Mean number-of-clicks and failure fraction over per-sample IoU traces."""
    traces = list(traces)
    if not traces:
        raise ValueError("aggregate_noc needs at least one trace")
    nocs = []
    failed = 0
    for trace in traces:
        if not any(v >= target for v in trace):
            failed += 1
            nocs.append(cap)
        else:
            nocs.append(noc_from_trace(trace, target, cap))
    return float(np.mean(nocs)), failed / len(traces)


def _quad(values) -> str:
    return "/".join(f"{100.0 * v:.1f}" for v in values)


def format_iis_table(rows, budgets=(2, 3, 5)) -> str:
    """Interactive-labeling results table.

    ``rows`` maps a method/category name to a dict with one
    (ap, pro, pixel_auroc, miou) quadruple per click budget plus a
    ``noc`` value, e.g. ``{2: (...), 3: (...), 5: (...), "noc": 5.6}``.
    """
    header = ["method"] + [f"{k}-click" for k in budgets] + ["NoC80"]
    lines = ["\t".join(header)]
    for name, cells in rows.items():
        line = [str(name)]
        for k in budgets:
            line.append(_quad(cells[k]))
        line.append(f"{cells['noc']:.1f}")
        lines.append("\t".join(line))
    return "\n".join(lines) + "\n"


def format_ad_table(rows) -> str:
    """Detection results table with AP/PRO/P-AUROC/I-AUROC columns.

    ``rows`` maps a method/category name to a
    (ap, pro, pixel_auroc, image_auroc) tuple in [0, 1].
    """
    lines = ["\t".join(["method", "AP", "PRO", "P-AUROC", "I-AUROC"])]
    for name, values in rows.items():
        cells = [str(name)] + [f"{100.0 * v:.1f}" for v in values]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
