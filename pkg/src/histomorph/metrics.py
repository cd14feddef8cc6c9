"""Evaluation metrics: Dice, panoptic quality, accuracy, balanced accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CELL_TYPES = (1, 2, 3, 4, 5, 6)
MIN_INSTANCE_PIXELS = 5


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    if np.issubdtype(mask.dtype, np.floating):
        return mask >= threshold
    return mask > 0


def dice_counts(pred_mask, gt_mask) -> tuple[int, int]:
    a, b = binarize(pred_mask), binarize(gt_mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return 2 * int(np.logical_and(a, b).sum()), int(a.sum()) + int(b.sum())


def dice_score(pred_mask, gt_mask) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both masks are empty."""
    num, den = dice_counts(pred_mask, gt_mask)
    return 1.0 if den == 0 else num / den


_EIGHT = np.ones((3, 3), dtype=bool)


def extract_instances(mask, min_size: int = MIN_INSTANCE_PIXELS) -> np.ndarray:
    """8-connected components labelled 1..K, dropping components under ``min_size`` px."""
    labels, n = ndimage.label(binarize(mask), structure=_EIGHT)
    if n == 0:
        return labels.astype(np.int32)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[keep] = np.arange(1, keep.sum() + 1, dtype=np.int32)
    return lut[labels]


def as_instance_map(instances) -> np.ndarray:
    """Accept an H x W label map or a K x H x W stack of boolean masks."""
    arr = np.asarray(instances)
    if arr.ndim == 2:
        if arr.dtype == bool:
            arr = arr.astype(np.int32)
        if (arr < 0).any():
            raise ValueError("instance ids must be non-negative")
        return arr.astype(np.int64)
    if arr.ndim == 3:
        stack = arr.astype(bool)
        if (stack.sum(axis=0) > 1).any():
            raise ValueError("overlapping instances within one map")
        out = np.zeros(stack.shape[1:], dtype=np.int64)
        for k, m in enumerate(stack, start=1):
            out[m] = k
        return out
    raise ValueError(f"instance map must be 2-D or 3-D, got {arr.ndim}-D")


@dataclass
class InstanceMatchResult:
    pairs: list = field(default_factory=list)  # (gt_id, pred_id, iou), sorted by gt_id
    unmatched_gt: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)


def match_instances(pred, gt) -> InstanceMatchResult:
    """Pair instances with IoU > 0.5; such pairs are unique, so no assignment search."""
    pred, gt = as_instance_map(pred), as_instance_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    gt_ids = np.unique(gt)
    gt_ids = gt_ids[gt_ids > 0]
    pred_ids = np.unique(pred)
    pred_ids = pred_ids[pred_ids > 0]
    gt_area = dict(zip(*np.unique(gt[gt > 0], return_counts=True)))
    pred_area = dict(zip(*np.unique(pred[pred > 0], return_counts=True)))

    both = (gt > 0) & (pred > 0)
    pairs_arr, inter = np.unique(np.stack([gt[both], pred[both]]), axis=1, return_counts=True)
    pairs = []
    for (g, p), n in zip(pairs_arr.T, inter):
        union = gt_area[g] + pred_area[p] - n
        iou = float(n) / float(union)
        if iou > 0.5:
            pairs.append((int(g), int(p), iou))
    pairs.sort()
    matched_g = {g for g, _, _ in pairs}
    matched_p = {p for _, p, _ in pairs}
    return InstanceMatchResult(
        pairs,
        [int(g) for g in gt_ids if g not in matched_g],
        [int(p) for p in pred_ids if p not in matched_p],
    )


@dataclass
class PQStats:
    """Additive panoptic-quality counts; sum across images, then read ``pq``."""

    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "PQStats") -> "PQStats":
        return PQStats(self.iou_sum + other.iou_sum, self.tp + other.tp,
                       self.fp + other.fp, self.fn + other.fn)

    @property
    def pq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return float("nan") if den == 0 else self.iou_sum / den

    @classmethod
    def from_match(cls, m: InstanceMatchResult) -> "PQStats":
        iou_sum = 0.0
        for _, _, iou in m.pairs:
            iou_sum += iou
        return cls(iou_sum, len(m.pairs), len(m.unmatched_pred), len(m.unmatched_gt))


def _restrict(inst: np.ndarray, types: dict, t: int) -> np.ndarray:
    keep = [i for i, ty in types.items() if ty == t]
    return np.where(np.isin(inst, keep), inst, 0)


def pq_stats(pred, gt, pred_types=None, gt_types=None) -> dict:
    """Binary and per-type PQStats for one image."""
    pred, gt = as_instance_map(pred), as_instance_map(gt)
    out = {"binary": PQStats.from_match(match_instances(pred, gt)), "per_class": {}}
    if pred_types is not None and gt_types is not None:
        for t in CELL_TYPES:
            p_t, g_t = _restrict(pred, pred_types, t), _restrict(gt, gt_types, t)
            out["per_class"][t] = PQStats.from_match(match_instances(p_t, g_t))
    return out


def summarize_pq(binary: PQStats, per_class: dict) -> dict:
    per = {t: s.pq for t, s in per_class.items() if s.tp + s.fp + s.fn > 0}
    multi = float(np.mean(list(per.values()))) if per else float("nan")
    return {"binary_pq": binary.pq, "multi_pq": multi, "per_class": per}


def panoptic_quality(pred, gt, pred_types=None, gt_types=None) -> dict:
    """Binary PQ, multi PQ (mean over the six cell types present in either map) and per-type PQ.

    ``pred_types`` / ``gt_types`` map instance id -> cell type 1..6.
    """
    s = pq_stats(pred, gt, pred_types, gt_types)
    return summarize_pq(s["binary"], s["per_class"])


def instance_types(instances, type_map, valid=CELL_TYPES) -> dict:
    """Majority per-pixel type inside each instance; instances with no valid type are omitted."""
    instances = np.asarray(instances)
    type_map = np.asarray(type_map)
    out = {}
    for i in np.unique(instances):
        if i == 0:
            continue
        vals = type_map[instances == i]
        vals = vals[np.isin(vals, valid)]
        if vals.size:
            counts = np.bincount(vals.astype(np.int64), minlength=max(valid) + 1)
            out[int(i)] = int(np.argmax(counts))
    return out


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if labels.size == 0:
        raise ValueError("empty input")
    return float(np.mean(preds == labels))


def per_category_recall(preds, labels) -> dict:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return {c.item(): float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)}


def balanced_accuracy(preds, labels) -> float:
    """Mean recall over the categories present in ``labels``."""
    accuracy(preds, labels)  # shape/empty checks
    return float(np.mean(list(per_category_recall(preds, labels).values())))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm
