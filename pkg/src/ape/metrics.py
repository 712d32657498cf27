"""Evaluation metrics: COCO-style AP, semantic mIoU, and panoptic quality.

Everything here is plain numpy over explicit detection/annotation lists,
independent of the model and the torch loss path, so these functions also
serve as the second route when cross-checking training-side box math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IOU_THRESHOLDS = np.arange(0.50, 0.96, 0.05)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class Detection:
    image_id: int
    category: int
    score: float
    box: tuple = None  # (x0, y0, x1, y1)
    mask: np.ndarray = None


@dataclass
class GroundTruthObject:
    image_id: int
    category: int
    box: tuple = None
    mask: np.ndarray = None


def box_iou_xyxy(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    if inter <= 0:
        return 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


def _pair_iou(det: Detection, gt: GroundTruthObject, use_mask: bool) -> float:
    if use_mask:
        return mask_iou(det.mask, gt.mask)
    return box_iou_xyxy(det.box, gt.box)


def _category_pr(dets, gts, threshold: float, use_mask: bool):
    """Greedy score-then-IoU matching for one category at one threshold."""
    dets = sorted(dets, key=lambda d: -d.score)
    gt_by_image = {}
    for i, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(i)
    matched = set()
    tp = np.zeros(len(dets))
    for k, det in enumerate(dets):
        best_iou, best_gt = 0.0, None
        for i in gt_by_image.get(det.image_id, ()):
            if i in matched:
                continue
            iou = _pair_iou(det, gts[i], use_mask)
            if iou >= threshold and iou > best_iou:
                best_iou, best_gt = iou, i
        if best_gt is not None:
            matched.add(best_gt)
            tp[k] = 1.0
    return tp, len(gts)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # 101-point interpolation: p(r) = max precision at recall >= r
    interp = np.zeros_like(RECALL_POINTS)
    for i, r in enumerate(RECALL_POINTS):
        mask = recall >= r - 1e-12
        interp[i] = precision[mask].max() if mask.any() else 0.0
    return float(interp.mean())


def coco_ap(dets, gts, iou_thresholds=None, use_mask: bool = False) -> float:
    """AP averaged over IoU thresholds and over categories with ground truth."""
    if iou_thresholds is None:
        iou_thresholds = IOU_THRESHOLDS
    iou_thresholds = np.atleast_1d(iou_thresholds)
    categories = sorted({gt.category for gt in gts})
    if not categories:
        return 0.0
    per_category = []
    for category in categories:
        cat_dets = [d for d in dets if d.category == category]
        cat_gts = [g for g in gts if g.category == category]
        aps = []
        for threshold in iou_thresholds:
            tp, n_gt = _category_pr(cat_dets, cat_gts, float(threshold), use_mask)
            aps.append(_interpolated_ap(tp, n_gt))
        per_category.append(float(np.mean(aps)))
    return float(np.mean(per_category))


def average_recall(dets, gts, iou_thresholds=None, use_mask: bool = False) -> float:
    """Recall averaged over IoU thresholds and categories (score order kept)."""
    if iou_thresholds is None:
        iou_thresholds = IOU_THRESHOLDS
    iou_thresholds = np.atleast_1d(iou_thresholds)
    categories = sorted({gt.category for gt in gts})
    if not categories:
        return 0.0
    per_category = []
    for category in categories:
        cat_dets = [d for d in dets if d.category == category]
        cat_gts = [g for g in gts if g.category == category]
        recalls = []
        for threshold in iou_thresholds:
            tp, n_gt = _category_pr(cat_dets, cat_gts, float(threshold), use_mask)
            recalls.append(tp.sum() / n_gt if n_gt else 0.0)
        per_category.append(float(np.mean(recalls)))
    return float(np.mean(per_category))


# ---------------------------------------------------------------------------
# semantic segmentation


class MIoUAccumulator:
    """Dataset-level per-class intersection/union tallies."""

    def __init__(self, num_classes: int):
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> None:
        if pred_labels.shape != gt_labels.shape:
            raise ValueError("label grids must share a shape")
        for c in range(len(self.inter)):
            p = pred_labels == c
            g = gt_labels == c
            self.inter[c] += int((p & g).sum())
            self.union[c] += int((p | g).sum())

    def compute(self) -> float:
        present = self.union > 0
        if not present.any():
            return 0.0
        return float((self.inter[present] / self.union[present]).mean())


def miou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in either map."""
    acc = MIoUAccumulator(num_classes)
    acc.update(pred_labels, gt_labels)
    return acc.compute()


# ---------------------------------------------------------------------------
# panoptic quality


class PQAccumulator:
    """Pooled PQ statistics; segments match at IoU > 0.5 (unique by theorem)."""

    def __init__(self):
        self.iou_sum = {}
        self.tp = {}
        self.fp = {}
        self.fn = {}

    def _bump(self, table, category, value=1.0):
        table[category] = table.get(category, 0.0) + value

    def update(self, pred, gt) -> None:
        """Both arguments are equalize.PanopticMap instances."""
        pred_masks = {
            sid: pred.segment_ids == sid for sid in pred.segments if sid != 0
        }
        gt_masks = {sid: gt.segment_ids == sid for sid in gt.segments if sid != 0}
        matched_pred, matched_gt = set(), set()
        for gid, gmask in gt_masks.items():
            g_cat = gt.segments[gid]["category"]
            for pid, pmask in pred_masks.items():
                if pid in matched_pred:
                    continue
                if pred.segments[pid]["category"] != g_cat:
                    continue
                iou = mask_iou(pmask, gmask)
                if iou > 0.5:
                    matched_pred.add(pid)
                    matched_gt.add(gid)
                    self._bump(self.iou_sum, g_cat, iou)
                    self._bump(self.tp, g_cat)
                    break
        for pid in pred_masks:
            if pid not in matched_pred:
                self._bump(self.fp, pred.segments[pid]["category"])
        for gid in gt_masks:
            if gid not in matched_gt:
                self._bump(self.fn, gt.segments[gid]["category"])

    def compute(self, thing_flags: dict = None) -> dict:
        def pooled(categories):
            iou = sum(self.iou_sum.get(c, 0.0) for c in categories)
            tp = sum(self.tp.get(c, 0.0) for c in categories)
            fp = sum(self.fp.get(c, 0.0) for c in categories)
            fn = sum(self.fn.get(c, 0.0) for c in categories)
            denom = tp + 0.5 * fp + 0.5 * fn
            if denom == 0:
                return {"PQ": 0.0, "SQ": 0.0, "RQ": 0.0}
            return {
                "PQ": iou / denom,
                "SQ": iou / tp if tp else 0.0,
                "RQ": tp / denom,
            }

        categories = (
            set(self.iou_sum) | set(self.tp) | set(self.fp) | set(self.fn)
        )
        out = pooled(categories)
        if thing_flags is not None:
            things = {c for c in categories if thing_flags.get(c, True)}
            stuffs = categories - things
            for key, value in pooled(things).items():
                out[f"{key}_th"] = value
            for key, value in pooled(stuffs).items():
                out[f"{key}_st"] = value
        return out


def pq(pred, gt, thing_flags: dict = None) -> dict:
    acc = PQAccumulator()
    acc.update(pred, gt)
    return acc.compute(thing_flags)
