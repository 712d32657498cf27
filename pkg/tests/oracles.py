"""Independent reference implementations used as test oracles.

Everything here is deliberately written from scratch against the stated
definitions (flood fill, triple loops, corner arithmetic, exhaustive
matching, a phrase-grammar resolver) and shares no code path with the
library implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# connected components by explicit flood fill


def flood_fill_components(mask, connectivity=8):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    seen = np.zeros_like(mask)
    components = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            stack = [(y, x)]
            seen[y, x] = True
            cells = []
            while stack:
                cy, cx = stack.pop()
                cells.append((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            comp = np.zeros_like(mask)
            for cy, cx in cells:
                comp[cy, cx] = True
            components.append(comp)
    return components


# ---------------------------------------------------------------------------
# accumulation by triple loop


def accumulate_triple_loop(scores, masks):
    q, c = scores.shape
    _, h, w = masks.shape
    out = np.zeros((c, h, w))
    for i in range(q):
        for k in range(c):
            for y in range(h):
                out[k, y] += scores[i, k] * masks[i, y]
    return out


# ---------------------------------------------------------------------------
# box arithmetic on corners (python floats only)


def iou_corners(a, b):
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def giou_corners(a, b):
    iou = iou_corners(a, b)
    inter_x0, inter_y0 = max(a[0], b[0]), max(a[1], b[1])
    inter_x1, inter_y1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, inter_x1 - inter_x0) * max(0.0, inter_y1 - inter_y0)
    union = (
        (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    )
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return iou - (hull - union) / hull


def cxcywh_to_corners(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# ---------------------------------------------------------------------------
# assignment by the stated rule, brute force


def assign_by_rule(pred_boxes, gt_boxes, tau=0.5):
    """pred/gt boxes are cxcywh tuples; returns list query->target (-1 bg)."""
    q, t = len(pred_boxes), len(gt_boxes)
    table = [
        [iou_corners(cxcywh_to_corners(p), cxcywh_to_corners(g)) for g in gt_boxes]
        for p in pred_boxes
    ]
    assign = [-1] * q
    for i in range(q):
        best_j, best = -1, -1.0
        for j in range(t):
            if table[i][j] > best:
                best, best_j = table[i][j], j
        if best_j >= 0 and table[i][best_j] >= tau:
            assign[i] = best_j
    claimed = set()
    for j in range(t):
        if len(claimed) == q:
            break
        best_i, best = -1, -1.0
        for i in range(q):
            if i in claimed:
                continue
            if table[i][j] > best:
                best, best_i = table[i][j], i
        assign[best_i] = j
        claimed.add(best_i)
    return assign


# ---------------------------------------------------------------------------
# average precision by definition (independent greedy walk + interpolation)


def reference_ap(dets, gts, thresholds, use_mask=False):
    """dets: (image_id, category, score, box|mask); gts likewise sans score."""

    def pair_iou(d, g):
        if use_mask:
            a = {tuple(p) for p in np.argwhere(d[3])}
            b = {tuple(p) for p in np.argwhere(g[2])}
            union = len(a | b)
            return len(a & b) / union if union else 0.0
        return iou_corners(d[3], g[2])

    categories = sorted({g[1] for g in gts})
    if not categories:
        return 0.0
    per_cat = []
    for cat in categories:
        cat_dets = sorted([d for d in dets if d[1] == cat], key=lambda d: -d[2])
        cat_gts = [g for g in gts if g[1] == cat]
        aps = []
        for thr in thresholds:
            taken = set()
            flags = []
            for d in cat_dets:
                best, best_g = 0.0, None
                for gi, g in enumerate(cat_gts):
                    if gi in taken or g[0] != d[0]:
                        continue
                    iou = pair_iou(d, g)
                    if iou >= thr and iou > best:
                        best, best_g = iou, gi
                if best_g is None:
                    flags.append(0)
                else:
                    taken.add(best_g)
                    flags.append(1)
            n_gt = len(cat_gts)
            tp = 0
            points = []
            for k, flag in enumerate(flags):
                tp += flag
                points.append((tp / n_gt, tp / (k + 1)))
            ap = 0.0
            for r in [i / 100.0 for i in range(101)]:
                best_p = 0.0
                for rec, prec in points:
                    if rec >= r - 1e-12 and prec > best_p:
                        best_p = prec
                ap += best_p / 101.0
            aps.append(ap)
        per_cat.append(sum(aps) / len(aps))
    return sum(per_cat) / len(per_cat)


# ---------------------------------------------------------------------------
# panoptic quality from pixel sets


def reference_pq(pred_ids, pred_table, gt_ids, gt_table):
    """Segment grids + {id: (category, is_thing)} tables -> pooled PQ stats."""

    def pixel_sets(grid, table):
        out = {}
        for sid in table:
            cells = {tuple(p) for p in np.argwhere(np.asarray(grid) == sid)}
            if cells:
                out[sid] = cells
        return out

    preds = pixel_sets(pred_ids, pred_table)
    gts = pixel_sets(gt_ids, gt_table)
    matches = []
    for gid, gset in gts.items():
        for pid, pset in preds.items():
            if gt_table[gid][0] != pred_table[pid][0]:
                continue
            iou = len(gset & pset) / len(gset | pset)
            if iou > 0.5:
                matches.append((pid, gid, iou))
    matched_p = {m[0] for m in matches}
    matched_g = {m[1] for m in matches}
    assert len(matched_p) == len(matches) and len(matched_g) == len(matches), (
        "IoU>0.5 matches must be unique"
    )
    tp = len(matches)
    fp = len(preds) - tp
    fn = len(gts) - tp
    iou_sum = sum(m[2] for m in matches)
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return {"PQ": 0.0, "SQ": 0.0, "RQ": 0.0}
    return {
        "PQ": iou_sum / denom,
        "SQ": iou_sum / tp if tp else 0.0,
        "RQ": tp / denom,
    }


def reference_miou(pred, gt, num_classes):
    vals = []
    for c in range(num_classes):
        p = {tuple(x) for x in np.argwhere(np.asarray(pred) == c)}
        g = {tuple(x) for x in np.argwhere(np.asarray(gt) == c)}
        if not p and not g:
            continue
        vals.append(len(p & g) / len(p | g))
    return sum(vals) / len(vals) if vals else 0.0


# ---------------------------------------------------------------------------
# single-head attention by hand


def attention_by_hand(queries, keys, values):
    """Plain scaled dot-product attention with an independent softmax."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    d = queries.shape[-1]
    out = np.zeros((queries.shape[0], values.shape[-1]))
    for i, q in enumerate(queries):
        logits = [float(q @ k) / math.sqrt(d) for k in keys]
        m = max(logits)
        exps = [math.exp(l - m) for l in logits]
        z = sum(exps)
        weights = [e / z for e in exps]
        for w, v in zip(weights, values):
            out[i] += w * v
    return out


# ---------------------------------------------------------------------------
# phrase-grammar resolver (shares nothing with the generator)

_DIRS = {
    "leftmost": (0, min),
    "rightmost": (0, max),
    "topmost": (1, min),
    "bottommost": (1, max),
}
_RELS = {
    "left of": lambda c, a: c[0] < a[0] - 2,
    "right of": lambda c, a: c[0] > a[0] + 2,
    "above": lambda c, a: c[1] < a[1] - 2,
    "below": lambda c, a: c[1] > a[1] + 2,
}


def resolve_phrase(phrase, things):
    """things: list of (name, box); returns indices the phrase could mean."""

    def center(box):
        return ((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)

    assert phrase.startswith("the ")
    body = phrase[4:]
    for rel_word in _RELS:
        marker = f" {rel_word} the "
        if marker in body:
            subject, anchor_name = body.split(marker, 1)
            anchors = [i for i, (n, _) in enumerate(things) if n == anchor_name]
            if len(anchors) != 1:
                return []
            anchor_c = center(things[anchors[0]][1])
            rel = _RELS[rel_word]
            return [
                i
                for i, (n, b) in enumerate(things)
                if n == subject and rel(center(b), anchor_c)
            ]
    first = body.split(" ", 1)[0]
    if first in _DIRS:
        name = body.split(" ", 1)[1]
        axis, pick = _DIRS[first]
        group = [(i, center(b)) for i, (n, b) in enumerate(things) if n == name]
        if not group:
            return []
        best = pick(c[axis] for _, c in group)
        return [i for i, c in group if c[axis] == best]
    return [i for i, (n, _) in enumerate(things) if n == body]
