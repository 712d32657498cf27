"""Thing-stuff equalization.

Stuff annotations arrive as class-level masks that may cover several
disconnected regions.  For training we split every stuff mask into its
connected components and treat each component as a standalone proxy
instance, so the model learns one granularity for everything.  At
inference the instance-level predictions are projected back to class-level
outputs: per-class soft masks by score-weighted accumulation, hard stuff
masks by union, and a non-overlapping panoptic map by greedy painting.

All operations here are pure ndarray -> ndarray transforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

THING = "thing"
STUFF_COMPONENT = "stuff-component"

_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


@dataclass
class ProxyInstance:
    """One connected region promoted to an instance-level training target."""

    mask: np.ndarray
    box: tuple  # (x0, y0, x1, y1) pixel coords, x1/y1 exclusive
    category: int
    origin: str = STUFF_COMPONENT


@dataclass
class SemanticMap:
    accumulated: np.ndarray  # (c, h, w) soft per-class masks
    labels: np.ndarray  # (h, w) argmax class ids, -1 = void


@dataclass
class PanopticMap:
    segment_ids: np.ndarray  # (h, w) int, 0 = void
    segments: dict = field(default_factory=dict)  # id -> {"category", "is_thing"}


def tight_box(mask: np.ndarray) -> tuple:
    """Minimal axis-aligned pixel rectangle containing all true cells."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("tight_box of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def decompose_stuff(
    mask: np.ndarray, category: int = 0, connectivity: int = 8, min_area: int = 16
) -> list:
    """Split a binary stuff mask into per-component proxy instances.

    Components smaller than ``min_area`` are dropped; the kept components
    are pairwise disjoint and their union is contained in the input mask.
    """
    if connectivity == 4:
        structure = _STRUCTURE_4
    elif connectivity == 8:
        structure = _STRUCTURE_8
    else:
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    labeled, count = ndimage.label(mask, structure=structure)
    out = []
    for comp in range(1, count + 1):
        comp_mask = labeled == comp
        if int(comp_mask.sum()) < min_area:
            continue
        out.append(
            ProxyInstance(
                mask=comp_mask,
                box=tight_box(comp_mask),
                category=category,
                origin=STUFF_COMPONENT,
            )
        )
    return out


def accumulate(
    scores: np.ndarray, masks: np.ndarray, void_threshold: float = 0.25
) -> SemanticMap:
    """Score-weighted sum of query masks into per-class soft masks.

    accumulated[c] = sum_i scores[i, c] * masks[i]; the label map takes the
    per-pixel argmax, or void (-1) where even the best class stays below
    ``void_threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if scores.ndim != 2 or masks.ndim != 3 or scores.shape[0] != masks.shape[0]:
        raise ValueError(
            f"shape mismatch: scores {scores.shape} vs masks {masks.shape}"
        )
    accumulated = np.einsum("qc,qhw->chw", scores, masks)
    if accumulated.shape[0] == 0:
        labels = -np.ones(masks.shape[1:], dtype=np.int64)
    else:
        labels = accumulated.argmax(axis=0).astype(np.int64)
        labels[accumulated.max(axis=0) < void_threshold] = -1
    return SemanticMap(accumulated=accumulated, labels=labels)


def join_stuff_predictions(dets, threshold: float = 0.5) -> dict:
    """Union all binarized predictions of the same category.

    ``dets`` is an iterable of (category, mask, score); the score is
    ignored here because joining is a set union, not a weighted sum.
    """
    joined = {}
    for category, mask, _score in dets:
        binary = np.asarray(mask) > threshold
        if category in joined:
            joined[category] |= binary
        else:
            joined[category] = binary.copy()
    return joined


def panoptic_merge(
    dets,
    semantic: SemanticMap,
    thing_flags: dict,
    keep_fraction: float = 0.5,
    mask_threshold: float = 0.5,
) -> PanopticMap:
    """Resolve overlapping instance predictions into one panoptic map.

    Greedy paint-by-score: detections sorted by descending score claim
    unpainted pixels; a detection whose surviving area falls below
    ``keep_fraction`` of its full mask is dropped entirely.  Pixels left
    void afterwards are filled from the semantic argmax, stuff classes
    only, each forming a single segment.
    """
    dets = sorted(dets, key=lambda d: -d[2])
    h, w = semantic.labels.shape
    segment_ids = np.zeros((h, w), dtype=np.int64)
    segments = {}
    next_id = 1
    for category, mask, _score in dets:
        binary = np.asarray(mask) > mask_threshold
        area = int(binary.sum())
        if area == 0:
            continue
        claim = binary & (segment_ids == 0)
        if int(claim.sum()) < keep_fraction * area:
            continue
        segment_ids[claim] = next_id
        segments[next_id] = {
            "category": int(category),
            "is_thing": bool(thing_flags.get(int(category), True)),
        }
        next_id += 1
    # leftover void pixels: semantic fill for stuff classes
    void = segment_ids == 0
    for category in np.unique(semantic.labels):
        category = int(category)
        if category < 0 or thing_flags.get(category, True):
            continue
        fill = void & (semantic.labels == category)
        if not fill.any():
            continue
        segment_ids[fill] = next_id
        segments[next_id] = {"category": category, "is_thing": False}
        next_id += 1
    return PanopticMap(segment_ids=segment_ids, segments=segments)
