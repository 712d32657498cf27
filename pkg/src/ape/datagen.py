"""Synthetic multi-task scenes: geometric things over textured stuff.

One generator feeds every supervision flavor the trainer knows: exhaustive
detection/segmentation records, federated records listing which categories
were checked, class-agnostic records with labels stripped, and grounding
records whose referring phrases are produced by templates and regrouped
into image-centric samples.  Ground truth is pixel-exact by construction;
boxes are always the tight hull of the (visible) mask.

Scene content is a pure function of the integer scene seed.  Thing
categories follow a Zipf(s) law realized through a golden-ratio Weyl
sequence over consecutive seeds, so empirical per-rank frequencies track
the analytic masses closely even in modest samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import equalize
from .losses import (
    CLASS_AGNOSTIC,
    EXHAUSTIVE,
    FEDERATED,
    GROUNDING_BOX,
    GROUNDING_MASK,
)

# golden-ratio multiplier for the Weyl category stream (Fibonacci hashing);
# the second constant decorrelates the per-scene thing-count channel
_WEYL = 0x9E3779B97F4A7C15
_MIX = 0xBF58476D1CE4E5B9
_MAX_SLOTS = 8

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.10),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "pink": (0.95, 0.50, 0.70),
    "brown": (0.55, 0.35, 0.15),
}
SHAPES = ("circle", "square", "triangle")
STUFF = {
    "sky": (0.60, 0.78, 0.95),
    "grass": (0.35, 0.62, 0.25),
    "water": (0.15, 0.45, 0.80),
    "road": (0.45, 0.45, 0.50),
}


class Taxonomy:
    """Fixed category universe: 24 thing classes plus 4 stuff classes."""

    def __init__(self):
        self.names = []
        self.is_thing = []
        for color in COLORS:
            for shape in SHAPES:
                self.names.append(f"{color} {shape}")
                self.is_thing.append(True)
        for stuff in STUFF:
            self.names.append(stuff)
            self.is_thing.append(False)
        self.thing_ids = [i for i, t in enumerate(self.is_thing) if t]
        self.stuff_ids = [i for i, t in enumerate(self.is_thing) if not t]

    def __len__(self):
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)

    def thing_flags(self) -> dict:
        return {i: bool(t) for i, t in enumerate(self.is_thing)}


TAXONOMY = Taxonomy()


@dataclass
class SceneConfig:
    size: int = 128
    min_things: int = 1
    max_things: int = 6
    min_stuff_regions: int = 2
    max_stuff_regions: int = 4
    min_shape: int = 14
    max_shape: int = 40
    zipf_s: float = 1.0
    noise: float = 0.02
    max_box_iou: float = 0.3
    max_box_ioma: float = 0.5  # intersection over min area; prevents nesting
    placement_attempts: int = 100


@dataclass
class Instance:
    category: int = None
    phrase: str = None
    box: tuple = None  # (x0, y0, x1, y1) pixel coords, exclusive right/bottom
    mask: np.ndarray = None  # (H, W) bool, visible region
    is_stuff: bool = False


@dataclass
class AnnotationRecord:
    image_id: int
    instances: list
    kind: str = EXHAUSTIVE
    present_categories: tuple = ()


@dataclass
class GroundingTriple:
    image_id: int
    phrase: str
    box: tuple


@dataclass
class ImageCentricSample:
    image_id: int
    pairs: list  # [(phrase, box)]


def zipf_masses(n: int, s: float = 1.0) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    masses = ranks**-s
    return masses / masses.sum()


def _weyl_unit(k: int) -> float:
    return ((k * _WEYL) % (1 << 64)) / float(1 << 64)


def _zipf_category(seed: int, slot: int, masses: np.ndarray) -> int:
    u = _weyl_unit(seed * _MAX_SLOTS + slot)
    return int(np.searchsorted(np.cumsum(masses), u, side="right"))


def _thing_count(seed: int, lo: int, hi: int) -> int:
    # quasi-random like the category stream, so that which category slots
    # exist stays equidistributed across consecutive seeds
    u = _weyl_unit(seed * _MIX + 17)
    return lo + int(u * (hi - lo + 1))


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    if inter == 0:
        return 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _box_ioma(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    if inter == 0:
        return 0.0
    return inter / min((ax1 - ax0) * (ay1 - ay0), (bx1 - bx0) * (by1 - by0))


def _shape_mask(shape: str, cx: float, cy: float, size: float, canvas: int) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    half = size / 2.0
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "triangle":
        top = cy - half
        within_rows = (yy >= top) & (yy <= cy + half)
        width_at_row = (yy - top) / size * half
        return within_rows & (np.abs(xx - cx) <= width_at_row)
    raise ValueError(f"unknown shape {shape}")


def _split_regions(rng: np.random.Generator, canvas: int, count: int) -> list:
    """Partition the canvas into axis-aligned rectangles via random cuts."""
    regions = [(0, 0, canvas, canvas)]
    min_side = 24
    while len(regions) < count:
        regions.sort(key=lambda r: -(r[2] - r[0]) * (r[3] - r[1]))
        x0, y0, x1, y1 = regions.pop(0)
        w, h = x1 - x0, y1 - y0
        vertical = bool(rng.integers(0, 2)) if min(w, h) >= 2 * min_side else w > h
        if vertical and w >= 2 * min_side:
            cut = int(rng.integers(x0 + min_side, x1 - min_side + 1))
            regions += [(x0, y0, cut, y1), (cut, y0, x1, y1)]
        elif h >= 2 * min_side:
            cut = int(rng.integers(y0 + min_side, y1 - min_side + 1))
            regions += [(x0, y0, x1, cut), (x0, cut, x1, y1)]
        else:
            regions.append((x0, y0, x1, y1))
            break
    return regions


def generate_scene(seed: int, config: SceneConfig = None):
    """Render one scene; returns (image (3,H,W) float32 in [0,1], record)."""
    config = config or SceneConfig()
    canvas = config.size
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xA9E)))
    image = np.zeros((canvas, canvas, 3), dtype=np.float64)

    # stuff backdrop: rectangular regions, classes drawn with replacement
    n_regions = int(rng.integers(config.min_stuff_regions, config.max_stuff_regions + 1))
    regions = _split_regions(rng, canvas, n_regions)
    stuff_grid = np.zeros((canvas, canvas), dtype=np.int64)
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    for x0, y0, x1, y1 in regions:
        sid = int(rng.integers(0, len(TAXONOMY.stuff_ids)))
        category = TAXONOMY.stuff_ids[sid]
        stuff_grid[y0:y1, x0:x1] = category
        base = np.array(STUFF[TAXONOMY.names[category]])
        freq = rng.uniform(0.05, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        angle = rng.uniform(0, np.pi)
        wave = np.sin(
            2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase
        )
        tex = 1.0 + 0.12 * wave[y0:y1, x0:x1, None]
        image[y0:y1, x0:x1] = base[None, None, :] * tex

    masses = zipf_masses(len(TAXONOMY.thing_ids), config.zipf_s)
    n_things = _thing_count(seed, config.min_things, config.max_things)
    placed = []  # (category, mask, box)
    for slot in range(n_things):
        category = TAXONOMY.thing_ids[_zipf_category(seed, slot, masses)]
        color_name, shape = TAXONOMY.names[category].split(" ")
        size = float(rng.uniform(config.min_shape, config.max_shape))
        box = None
        for _ in range(config.placement_attempts):
            half = size / 2.0
            cx = float(rng.uniform(half + 2, canvas - half - 2))
            cy = float(rng.uniform(half + 2, canvas - half - 2))
            candidate = (cx - half, cy - half, cx + half, cy + half)
            if all(
                _box_iou(candidate, other) <= config.max_box_iou
                and _box_ioma(candidate, other) <= config.max_box_ioma
                for _, _, other in placed
            ):
                box = candidate
                break
        if box is None:
            raise RuntimeError(
                f"could not place thing {slot} after {config.placement_attempts} attempts"
            )
        mask = _shape_mask(shape, cx, cy, size, canvas)
        jitter = rng.uniform(0.92, 1.0)
        image[mask] = np.array(COLORS[color_name]) * jitter
        placed.append((category, mask, box))

    # visibility: later things occlude earlier ones
    instances = []
    occupied = np.zeros((canvas, canvas), dtype=bool)
    for category, mask, _ in reversed(placed):
        visible = mask & ~occupied
        occupied |= mask
        instances.append(
            Instance(
                category=category,
                box=equalize.tight_box(visible),
                mask=visible,
                is_stuff=False,
            )
        )
    instances.reverse()

    for category in sorted(set(stuff_grid.flatten().tolist())):
        visible = (stuff_grid == category) & ~occupied
        if not visible.any():
            continue
        instances.append(
            Instance(
                category=int(category),
                box=equalize.tight_box(visible),
                mask=visible,
                is_stuff=True,
            )
        )

    if config.noise > 0:
        image = image + rng.normal(0.0, config.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
    record = AnnotationRecord(image_id=seed, instances=instances, kind=EXHAUSTIVE)
    return image, record


# ---------------------------------------------------------------------------
# referring phrases

_SUPERLATIVES = (
    ("leftmost", lambda c: c[0], min),
    ("rightmost", lambda c: c[0], max),
    ("topmost", lambda c: c[1], min),
    ("bottommost", lambda c: c[1], max),
)
_RELATIONS = (
    ("left of", lambda c, a: c[0] < a[0] - 2),
    ("right of", lambda c, a: c[0] > a[0] + 2),
    ("above", lambda c, a: c[1] < a[1] - 2),
    ("below", lambda c, a: c[1] > a[1] + 2),
)


def _center(box) -> tuple:
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def describe(instance: Instance, record: AnnotationRecord):
    """Produce a phrase uniquely identifying a thing within its scene.

    Returns (phrase, ambiguous).  Tries the bare attribute phrase, then a
    spatial superlative within the same-category group, then a relation to
    a category that appears exactly once; gives up with the ambiguous flag
    set when none of these isolates the instance.
    """
    things = [i for i in record.instances if not i.is_stuff]
    if not any(t is instance for t in things):
        raise ValueError("instance does not belong to the record")
    name = TAXONOMY.names[instance.category]
    group = [t for t in things if t.category == instance.category]
    if len(group) == 1:
        return f"the {name}", False

    center = _center(instance.box)
    centers = [_center(t.box) for t in group]
    for word, key, pick in _SUPERLATIVES:
        values = [key(c) for c in centers]
        best = pick(values)
        if values.count(best) == 1 and key(center) == best:
            return f"the {word} {name}", False

    unique_anchors = [
        t
        for t in things
        if t.category != instance.category
        and sum(o.category == t.category for o in things) == 1
    ]
    for anchor in unique_anchors:
        anchor_center = _center(anchor.box)
        anchor_name = TAXONOMY.names[anchor.category]
        for rel_word, rel in _RELATIONS:
            holds = [rel(c, anchor_center) for c in centers]
            if sum(holds) == 1 and rel(center, anchor_center):
                return f"the {name} {rel_word} the {anchor_name}", False
    return f"the {name}", True


# ---------------------------------------------------------------------------
# dataset transforms


def to_image_centric(triples, dedup_iou: float = 0.7, rng=None) -> list:
    """Group region-centric triples by image, NMS-deduped with random scores.

    The kept (phrase, box) multiset is exactly the NMS survivors; only the
    grouping changes, so one image's worth of supervision now arrives in a
    single sample.
    """
    rng = rng or np.random.default_rng()
    by_image = {}
    for triple in triples:
        by_image.setdefault(triple.image_id, []).append(triple)
    samples = []
    for image_id in sorted(by_image):
        group = by_image[image_id]
        scores = rng.random(len(group))
        order = np.argsort(-scores)
        kept = []
        for idx in order:
            candidate = group[int(idx)]
            if all(_box_iou(candidate.box, k.box) <= dedup_iou for k in kept):
                kept.append(candidate)
        kept.sort(key=lambda t: group.index(t))
        samples.append(
            ImageCentricSample(image_id=image_id, pairs=[(t.phrase, t.box) for t in kept])
        )
    return samples


def federate(record: AnnotationRecord, keep) -> AnnotationRecord:
    """Drop instances whose category was not checked; remember what was."""
    keep = tuple(sorted(set(int(c) for c in keep)))
    instances = [i for i in record.instances if i.category in keep]
    return replace(record, instances=instances, kind=FEDERATED, present_categories=keep)


AGNOSTIC_ID = 0


def strip_labels(
    record: AnnotationRecord, connectivity: int = 8, min_area: int = 16
) -> AnnotationRecord:
    """Remove semantic labels; stuff masks become per-component instances."""
    instances = []
    for inst in record.instances:
        if inst.is_stuff:
            for comp in equalize.decompose_stuff(
                inst.mask, AGNOSTIC_ID, connectivity, min_area
            ):
                instances.append(
                    Instance(
                        category=AGNOSTIC_ID,
                        box=comp.box,
                        mask=comp.mask,
                        is_stuff=True,
                    )
                )
        else:
            instances.append(replace(inst, category=AGNOSTIC_ID, phrase=None))
    return replace(
        record, instances=instances, kind=CLASS_AGNOSTIC, present_categories=()
    )


def sampling_ratio(dataset_size: int, threshold: int = 1000) -> float:
    return 1.0 if dataset_size > threshold else 0.1


def sample_step(sizes, ratios, batch: int, seed: int, step: int):
    """The mixed sampler's choice for one step, stateless in ``step``.

    Dataset picked with probability proportional to its ratio; sample
    indices drawn uniformly from that dataset.  Statelessness makes resume
    trivially exact.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, step, 0x5A)))
    probs = np.asarray(ratios, dtype=np.float64)
    probs = probs / probs.sum()
    ds = int(rng.choice(len(sizes), p=probs))
    indices = rng.integers(0, sizes[ds], size=batch)
    return ds, indices


def mixed_sampler(sizes, ratios, batch: int, seed: int, start_step: int = 0):
    step = start_step
    while True:
        yield sample_step(sizes, ratios, batch, seed, step)
        step += 1


# ---------------------------------------------------------------------------
# COCO-style serialization


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major run-length counts, starting with zeros."""
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    counts = []
    current, run = False, 0
    for value in flat:
        if value == current:
            run += 1
        else:
            counts.append(run)
            current, run = value, 1
    counts.append(run)
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in rle["counts"]:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def record_to_coco(record: AnnotationRecord, next_ann_id: int = 1):
    anns = []
    for inst in record.instances:
        x0, y0, x1, y1 = inst.box
        ann = {
            "id": next_ann_id,
            "image_id": record.image_id,
            "bbox": [float(x0), float(y0), float(x1 - x0), float(y1 - y0)],
            "segmentation": rle_encode(inst.mask),
            "is_stuff": bool(inst.is_stuff),
        }
        if inst.phrase is not None:
            ann["phrase"] = inst.phrase
        else:
            ann["category_id"] = int(inst.category)
        anns.append(ann)
        next_ann_id += 1
    return anns, next_ann_id


def write_coco_dataset(out_dir, seeds, config: SceneConfig = None, kind: str = EXHAUSTIVE,
                       transform=None) -> Path:
    """Render scenes to PNG plus one COCO-style annotation JSON."""
    from PIL import Image as PILImage

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    present_union = set()
    next_ann = 1
    for seed in seeds:
        image, record = generate_scene(seed, config)
        if transform is not None:
            record = transform(record)
        file_name = f"images/{record.image_id:08d}.png"
        array = (image.transpose(1, 2, 0) * 255).round().astype(np.uint8)
        PILImage.fromarray(array).save(out_dir / file_name)
        entry = {
            "id": record.image_id,
            "width": image.shape[2],
            "height": image.shape[1],
            "file_name": file_name,
        }
        if record.present_categories:
            entry["present_category_ids"] = list(record.present_categories)
            present_union.update(record.present_categories)
        images.append(entry)
        anns, next_ann = record_to_coco(record, next_ann)
        annotations.extend(anns)
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i, "name": name, "is_thing": bool(TAXONOMY.is_thing[i])}
            for i, name in enumerate(TAXONOMY.names)
        ],
        "kind": kind,
        "present_category_ids": sorted(present_union),
    }
    path = out_dir / "annotations.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path
