"""Inference post-processing and the detection/segmentation eval suites.

The model emits per-query scores, boxes, and mask logits; this module
turns them into scored detections (top-k + per-category NMS), class-level
semantic maps (score-weighted accumulation), and non-overlapping panoptic
maps, then scores them against pixel-exact ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import equalize, metrics
from .config import EvalConfig, RunConfig
from .datagen import TAXONOMY, AnnotationRecord, SceneConfig, generate_scene
from .model import Predictions
from .prompts import VOCABULARY, Prompt


def category_prompts() -> list:
    """One vocabulary prompt per taxonomy category; prompt id = category id."""
    return [
        Prompt(text=name, kind=VOCABULARY, id=i)
        for i, name in enumerate(TAXONOMY.names)
    ]


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(image, dtype=dtype)


# ---------------------------------------------------------------------------
# ground truth views


def gt_semantic(record: AnnotationRecord, size: int) -> np.ndarray:
    labels = -np.ones((size, size), dtype=np.int64)
    for inst in record.instances:
        labels[inst.mask] = inst.category
    return labels


def gt_panoptic(record: AnnotationRecord) -> equalize.PanopticMap:
    size = record.instances[0].mask.shape[0] if record.instances else 0
    segment_ids = np.zeros((size, size), dtype=np.int64)
    segments = {}
    next_id = 1
    for inst in record.instances:
        segment_ids[inst.mask] = next_id
        segments[next_id] = {
            "category": int(inst.category),
            "is_thing": not inst.is_stuff,
        }
        next_id += 1
    return equalize.PanopticMap(segment_ids=segment_ids, segments=segments)


def gt_detections(record: AnnotationRecord, things_only: bool = True) -> list:
    out = []
    for inst in record.instances:
        if things_only and inst.is_stuff:
            continue
        x0, y0, x1, y1 = inst.box
        out.append(
            metrics.GroundTruthObject(
                image_id=record.image_id,
                category=int(inst.category),
                box=(float(x0), float(y0), float(x1), float(y1)),
                mask=inst.mask,
            )
        )
    return out


# ---------------------------------------------------------------------------
# post-processing


def nms_xyxy(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list:
    order = np.argsort(-scores, kind="stable")
    keep = []
    for idx in order:
        box = boxes[idx]
        if all(
            metrics.box_iou_xyxy(box, boxes[k]) <= iou_threshold for k in keep
        ):
            keep.append(int(idx))
    return keep


def boxes_to_pixels(boxes: torch.Tensor, size: int) -> np.ndarray:
    """Normalized cxcywh -> pixel xyxy."""
    cx, cy, w, h = boxes.unbind(-1)
    out = torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)
    return (out * size).detach().cpu().numpy()


def upsample_masks(mask_logits: torch.Tensor, size: int) -> np.ndarray:
    """Query mask probabilities at full image resolution."""
    probs = torch.sigmoid(mask_logits)[None]
    probs = F.interpolate(probs, size=(size, size), mode="bilinear", align_corners=False)
    return probs[0].detach().cpu().numpy()


def extract_detections(
    pred: Predictions,
    image_id: int,
    size: int,
    cfg: EvalConfig,
    categories=None,
    candidate_pool: int = 300,
) -> list:
    """Top-k (query, category) pairs, per-category NMS, capped detections."""
    probs = torch.sigmoid(pred.scores).detach().cpu().numpy()
    q, n = probs.shape
    if n == 0:
        return []
    boxes = boxes_to_pixels(pred.boxes, size)
    masks = upsample_masks(pred.masks, size)
    flat = probs.flatten()
    pool = min(candidate_pool, flat.size)
    top = np.argpartition(-flat, pool - 1)[:pool]
    cand = [(int(i // n), int(i % n), float(flat[i])) for i in top]
    dets = []
    for category in set(c for _, c, _ in cand):
        group = [(qi, s) for qi, ci, s in cand if ci == category]
        group_boxes = np.array([boxes[qi] for qi, _ in group])
        group_scores = np.array([s for _, s in group])
        for k in nms_xyxy(group_boxes, group_scores, cfg.nms_iou):
            qi, score = group[k]
            cat = int(categories[category]) if categories is not None else category
            dets.append(
                metrics.Detection(
                    image_id=image_id,
                    category=cat,
                    score=score,
                    box=tuple(boxes[qi]),
                    mask=masks[qi] > cfg.mask_threshold,
                )
            )
    dets.sort(key=lambda d: -d.score)
    return dets[: cfg.max_detections]


def semantic_from_predictions(pred: Predictions, size: int, cfg: EvalConfig):
    scores = torch.sigmoid(pred.scores).detach().cpu().numpy()
    masks = upsample_masks(pred.masks, size)
    return equalize.accumulate(scores, masks, void_threshold=cfg.void_threshold)


def panoptic_from_predictions(
    pred: Predictions, dets, semantic: equalize.SemanticMap, cfg: EvalConfig
) -> equalize.PanopticMap:
    entries = [(d.category, d.mask.astype(float), d.score) for d in dets]
    return equalize.panoptic_merge(
        entries,
        semantic,
        TAXONOMY.thing_flags(),
        mask_threshold=cfg.mask_threshold,
    )


# ---------------------------------------------------------------------------
# suites


@dataclass
class EvalReport:
    suite: str
    metrics: dict
    dataset: str = "held-out"
    config_echo: dict = field(default_factory=dict)
    fingerprint: str = ""
    seeds: list = field(default_factory=list)

    BOUNDED = ("ap", "ap50", "ap_mask", "miou", "pq", "sq", "rq", "p_at_1", "oiou", "ar")

    def __post_init__(self):
        for key, value in self.metrics.items():
            base = key.lower()
            if any(base.startswith(b) for b in self.BOUNDED):
                if not (-1e-9 <= value <= 1.0 + 1e-9):
                    raise ValueError(f"metric {key}={value} outside its range")

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "dataset": self.dataset,
            "metrics": self.metrics,
            "config": self.config_echo,
            "fingerprint": self.fingerprint,
            "seeds": list(self.seeds),
        }


def eval_scene_seeds(cfg: RunConfig) -> list:
    return [cfg.eval.seed_base + i for i in range(cfg.eval.images)]


@torch.no_grad()
def eval_detection(model, cfg: RunConfig, seeds=None, scene_config: SceneConfig = None) -> EvalReport:
    """Box/mask AP over held-out scenes, all thing categories prompted at once."""
    model.eval()
    seeds = seeds if seeds is not None else eval_scene_seeds(cfg)
    scene_config = scene_config or SceneConfig(size=cfg.model.image_size, **cfg.eval.scene)
    prompts = category_prompts()
    all_dets, all_gts = [], []
    for seed in seeds:
        image, record = generate_scene(seed, scene_config)
        pred = model(image_to_tensor(image), prompts)
        all_dets.extend(
            extract_detections(pred, record.image_id, scene_config.size, cfg.eval)
        )
        all_gts.extend(gt_detections(record, things_only=True))
    thing_dets = [d for d in all_dets if TAXONOMY.is_thing[d.category]]
    report = EvalReport(
        suite="det",
        metrics={
            "ap": metrics.coco_ap(thing_dets, all_gts),
            "ap50": metrics.coco_ap(thing_dets, all_gts, iou_thresholds=[0.5]),
            "ap_mask": metrics.coco_ap(thing_dets, all_gts, use_mask=True),
        },
        config_echo=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        seeds=list(seeds),
    )
    model.train()
    return report


@torch.no_grad()
def eval_segmentation(model, cfg: RunConfig, seeds=None, scene_config: SceneConfig = None) -> EvalReport:
    """Dataset-level mIoU plus pooled PQ/SQ/RQ with thing/stuff splits."""
    model.eval()
    seeds = seeds if seeds is not None else eval_scene_seeds(cfg)
    scene_config = scene_config or SceneConfig(size=cfg.model.image_size, **cfg.eval.scene)
    prompts = category_prompts()
    miou_acc = metrics.MIoUAccumulator(len(TAXONOMY))
    stuff_acc = metrics.MIoUAccumulator(len(TAXONOMY))
    pq_acc = metrics.PQAccumulator()
    for seed in seeds:
        image, record = generate_scene(seed, scene_config)
        pred = model(image_to_tensor(image), prompts)
        semantic = semantic_from_predictions(pred, scene_config.size, cfg.eval)
        gt_labels = gt_semantic(record, scene_config.size)
        miou_acc.update(semantic.labels, gt_labels)
        stuff_only_pred = np.where(
            np.isin(semantic.labels, TAXONOMY.stuff_ids), semantic.labels, -1
        )
        stuff_only_gt = np.where(
            np.isin(gt_labels, TAXONOMY.stuff_ids), gt_labels, -1
        )
        stuff_acc.update(stuff_only_pred, stuff_only_gt)
        dets = extract_detections(pred, record.image_id, scene_config.size, cfg.eval)
        strong = [d for d in dets if d.score > cfg.eval.score_threshold]
        panoptic = panoptic_from_predictions(pred, strong, semantic, cfg.eval)
        pq_acc.update(panoptic, gt_panoptic(record))
    pq_stats = pq_acc.compute(TAXONOMY.thing_flags())
    report = EvalReport(
        suite="seg",
        metrics={
            "miou": miou_acc.compute(),
            "miou_stuff": stuff_acc.compute(),
            "pq": pq_stats["PQ"],
            "sq": pq_stats["SQ"],
            "rq": pq_stats["RQ"],
            "pq_th": pq_stats.get("PQ_th", 0.0),
            "pq_st": pq_stats.get("PQ_st", 0.0),
        },
        config_echo=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        seeds=list(seeds),
    )
    model.train()
    return report
