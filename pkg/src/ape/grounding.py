"""Referring-expression evaluation, intra- and inter-scenario.

Intra queries each image with only its own phrases; inter queries every
image with the full phrase pool of the evaluation set, so the model must
reject phrases describing absent objects.  Either way, all phrases for an
image go through exactly one forward pass, which an instrumented call
counter asserts.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics
from .config import RunConfig
from .datagen import SceneConfig, describe, generate_scene
from .evalsuite import EvalReport, boxes_to_pixels, image_to_tensor
from .prompts import SENTENCE, Prompt
from .train import phrase_id


@dataclass
class GroundingScene:
    image: np.ndarray
    image_id: int
    phrases: list  # phrase text per target
    boxes: list  # pixel xyxy per target


@contextmanager
def count_forwards(model):
    """Counts model forward passes via a forward_batch wrapper."""
    counter = {"calls": 0}
    original = model.forward_batch

    def wrapped(*args, **kwargs):
        counter["calls"] += 1
        return original(*args, **kwargs)

    model.forward_batch = wrapped
    try:
        yield counter
    finally:
        model.forward_batch = original


def build_grounding_scenes(seeds, scene_config: SceneConfig) -> list:
    scenes = []
    for seed in seeds:
        image, record = generate_scene(seed, scene_config)
        phrases, boxes = [], []
        for inst in record.instances:
            if inst.is_stuff:
                continue
            phrase, ambiguous = describe(inst, record)
            if ambiguous:
                continue
            x0, y0, x1, y1 = inst.box
            phrases.append(phrase)
            boxes.append((float(x0), float(y0), float(x1), float(y1)))
        if phrases:
            scenes.append(
                GroundingScene(image=image, image_id=seed, phrases=phrases, boxes=boxes)
            )
    return scenes


@torch.no_grad()
def grounding_eval(model, cfg: RunConfig, seeds=None, mode: str = "intra") -> EvalReport:
    if mode not in ("intra", "inter"):
        raise ValueError("mode must be 'intra' or 'inter'")
    model.eval()
    scene_config = SceneConfig(size=cfg.model.image_size, **cfg.eval.scene)
    if seeds is None:
        seeds = [cfg.eval.seed_base + i for i in range(cfg.eval.images)]
    scenes = build_grounding_scenes(seeds, scene_config)
    size = scene_config.size

    pool = sorted({p for s in scenes for p in s.phrases})
    hits = 0
    total = 0
    inter_sum = 0.0
    union_sum = 0.0
    rejected = 0
    absent_total = 0
    dets, gts = [], []

    with count_forwards(model) as counter:
        for scene in scenes:
            queried = scene.phrases if mode == "intra" else pool
            prompt_list = [
                Prompt(text=p, kind=SENTENCE, id=phrase_id(p)) for p in queried
            ]
            pred = model.forward(image_to_tensor(scene.image), prompt_list)
            probs = torch.sigmoid(pred.scores).cpu().numpy()
            boxes = boxes_to_pixels(pred.boxes, size)
            present = {p: i for i, p in enumerate(scene.phrases)}
            for j, phrase in enumerate(queried):
                best_q = int(np.argmax(probs[:, j]))
                score = float(probs[best_q, j])
                top_box = tuple(boxes[best_q])
                dets.append(
                    metrics.Detection(
                        image_id=scene.image_id,
                        category=phrase_id(phrase),
                        score=score,
                        box=top_box,
                    )
                )
                if phrase in present:
                    gt_box = scene.boxes[present[phrase]]
                    gts.append(
                        metrics.GroundTruthObject(
                            image_id=scene.image_id,
                            category=phrase_id(phrase),
                            box=gt_box,
                        )
                    )
                    iou = metrics.box_iou_xyxy(top_box, gt_box)
                    total += 1
                    if iou >= 0.5:
                        hits += 1
                    x0 = max(top_box[0], gt_box[0])
                    y0 = max(top_box[1], gt_box[1])
                    x1 = min(top_box[2], gt_box[2])
                    y1 = min(top_box[3], gt_box[3])
                    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
                    area_a = (top_box[2] - top_box[0]) * (top_box[3] - top_box[1])
                    area_b = (gt_box[2] - gt_box[0]) * (gt_box[3] - gt_box[1])
                    inter_sum += inter
                    union_sum += area_a + area_b - inter
                else:
                    absent_total += 1
                    if score < cfg.eval.score_threshold:
                        rejected += 1
    if counter["calls"] != len(scenes):
        raise AssertionError(
            f"{counter['calls']} forwards for {len(scenes)} images; expected one each"
        )

    result = {
        "p_at_1": hits / total if total else 0.0,
        "oiou": inter_sum / union_sum if union_sum else 0.0,
        "ap": metrics.coco_ap(dets, gts),
        "ar": metrics.average_recall(dets, gts),
    }
    if mode == "inter":
        result["rejection"] = rejected / absent_total if absent_total else 1.0
    report = EvalReport(
        suite=f"ground-{mode}",
        metrics=result,
        config_echo=cfg.to_dict(),
        fingerprint=cfg.fingerprint(),
        seeds=list(seeds),
    )
    model.train()
    return report
