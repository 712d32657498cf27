"""Training objective: assignment, per-term losses, and per-dataset gating.

Classification is binary focal over the query-prompt score matrix (with an
optional federated restriction to columns known to be present or sampled
as known-negatives), boxes train with L1 + GIoU, masks with per-pixel
cross-entropy + dice.  A SupervisionProfile decides, per dataset kind,
which terms are trained and at what weight; a zero weight means the term
is never computed, so it contributes exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

EPS_DEGENERATE = 1e-4


# ---------------------------------------------------------------------------
# box utilities (normalized cxcywh everywhere unless stated otherwise)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=-1)


def clamp_degenerate(boxes: torch.Tensor, floor: float = EPS_DEGENERATE) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx, cy, w.clamp(min=floor), h.clamp(min=floor)), dim=-1)


def box_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between two cxcywh box sets, shape (len(a), len(b))."""
    a = box_cxcywh_to_xyxy(clamp_degenerate(a))
    b = box_cxcywh_to_xyxy(clamp_degenerate(b))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def generalized_iou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU for matched pairs; always in [-1, 1]."""
    a = box_cxcywh_to_xyxy(clamp_degenerate(a))
    b = box_cxcywh_to_xyxy(clamp_degenerate(b))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_a + area_b - inter
    iou = inter / union
    hull_lt = torch.min(a[:, :2], b[:, :2])
    hull_rb = torch.max(a[:, 2:], b[:, 2:])
    hull = (hull_rb - hull_lt).prod(dim=-1)
    return iou - (hull - union) / hull


# ---------------------------------------------------------------------------
# assignment


@dataclass
class Assignment:
    """query -> target index map (-1 = background) plus the IoU table."""

    query_to_target: torch.Tensor  # (q,) long
    iou: torch.Tensor  # (q, t)

    @property
    def matched(self) -> torch.Tensor:
        return self.query_to_target >= 0


def iou_assign(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, tau: float = 0.5) -> Assignment:
    """Argmax-IoU assignment with guaranteed per-target coverage.

    A query is assigned to its best-IoU target when that IoU clears
    ``tau``; on top, every target claims its single best query regardless
    of tau (lower target index wins contested queries), so no target is
    ever left unsupervised.
    """
    q = pred_boxes.shape[0]
    t = gt_boxes.shape[0]
    if t == 0:
        return Assignment(
            query_to_target=torch.full((q,), -1, dtype=torch.long),
            iou=torch.zeros((q, 0), dtype=pred_boxes.dtype),
        )
    iou = box_iou_matrix(pred_boxes.detach(), gt_boxes.detach())
    best_target = iou.argmax(dim=1)
    assign = torch.where(
        iou[torch.arange(q), best_target] >= tau,
        best_target,
        torch.full((q,), -1, dtype=torch.long),
    )
    claimed = set()
    for j in range(t):
        if len(claimed) == q:
            break
        order = torch.argsort(iou[:, j], descending=True, stable=True)
        for i in order.tolist():
            if i not in claimed:
                assign[i] = j
                claimed.add(i)
                break
    return Assignment(query_to_target=assign, iou=iou)


def hungarian_assign(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, tau: float = 0.5) -> Assignment:
    """One-to-one alternative behind the config flag; maximizes total IoU."""
    from scipy.optimize import linear_sum_assignment

    q = pred_boxes.shape[0]
    t = gt_boxes.shape[0]
    if t == 0:
        return iou_assign(pred_boxes, gt_boxes, tau)
    iou = box_iou_matrix(pred_boxes.detach(), gt_boxes.detach())
    rows, cols = linear_sum_assignment(-iou.numpy())
    assign = torch.full((q,), -1, dtype=torch.long)
    for i, j in zip(rows, cols):
        assign[int(i)] = int(j)
    return Assignment(query_to_target=assign, iou=iou)


# ---------------------------------------------------------------------------
# individual loss terms


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float = None,
) -> torch.Tensor:
    """Binary focal loss, summed over cells and divided by the positive-row count.

    With gamma=0 and alpha=0.5 this degenerates to 0.5 * summed BCE under
    the same normalization.
    """
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if normalizer is None:
        if targets.ndim >= 2:
            normalizer = float((targets.sum(dim=tuple(range(1, targets.ndim))) > 0).sum())
        else:
            normalizer = float((targets > 0).sum())
    return loss.sum() / max(normalizer, 1.0)


def federated_focal(
    logits: torch.Tensor,
    targets: torch.Tensor,
    allowed_columns: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: float = None,
) -> torch.Tensor:
    """Focal loss restricted to the given score columns.

    Columns outside ``allowed_columns`` are sliced away before any loss
    math, so their gradient is exactly zero, not merely small.
    """
    if allowed_columns.numel() == 0:
        return logits.sum() * 0.0
    return focal_loss(
        logits[:, allowed_columns], targets[:, allowed_columns], alpha, gamma, normalizer
    )


def l1_box(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute coordinate error over matched pairs."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (pred - gt).abs().mean()


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """1 - GIoU averaged over matched pairs."""
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return (1.0 - generalized_iou_pairs(pred, gt)).mean()


def mask_ce(pred_logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy, mean over pixels and pairs."""
    if pred_logits.numel() == 0:
        return pred_logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(pred_logits, gt_mask.to(pred_logits.dtype))


def dice_loss(pred_probs: torch.Tensor, gt_mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - dice overlap with +eps smoothing; empty-vs-empty scores exactly 0."""
    if pred_probs.numel() == 0:
        return pred_probs.sum() * 0.0
    gt = gt_mask.to(pred_probs.dtype)
    num = 2.0 * (pred_probs * gt).sum(dim=(-2, -1)) + eps
    den = pred_probs.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1)) + eps
    return (1.0 - num / den).mean()


# ---------------------------------------------------------------------------
# supervision profiles


EXHAUSTIVE = "exhaustive"
FEDERATED = "federated"
CLASS_AGNOSTIC = "class_agnostic"
GROUNDING_BOX = "grounding_box"
GROUNDING_MASK = "grounding_mask"

DATASET_KINDS = (EXHAUSTIVE, FEDERATED, CLASS_AGNOSTIC, GROUNDING_BOX, GROUNDING_MASK)


@dataclass(frozen=True)
class SupervisionProfile:
    """Per-dataset switchboard for loss terms and weights."""

    kind: str
    enc: tuple  # (class, bbox, giou)
    dec: tuple  # (class, bbox, giou, mask, dice)
    federated: bool = False
    num_federated_negatives: int = 5

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind: {self.kind}")
        if any(w < 0 for w in self.enc + self.dec):
            raise ValueError("loss weights must be >= 0")
        if self.kind == CLASS_AGNOSTIC and self.dec[0] != 0:
            raise ValueError("class-agnostic data must not train decoder classification")
        if self.kind == GROUNDING_BOX and (any(self.enc) or self.dec[3] or self.dec[4]):
            raise ValueError("box-only grounding trains decoder class/box terms only")


def default_profiles(prose_grounding_rule: bool = False) -> dict:
    """The shipped profile table, one row per dataset kind.

    ``prose_grounding_rule`` switches box-annotated grounding data to
    decoder-classification-only supervision (the conservative variant);
    the default follows the fuller per-term weighting.
    """
    profiles = {
        EXHAUSTIVE: SupervisionProfile(EXHAUSTIVE, (1, 5, 2), (1, 5, 2, 5, 5)),
        FEDERATED: SupervisionProfile(FEDERATED, (1, 5, 2), (1, 5, 2, 5, 5), federated=True),
        CLASS_AGNOSTIC: SupervisionProfile(CLASS_AGNOSTIC, (1, 5, 2), (0, 5, 2, 5, 5)),
        GROUNDING_BOX: SupervisionProfile(GROUNDING_BOX, (0, 0, 0), (1, 0, 0, 0, 0)),
        GROUNDING_MASK: SupervisionProfile(GROUNDING_MASK, (0, 5, 2), (1, 5, 2, 5, 5)),
    }
    if prose_grounding_rule:
        profiles[GROUNDING_MASK] = SupervisionProfile(
            GROUNDING_MASK, (0, 0, 0), (1, 5, 2, 5, 5)
        )
    return profiles


# ---------------------------------------------------------------------------
# the full objective


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)  # name -> float
    weighted: dict = field(default_factory=dict)  # name -> weight * term
    total: torch.Tensor = None

    def scalar(self, name: str) -> float:
        return float(self.terms.get(name, 0.0))


@dataclass
class TrainTarget:
    """Ground truth for one image, already rasterized to model space."""

    boxes: torch.Tensor  # (t, 4) normalized cxcywh
    prompt_cols: torch.Tensor  # (t,) long; -1 = no prompt column (class-agnostic)
    masks: torch.Tensor = None  # (t, h, w) bool at the mask grid, or None
    present_cols: tuple = ()  # federated: columns known present in this image
    kind: str = EXHAUSTIVE


def _classification_targets(assignment: Assignment, prompt_cols: torch.Tensor, n_cols: int, q: int):
    targets = torch.zeros((q, n_cols))
    matched = assignment.matched
    for i in torch.nonzero(matched).flatten().tolist():
        col = int(prompt_cols[assignment.query_to_target[i]])
        if col >= 0:
            targets[i, col] = 1.0
    return targets


def _federated_columns(
    targets: torch.Tensor,
    present_cols,
    n_real_cols: int,
    n_cols: int,
    num_negatives: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Positives + known-present + sampled known-negative columns.

    Bank-negative columns (indices >= n_real_cols) are always allowed:
    those prompts are known absent by construction.
    """
    allowed = set(torch.nonzero(targets.sum(dim=0) > 0).flatten().tolist())
    allowed |= {int(c) for c in present_cols}
    absent = [c for c in range(n_real_cols) if c not in allowed]
    if absent and num_negatives > 0:
        take = min(num_negatives, len(absent))
        sampled = rng.choice(len(absent), size=take, replace=False)
        allowed |= {absent[int(i)] for i in sampled}
    allowed |= set(range(n_real_cols, n_cols))
    return torch.tensor(sorted(allowed), dtype=torch.long)


def total_loss(
    outputs,
    target: TrainTarget,
    profile: SupervisionProfile,
    tau: float = 0.5,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
    rng: np.random.Generator = None,
    assigner=iou_assign,
) -> LossReport:
    """Weighted sum of every active term for one image.

    ``outputs`` is a model ForwardOutputs; terms with zero weight are never
    computed.  Encoder classification is always class-agnostic foreground
    scoring.  Raises when the profile needs annotations the target lacks.
    """
    if profile.kind != target.kind:
        raise ValueError(f"profile kind {profile.kind} != target kind {target.kind}")
    if profile.dec[3] > 0 and target.masks is None:
        raise ValueError("profile trains masks but target has no mask annotations")
    if profile.federated and rng is None:
        raise ValueError("federated profile requires an rng for negative sampling")

    report = LossReport(terms={}, weighted={})
    dtype = outputs.enc_objectness.dtype
    total = torch.zeros((), dtype=dtype)
    t = target.boxes.shape[0]

    def add(name, weight, value):
        report.terms[name] = float(value.detach())
        report.weighted[name] = weight * value
        return weight * value

    # encoder stage: class-agnostic objectness on anchors + box refinement
    enc_w_class, enc_w_bbox, enc_w_giou = profile.enc
    if enc_w_class > 0 or enc_w_bbox > 0 or enc_w_giou > 0:
        enc_assign = assigner(outputs.anchors, target.boxes, tau)
        if enc_w_class > 0:
            fg = enc_assign.matched.to(dtype)
            total = total + add(
                "enc_class",
                enc_w_class,
                focal_loss(outputs.enc_objectness, fg, focal_alpha, focal_gamma),
            )
        if (enc_w_bbox > 0 or enc_w_giou > 0) and t > 0:
            sel = enc_assign.matched
            pred = outputs.enc_boxes[sel]
            gt = target.boxes[enc_assign.query_to_target[sel]]
            if enc_w_bbox > 0:
                total = total + add("enc_bbox", enc_w_bbox, l1_box(pred, gt))
            if enc_w_giou > 0:
                total = total + add("enc_giou", enc_w_giou, giou_loss(pred, gt))

    # decoder stage: per-layer class/box terms, masks on the last layer
    dec_w_class, dec_w_bbox, dec_w_giou, dec_w_mask, dec_w_dice = profile.dec
    n_layers = len(outputs.layer_boxes)
    loss_class = torch.zeros((), dtype=dtype)
    loss_bbox = torch.zeros((), dtype=dtype)
    loss_giou_ = torch.zeros((), dtype=dtype)
    last_assign = None
    for layer in range(n_layers):
        boxes = outputs.layer_boxes[layer]
        assign = assigner(boxes, target.boxes, tau)
        last_assign = assign
        if dec_w_class > 0:
            scores = outputs.layer_scores[layer]
            cls_targets = _classification_targets(
                assign, target.prompt_cols, scores.shape[1], scores.shape[0]
            ).to(dtype)
            if profile.federated:
                allowed = _federated_columns(
                    cls_targets,
                    target.present_cols,
                    outputs.n_real_cols,
                    scores.shape[1],
                    profile.num_federated_negatives,
                    rng,
                )
                loss_class = loss_class + federated_focal(
                    scores, cls_targets, allowed, focal_alpha, focal_gamma
                )
            else:
                loss_class = loss_class + focal_loss(
                    scores, cls_targets, focal_alpha, focal_gamma
                )
        if (dec_w_bbox > 0 or dec_w_giou > 0) and t > 0:
            sel = assign.matched
            pred = boxes[sel]
            gt = target.boxes[assign.query_to_target[sel]]
            if dec_w_bbox > 0:
                loss_bbox = loss_bbox + l1_box(pred, gt)
            if dec_w_giou > 0:
                loss_giou_ = loss_giou_ + giou_loss(pred, gt)
    if dec_w_class > 0:
        total = total + add("dec_class", dec_w_class, loss_class)
    if dec_w_bbox > 0:
        total = total + add("dec_bbox", dec_w_bbox, loss_bbox)
    if dec_w_giou > 0:
        total = total + add("dec_giou", dec_w_giou, loss_giou_)

    if (dec_w_mask > 0 or dec_w_dice > 0) and t > 0 and last_assign is not None:
        sel = last_assign.matched
        if sel.any():
            pred_masks = outputs.mask_logits[sel]
            gt_masks = target.masks[last_assign.query_to_target[sel]]
            if dec_w_mask > 0:
                total = total + add("dec_mask", dec_w_mask, mask_ce(pred_masks, gt_masks))
            if dec_w_dice > 0:
                total = total + add(
                    "dec_dice", dec_w_dice, dice_loss(torch.sigmoid(pred_masks), gt_masks)
                )

    report.total = total
    return report
