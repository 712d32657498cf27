import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ape.losses import (
    CLASS_AGNOSTIC,
    EXHAUSTIVE,
    FEDERATED,
    GROUNDING_BOX,
    GROUNDING_MASK,
    SupervisionProfile,
    TrainTarget,
    _federated_columns,
    box_iou_matrix,
    default_profiles,
    dice_loss,
    federated_focal,
    focal_loss,
    generalized_iou_pairs,
    giou_loss,
    hungarian_assign,
    iou_assign,
    l1_box,
    mask_ce,
    total_loss,
)
from gradcheck import directional_check
from oracles import assign_by_rule, cxcywh_to_corners, giou_corners, iou_corners

torch.manual_seed(0)


def random_boxes(rng, n):
    cx = rng.uniform(0.2, 0.8, n)
    cy = rng.uniform(0.2, 0.8, n)
    w = rng.uniform(0.05, 0.4, n)
    h = rng.uniform(0.05, 0.4, n)
    return torch.tensor(np.stack([cx, cy, w, h], axis=1))


# ---------------------------------------------------------------------------
# assignment


def test_identity_assignment():
    boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    out = iou_assign(boxes, boxes)
    assert out.query_to_target.tolist() == [0, 1]


def test_zero_gt_all_background():
    out = iou_assign(torch.rand(5, 4), torch.zeros((0, 4)))
    assert out.query_to_target.tolist() == [-1] * 5
    assert out.iou.shape == (5, 0)


def test_hand_case_matches_rule_oracle():
    preds = [
        (0.30, 0.30, 0.20, 0.20),
        (0.32, 0.30, 0.20, 0.20),
        (0.70, 0.70, 0.20, 0.20),
        (0.50, 0.50, 0.10, 0.10),
        (0.90, 0.10, 0.10, 0.10),
    ]
    gts = [(0.30, 0.30, 0.20, 0.20), (0.70, 0.70, 0.22, 0.22), (0.10, 0.90, 0.10, 0.10)]
    ours = iou_assign(torch.tensor(preds), torch.tensor(gts))
    assert ours.query_to_target.tolist() == assign_by_rule(preds, gts)


def test_random_assignments_match_rule_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = int(rng.integers(1, 10))
        t = int(rng.integers(0, 5))
        preds = [tuple(b) for b in random_boxes(rng, q).tolist()]
        gts = [tuple(b) for b in random_boxes(rng, t).tolist()]
        ours = iou_assign(torch.tensor(preds), torch.tensor(gts) if t else torch.zeros((0, 4)))
        assert ours.query_to_target.tolist() == assign_by_rule(preds, gts)


def test_coverage_invariant():
    rng = np.random.default_rng(2)
    for _ in range(50):
        preds = random_boxes(rng, 12)
        gts = random_boxes(rng, int(rng.integers(1, 6)))
        out = iou_assign(preds, gts)
        assigned = set(out.query_to_target.tolist())
        for j in range(gts.shape[0]):
            assert j in assigned, "a target lost all queries"


def test_hungarian_flag_is_one_to_one():
    rng = np.random.default_rng(3)
    preds = random_boxes(rng, 8)
    gts = random_boxes(rng, 3)
    out = hungarian_assign(preds, gts)
    matched = [int(x) for x in out.query_to_target if x >= 0]
    assert sorted(matched) == sorted(set(matched))
    assert len(matched) == 3


# ---------------------------------------------------------------------------
# focal


def test_focal_degenerates_to_half_bce():
    rng = np.random.default_rng(4)
    logits = torch.tensor(rng.standard_normal((6, 5)))
    targets = torch.tensor((rng.random((6, 5)) < 0.3).astype(float))
    ours = focal_loss(logits, targets, alpha=0.5, gamma=0.0)
    n_pos_rows = float((targets.sum(dim=1) > 0).sum())
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="sum")
    assert torch.allclose(ours, 0.5 * bce / max(n_pos_rows, 1.0), atol=1e-12)


def test_focal_perfect_logits_vanish():
    logits = torch.tensor([[20.0, -20.0], [-20.0, 20.0]])
    targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(focal_loss(logits, targets)) < 1e-6


def test_focal_single_cell_closed_form():
    # alpha * (1-p)^gamma * -log(p) at p=0.5: 0.25 * 0.25 * ln 2
    expected = 0.25 * 0.25 * math.log(2.0)
    got = float(focal_loss(torch.zeros(1, 1), torch.ones(1, 1)))
    assert abs(got - expected) < 1e-9
    assert abs(expected - 0.043322) < 5e-7


# ---------------------------------------------------------------------------
# federated focal


def test_federated_equals_focal_when_all_present():
    rng = np.random.default_rng(5)
    logits = torch.tensor(rng.standard_normal((7, 6)))
    targets = torch.tensor((rng.random((7, 6)) < 0.2).astype(float))
    allowed = torch.arange(6)
    assert torch.allclose(
        federated_focal(logits, targets, allowed), focal_loss(logits, targets)
    )


def test_federated_empty_is_zero():
    logits = torch.randn(4, 5, requires_grad=True)
    out = federated_focal(logits, torch.zeros(4, 5), torch.zeros(0, dtype=torch.long))
    assert float(out) == 0.0
    out.backward()
    assert torch.all(logits.grad == 0)


def test_federated_column_selection():
    targets = torch.zeros(4, 8)
    targets[0, 2] = 1.0
    rng = np.random.default_rng(0)
    allowed = _federated_columns(
        targets, present_cols=(5,), n_real_cols=6, n_cols=8, num_negatives=2, rng=rng
    )
    allowed = set(allowed.tolist())
    assert {2, 5, 6, 7} <= allowed  # positive, present, both bank columns
    assert len(allowed) == 6  # plus exactly two sampled absent columns


def test_federated_masked_columns_zero_gradient():
    rng = np.random.default_rng(6)
    logits = torch.tensor(rng.standard_normal((5, 6)), requires_grad=True)
    targets = torch.zeros(5, 6)
    targets[1, 0] = 1.0
    allowed = torch.tensor([0, 2])
    loss = federated_focal(logits, targets, allowed)
    loss.backward()
    masked = [1, 3, 4, 5]
    assert torch.all(logits.grad[:, masked] == 0)
    assert torch.any(logits.grad[:, [0, 2]] != 0)
    # finite differences agree: perturbing a masked column leaves the loss fixed
    with torch.no_grad():
        bумп = logits.detach().clone()
        bумп[:, 3] += 0.37
        assert torch.allclose(
            federated_focal(bумп, targets, allowed),
            federated_focal(logits.detach(), targets, allowed),
        )


# ---------------------------------------------------------------------------
# boxes


def test_identical_boxes_zero_loss():
    boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
    assert float(l1_box(boxes, boxes)) == 0.0
    assert abs(float(giou_loss(boxes, boxes))) < 1e-12


def test_giou_far_apart_approaches_two():
    a = torch.tensor([[0.05, 0.05, 0.01, 0.01]])
    b = torch.tensor([[0.95, 0.95, 0.01, 0.01]])
    assert float(giou_loss(a, b)) > 1.9


def test_giou_hand_case_corner_arithmetic():
    a = (0.25, 0.25, 0.5, 0.5)
    b = (0.5, 0.5, 0.5, 0.5)
    expected = 1.0 - giou_corners(cxcywh_to_corners(a), cxcywh_to_corners(b))
    got = float(giou_loss(torch.tensor([a]), torch.tensor([b])))
    assert abs(got - expected) < 1e-12
    # the oracle numbers themselves: IoU 1/7, hull 0.5625, union 0.4375
    assert abs(iou_corners(cxcywh_to_corners(a), cxcywh_to_corners(b)) - 1 / 7) < 1e-12


def test_giou_range_property():
    rng = np.random.default_rng(7)
    for _ in range(300):
        a = random_boxes(rng, 4)
        b = random_boxes(rng, 4)
        g = generalized_iou_pairs(a, b)
        assert torch.all(g >= -1.0 - 1e-9) and torch.all(g <= 1.0 + 1e-9)


def test_iou_matrix_against_corner_oracle():
    rng = np.random.default_rng(8)
    a = random_boxes(rng, 5)
    b = random_boxes(rng, 3)
    table = box_iou_matrix(a, b)
    for i in range(5):
        for j in range(3):
            expected = iou_corners(
                cxcywh_to_corners(tuple(a[i].tolist())),
                cxcywh_to_corners(tuple(b[j].tolist())),
            )
            assert abs(float(table[i, j]) - expected) < 1e-9


# ---------------------------------------------------------------------------
# masks


def test_dice_perfect_prediction():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])[None]
    assert float(dice_loss(gt, gt)) < 0.2  # eps effect only
    assert float(dice_loss(gt, gt)) == pytest.approx(1 - 5 / 5, abs=1e-9)


def test_dice_empty_vs_empty_is_zero():
    empty = torch.zeros(1, 4, 4)
    assert float(dice_loss(empty, empty)) == 0.0


def test_dice_half_overlap_hand_count():
    pred = torch.tensor([[1.0, 1.0], [0.0, 0.0]])[None]
    gt = torch.tensor([[1.0, 0.0], [1.0, 0.0]])[None]
    # |P.G|=1, |P|=2, |G|=2 -> 1 - (2+1)/(4+1) = 0.4
    assert float(dice_loss(pred, gt)) == pytest.approx(0.4, abs=1e-9)


def test_mask_ce_matches_functional():
    rng = np.random.default_rng(9)
    logits = torch.tensor(rng.standard_normal((3, 4, 4)))
    gt = torch.tensor((rng.random((3, 4, 4)) < 0.5).astype(float))
    assert torch.allclose(
        mask_ce(logits, gt),
        F.binary_cross_entropy_with_logits(logits, gt),
    )


# ---------------------------------------------------------------------------
# profiles (rows mirror the published training-data configuration table)


def test_profile_table_rows():
    profiles = default_profiles()
    assert profiles[FEDERATED].enc == (1, 5, 2)
    assert profiles[FEDERATED].dec == (1, 5, 2, 5, 5)
    assert profiles[FEDERATED].federated
    assert profiles[EXHAUSTIVE].enc == (1, 5, 2)
    assert profiles[EXHAUSTIVE].dec == (1, 5, 2, 5, 5)
    assert not profiles[EXHAUSTIVE].federated
    assert profiles[GROUNDING_BOX].enc == (0, 0, 0)
    assert profiles[GROUNDING_BOX].dec == (1, 0, 0, 0, 0)
    assert profiles[CLASS_AGNOSTIC].enc == (1, 5, 2)
    assert profiles[CLASS_AGNOSTIC].dec == (0, 5, 2, 5, 5)
    assert profiles[GROUNDING_MASK].enc == (0, 5, 2)
    assert profiles[GROUNDING_MASK].dec == (1, 5, 2, 5, 5)


def test_profile_invariants_enforced():
    with pytest.raises(ValueError):
        SupervisionProfile(CLASS_AGNOSTIC, (1, 5, 2), (1, 5, 2, 5, 5))
    with pytest.raises(ValueError):
        SupervisionProfile(GROUNDING_BOX, (0, 0, 0), (1, 0, 0, 5, 5))
    with pytest.raises(ValueError):
        SupervisionProfile(EXHAUSTIVE, (-1, 5, 2), (1, 5, 2, 5, 5))


def test_prose_grounding_variant():
    profiles = default_profiles(prose_grounding_rule=True)
    assert profiles[GROUNDING_MASK].enc == (0, 0, 0)
    assert profiles[GROUNDING_MASK].dec == (1, 5, 2, 5, 5)


# ---------------------------------------------------------------------------
# total loss


class FakeOutputs:
    def __init__(self, rng, q=6, m=8, n_cols=4, layers=2, mask=8, dtype=torch.float64):
        self.enc_objectness = torch.tensor(rng.standard_normal(m), dtype=dtype)
        self.anchors = random_boxes(rng, m).to(dtype)
        self.enc_boxes = (self.anchors + 0.01).clamp(0.01, 0.99)
        self.layer_scores = [
            torch.tensor(rng.standard_normal((q, n_cols)), dtype=dtype)
            for _ in range(layers)
        ]
        self.layer_boxes = [random_boxes(rng, q).to(dtype) for _ in range(layers)]
        self.mask_logits = torch.tensor(rng.standard_normal((q, mask, mask)), dtype=dtype)
        self.n_real_cols = n_cols


def fake_target(rng, t=2, n_cols=4, mask=8, kind=EXHAUSTIVE, dtype=torch.float64):
    return TrainTarget(
        boxes=random_boxes(rng, t).to(dtype),
        prompt_cols=torch.tensor(rng.integers(0, n_cols, t)),
        masks=torch.tensor(rng.random((t, mask, mask)) < 0.4),
        present_cols=(0,),
        kind=kind,
    )


def test_total_equals_weighted_sum():
    rng = np.random.default_rng(10)
    outputs = FakeOutputs(rng)
    target = fake_target(rng)
    report = total_loss(outputs, target, default_profiles()[EXHAUSTIVE])
    recomputed = sum(report.weighted.values())
    assert abs(float(report.total) - float(recomputed)) < 1e-9
    assert all(np.isfinite(v) and v >= 0 for v in report.terms.values())


def test_zero_weight_terms_not_computed():
    rng = np.random.default_rng(11)
    outputs = FakeOutputs(rng)
    target = fake_target(rng, kind=GROUNDING_BOX)
    target.masks = None
    report = total_loss(outputs, target, default_profiles()[GROUNDING_BOX])
    assert set(report.terms) == {"dec_class"}


def test_kind_mismatch_rejected():
    rng = np.random.default_rng(12)
    outputs = FakeOutputs(rng)
    target = fake_target(rng, kind=EXHAUSTIVE)
    with pytest.raises(ValueError, match="kind"):
        total_loss(outputs, target, default_profiles()[FEDERATED])


def test_mask_profile_requires_masks():
    rng = np.random.default_rng(13)
    outputs = FakeOutputs(rng)
    target = fake_target(rng)
    target.masks = None
    with pytest.raises(ValueError, match="mask"):
        total_loss(outputs, target, default_profiles()[EXHAUSTIVE])


def test_federated_requires_rng():
    rng = np.random.default_rng(14)
    outputs = FakeOutputs(rng)
    target = fake_target(rng, kind=FEDERATED)
    with pytest.raises(ValueError, match="rng"):
        total_loss(outputs, target, default_profiles()[FEDERATED])
    report = total_loss(
        outputs, target, default_profiles()[FEDERATED], rng=np.random.default_rng(0)
    )
    assert float(report.total) > 0


def test_empty_targets_background_only():
    rng = np.random.default_rng(15)
    outputs = FakeOutputs(rng)
    target = TrainTarget(
        boxes=torch.zeros((0, 4), dtype=torch.float64),
        prompt_cols=torch.zeros(0, dtype=torch.long),
        masks=torch.zeros((0, 8, 8), dtype=torch.bool),
        kind=EXHAUSTIVE,
    )
    report = total_loss(outputs, target, default_profiles()[EXHAUSTIVE])
    assert "enc_class" in report.terms and "dec_class" in report.terms
    assert "dec_bbox" not in report.terms


# ---------------------------------------------------------------------------
# gradient correctness (directional central differences, float64)


def _grad_trials(make_case, n_trials=100, rel_tol=1e-4):
    rng = np.random.default_rng(1234)
    for _ in range(n_trials):
        fn, tensors = make_case(rng)
        directional_check(fn, tensors, rng, rel_tol=rel_tol)


def test_grad_focal():
    def case(rng):
        logits = torch.tensor(rng.standard_normal((5, 4)), requires_grad=True)
        targets = torch.tensor((rng.random((5, 4)) < 0.3).astype(float))
        return (lambda s: focal_loss(s, targets)), [logits]

    _grad_trials(case)


def test_grad_federated_focal():
    def case(rng):
        logits = torch.tensor(rng.standard_normal((5, 6)), requires_grad=True)
        targets = torch.tensor((rng.random((5, 6)) < 0.3).astype(float))
        allowed = torch.tensor(sorted(rng.choice(6, size=3, replace=False)))
        return (lambda s: federated_focal(s, targets, allowed)), [logits]

    _grad_trials(case)


def test_grad_l1():
    def case(rng):
        pred = random_boxes(rng, 4).requires_grad_(True)
        gt = random_boxes(rng, 4)
        # keep coordinates away from the |x| kink so the FD window is valid
        with torch.no_grad():
            close = (pred - gt).abs() < 1e-3
            gt[close] += 5e-3
        return (lambda p: l1_box(p, gt)), [pred]

    _grad_trials(case)


def test_grad_giou():
    def case(rng):
        pred = random_boxes(rng, 4).requires_grad_(True)
        gt = random_boxes(rng, 4)
        return (lambda p: giou_loss(p, gt)), [pred]

    _grad_trials(case)


def test_grad_mask_ce():
    def case(rng):
        logits = torch.tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
        gt = torch.tensor((rng.random((3, 6, 6)) < 0.5).astype(float))
        return (lambda s: mask_ce(s, gt)), [logits]

    _grad_trials(case)


def test_grad_dice():
    def case(rng):
        logits = torch.tensor(rng.standard_normal((3, 6, 6)), requires_grad=True)
        gt = torch.tensor((rng.random((3, 6, 6)) < 0.5).astype(float))
        return (lambda s: dice_loss(torch.sigmoid(s), gt)), [logits]

    _grad_trials(case)
