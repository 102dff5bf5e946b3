import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reir.metrics import Box
from reir.numerics import make_rng
from reir.objectives import (
    CliaParams,
    LossWeights,
    ScoredBatch,
    StageError,
    box_loss,
    box_loss_arrays,
    clia_from_scores,
    clia_loss,
    finetune_loss,
    focal_loss,
    giou_loss_arrays,
    match_labels,
    pretrain_loss,
)

from gradcheck import TOL, check


def labels_for(targets, n):
    return match_labels(np.asarray(targets), np.arange(n))


class TestClia:
    def test_single_positive_at_zero(self):
        loss, *_ = clia_loss([[0.0, 0.0]], [[1.0, 0.0]], [[1.0]], CliaParams(log_t=0.0, b=0.0))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_negative(self):
        # <T, O> = -10, z = -1: log(1 + e^-10)
        loss, *_ = clia_loss([[-10.0]], [[1.0]], [[-1.0]], CliaParams(log_t=0.0, b=0.0))
        assert loss == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
        assert loss == pytest.approx(4.54e-5, rel=1e-3)

    def test_saturated_positive(self):
        loss, *_ = clia_loss([[1e6]], [[1.0]], [[1.0]], CliaParams(log_t=0.0, b=0.0))
        assert 0.0 <= loss < 1e-300 or loss == 0.0

    def test_per_image_blocks_equal_flat(self):
        rng = make_rng(0)
        T = rng.normal(size=(2, 3))
        blocks = [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))]
        lab = labels_for([1, 3], 5)
        flat = clia_loss(T, np.concatenate(blocks), lab, CliaParams())
        split = clia_loss(T, blocks, lab, CliaParams())
        assert flat[0] == split[0]
        np.testing.assert_array_equal(flat[2], split[2])

    def test_missing_labels_rejected(self):
        with pytest.raises(ValueError):
            clia_loss(np.ones((2, 3)), np.ones((4, 3)), np.ones((2, 3)), CliaParams())
        with pytest.raises(ValueError):
            clia_from_scores(np.zeros((1, 2)), np.array([[1.0, 0.0]]), CliaParams())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        rng = make_rng(seed)
        T, O = rng.normal(size=(3, 4)) * 3, rng.normal(size=(6, 4)) * 3
        lab = labels_for(rng.integers(0, 6, size=3), 6)
        loss, *_ = clia_loss(T, O, lab, CliaParams(rng.normal(), rng.normal() * 5))
        assert loss >= 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_swapping_negatives_is_invariant(self, seed):
        rng = make_rng(seed)
        T, O = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
        lab = labels_for([0, 1], 5)
        base, *_ = clia_loss(T, O, lab, CliaParams())
        perm = [0, 1, 4, 3, 2]
        swapped, *_ = clia_loss(T, O[perm], lab[:, perm], CliaParams())
        assert abs(base - swapped) <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = make_rng(seed)
        B, N, D = 3, 5, 4
        T, O = rng.normal(size=(B, D)), rng.normal(size=(N, D))
        lab = labels_for(rng.permutation(N)[:B], N)
        p = CliaParams(log_t=rng.normal() * 0.5, b=rng.normal() * 2)
        loss, dT, dO, dlt, db = clia_loss(T, O, lab, p)
        assert check(lambda x: clia_loss(x, O, lab, p)[0], T, dT) < TOL
        assert check(lambda x: clia_loss(T, x, lab, p)[0], O, dO) < TOL
        assert check(lambda x: clia_loss(T, O, lab, CliaParams(x[0], p.b))[0], [p.log_t], [dlt]) < TOL
        assert check(lambda x: clia_loss(T, O, lab, CliaParams(p.log_t, x[0]))[0], [p.b], [db]) < TOL

    def test_fd_on_two_by_two(self):
        T = np.array([[0.5, -0.2], [0.1, 0.4]])
        O = np.array([[0.3, 0.3], [-0.6, 0.2]])
        lab = np.array([[1.0, -1.0], [-1.0, 1.0]])
        _, dT, *_ = clia_loss(T, O, lab, CliaParams())
        assert check(lambda x: clia_loss(x, O, lab, CliaParams())[0], T, dT) < TOL


class TestFocal:
    def test_positive_at_zero(self):
        loss, _ = focal_loss(0.0, True)
        assert loss == pytest.approx(-0.25 * 0.25 * math.log(0.5), abs=1e-15)
        assert loss == pytest.approx(0.043322, abs=5e-7)

    def test_negative_at_zero(self):
        loss, _ = focal_loss(0.0, False)
        assert loss == pytest.approx(-0.75 * 0.25 * math.log(0.5), abs=1e-15)
        # the formula gives 0.12996510, so a 6-digit rounding is 0.129965
        assert loss == pytest.approx(0.129966, abs=1e-6)

    def test_constant_alpha(self):
        loss, _ = focal_loss(0.0, False, alpha_switching=False)
        assert loss == pytest.approx(0.043322, abs=5e-7)

    def test_perfect_positive(self):
        assert focal_loss(60.0, True)[0] < 1e-25

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-30, 30), st.floats(1e-3, 5))
    def test_monotone(self, s, step):
        assert focal_loss(s + step, True)[0] < focal_loss(s, True)[0]
        assert focal_loss(s + step, False)[0] > focal_loss(s, False)[0]

    @pytest.mark.parametrize("positive", [True, False])
    def test_gradient(self, positive):
        # one score at a time: summing 25 losses adds ~1e-10 of roundoff to
        # every difference quotient, which swamps the 1e-7 tail gradients
        for s in np.linspace(-6, 6, 25):
            _, ds = focal_loss(s, positive)
            assert check(lambda x: focal_loss(x[0], positive)[0], [s], [ds]) < TOL


def boxes(rng, n):
    xy = rng.uniform(0, 1, size=(n, 2))
    wh = rng.uniform(0.2, 1.0, size=(n, 2))
    return np.concatenate([xy, wh], axis=1)


class TestBox:
    def test_identity(self):
        assert box_loss(Box(1, 2, 3, 4), Box(1, 2, 3, 4))[0] == 0.0

    def test_disjoint_giou(self):
        loss, _ = box_loss(Box(0, 0, 1, 1), Box(9, 0, 1, 1), lambda_giou=1.0, lambda_l1=0.0)
        # IoU 0, U = 2, A_c = 10: 1 - 0 + 8/10
        assert loss == pytest.approx(1.8, abs=1e-15)

    def test_l1_offset(self):
        loss, grad = box_loss(Box(1, 1, 2, 2), Box(0, 0, 2, 2), lambda_giou=0.0, lambda_l1=1.0)
        assert loss == 2.0
        assert grad.tolist() == [1.0, 1.0, 0.0, 0.0]

    def test_degenerate_gt(self):
        with pytest.raises(ValueError):
            box_loss([0, 0, 1, 1], [0, 0, 0, 1])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-50, 50), st.floats(-50, 50))
    def test_translation_invariance(self, seed, dx, dy):
        rng = make_rng(seed)
        p, g = boxes(rng, 1)[0], boxes(rng, 1)[0]
        shift = np.array([dx, dy, 0, 0])
        assert abs(box_loss(p, g)[0] - box_loss(p + shift, g + shift)[0]) <= 1e-12

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31))
    def test_giou_range(self, seed):
        rng = make_rng(seed)
        loss, _ = giou_loss_arrays(boxes(rng, 8), boxes(rng, 8))
        assert np.all(loss >= 0) and np.all(loss < 2)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients(self, seed):
        rng = make_rng(seed)
        pred, gt = boxes(rng, 6), boxes(rng, 6)
        l1, giou, d_l1, d_giou = box_loss_arrays(pred, gt)
        assert check(lambda x: box_loss_arrays(x, gt)[1], pred, d_giou) < TOL
        assert check(lambda x: box_loss_arrays(x, gt)[0], pred, d_l1) < TOL


def scored_batch(seed, B=3, per_image=3, images=2):
    rng = make_rng(seed)
    N = per_image * images
    inst_image = np.repeat(np.arange(images), per_image)
    targets = rng.permutation(N)[:B]
    return ScoredBatch(
        scores=rng.normal(size=(B, N)),
        positive=targets[:, None] == np.arange(N)[None, :],
        same_image=inst_image[targets][:, None] == inst_image[None, :],
        pred_boxes=boxes(rng, N),
        gt_boxes=boxes(rng, N),
    )


class TestStageObjectives:
    def test_perfect_batch_is_zero(self):
        b = scored_batch(0)
        b.scores = np.where(b.positive, 80.0, -80.0)
        b.pred_boxes = b.gt_boxes.copy()
        losses, _ = pretrain_loss(b)
        assert losses.total < 1e-30 and losses.clia == 0.0

    def test_pretrain_additivity(self):
        losses, _ = pretrain_loss(scored_batch(1))
        assert abs(losses.total - (losses.focal + losses.box_l1 + losses.box_giou)) <= 1e-12

    def test_pretrain_summation_oracle(self):
        b = scored_batch(2)
        losses, _ = pretrain_loss(b)
        focal = 0.0
        for i in range(b.scores.shape[0]):
            for j in range(b.scores.shape[1]):
                if b.same_image[i, j]:
                    focal += focal_loss(b.scores[i, j], bool(b.positive[i, j]))[0]
        focal /= b.scores.shape[0]
        box = sum(box_loss(b.pred_boxes[j], b.gt_boxes[j])[0] for j in range(len(b.gt_boxes))) / len(b.gt_boxes)
        assert losses.focal == pytest.approx(focal, abs=1e-12)
        assert losses.total == pytest.approx(focal + box, abs=1e-12)

    def test_finetune_zero_box(self):
        b = scored_batch(3)
        b.pred_boxes = b.gt_boxes.copy()
        losses, _ = finetune_loss(b, CliaParams())
        assert losses.total == pytest.approx(losses.clia + losses.focal, abs=1e-12)

    def test_finetune_masking(self):
        b = scored_batch(4)
        losses, _ = finetune_loss(b, CliaParams(), LossWeights(retrieve=0.0, box=2.5))
        assert losses.total == pytest.approx(2.5 * (losses.box_l1 + losses.box_giou), abs=1e-12)

    def test_finetune_summation_oracle(self):
        b = scored_batch(5)
        p = CliaParams()
        losses, _ = finetune_loss(b, p)
        lab = np.where(b.positive, 1.0, -1.0)
        clia = np.mean(np.log1p(np.exp(lab * (-p.t * b.scores + p.b))))
        assert losses.clia == pytest.approx(clia, rel=1e-12)
        expected = clia + losses.focal + 5.0 * (losses.box_l1 + losses.box_giou)
        assert losses.total == pytest.approx(expected, abs=1e-12)

    def test_no_clia_flag(self):
        losses, grads = finetune_loss(scored_batch(6), CliaParams(), LossWeights(use_clia=False))
        assert losses.clia == 0.0 and grads.d_log_t == 0.0

    def test_stage_mismatch(self):
        with pytest.raises(StageError):
            pretrain_loss(scored_batch(0), stage=2)
        with pytest.raises(StageError):
            finetune_loss(scored_batch(0), CliaParams(), stage=1)

    @pytest.mark.parametrize("seed", range(5))
    def test_finetune_score_gradient(self, seed):
        b = scored_batch(seed)
        _, g = finetune_loss(b, CliaParams())

        def f(s):
            return finetune_loss(ScoredBatch(s, b.positive, b.same_image, b.pred_boxes, b.gt_boxes), CliaParams())[0].total

        assert check(f, b.scores, g.d_scores) < TOL

    def test_components_nonnegative(self):
        for seed in range(10):
            losses, _ = finetune_loss(scored_batch(seed), CliaParams())
            assert min(losses.as_dict().values()) >= 0
