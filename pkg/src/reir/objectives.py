"""Training losses and their analytic gradients.

Every loss here is a function of the expression-instance score matrix
``S[i, j] = <T_i, O_j>`` and the predicted boxes, so the model only has to
chain ``dL/dS`` and ``dL/dbox`` back through its encoders.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DTYPE, sigmoid, softplus

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class StageError(ValueError):
    """A stage-specific loss was requested for the wrong training stage."""


@dataclass(frozen=True)
class CliaParams:
    """Learnable temperature (stored as ``log_t``) and bias of the sigmoid loss."""

    log_t: float = math.log(10.0)
    b: float = 10.0

    @property
    def t(self) -> float:
        return math.exp(self.log_t)


@dataclass(frozen=True)
class LossBreakdown:
    clia: float
    focal: float
    box_l1: float
    box_giou: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "clia": self.clia,
            "focal": self.focal,
            "box_l1": self.box_l1,
            "box_giou": self.box_giou,
            "total": self.total,
        }


@dataclass(frozen=True)
class LossWeights:
    retrieve: float = 1.0
    box: float = 5.0
    giou: float = 1.0
    l1: float = 1.0
    alpha_switching: bool = True
    use_clia: bool = True


def match_labels(query_targets: np.ndarray, instance_keys: np.ndarray) -> np.ndarray:
    """Build the +1/-1 label matrix from per-query target keys and per-instance keys."""
    return np.where(query_targets[:, None] == instance_keys[None, :], 1.0, -1.0)


def clia_from_scores(scores: np.ndarray, labels: np.ndarray, p: CliaParams):
    """Sigmoid contrastive loss on a score matrix.

    Returns ``(loss, d_scores, d_log_t, d_b)``. The normaliser is the number of
    (expression, instance) pairs.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    if labels.shape != scores.shape:
        raise ValueError(f"labels {labels.shape} do not cover scores {scores.shape}")
    if not np.all(np.abs(labels) == 1.0):
        raise ValueError("labels must be +1 or -1 for every pair")
    n_pairs = scores.size
    if n_pairs == 0:
        raise ValueError("empty batch")
    t = p.t
    u = labels * (-t * scores + p.b)
    loss = float(np.sum(softplus(u)) / n_pairs)
    du = sigmoid(u) / n_pairs
    d_scores = du * labels * (-t)
    d_log_t = float(np.sum(du * labels * (-t) * scores))
    d_b = float(np.sum(du * labels))
    return loss, d_scores, d_log_t, d_b


def clia_loss(T_batch, O_gallery, labels, p: CliaParams):
    """Sigmoid contrastive loss over every (expression, gallery instance) pair.

    ``O_gallery`` is either an ``(N, D)`` matrix or a list of per-image
    ``(N_k, D)`` blocks, concatenated in order. Returns
    ``(loss, d_T, d_O, d_log_t, d_b)`` with ``d_O`` in the flattened layout.
    """
    T = np.atleast_2d(np.asarray(T_batch, dtype=DTYPE))
    if isinstance(O_gallery, (list, tuple)):
        O = np.concatenate([np.atleast_2d(np.asarray(o, dtype=DTYPE)) for o in O_gallery], axis=0)
    else:
        O = np.atleast_2d(np.asarray(O_gallery, dtype=DTYPE))
    scores = T @ O.T
    loss, d_s, d_log_t, d_b = clia_from_scores(scores, labels, p)
    return loss, d_s @ O, d_s.T @ T, d_log_t, d_b


def focal_loss(s, positive, alpha_switching: bool = True, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA):
    """Elementwise focal loss on raw scores. Returns ``(loss, d_loss/d_s)``.

    ``positive`` broadcasts against ``s``. With ``alpha_switching`` negatives
    are weighted by ``1 - alpha``, otherwise every pair uses ``alpha``.
    """
    s = np.asarray(s, dtype=DTYPE)
    positive = np.broadcast_to(np.asarray(positive, dtype=bool), s.shape)
    # p_t = sigmoid(m) with m = s for positives, -s for negatives
    sign = np.where(positive, 1.0, -1.0)
    m = sign * s
    p_t = sigmoid(m)
    q = 1.0 - p_t
    log_p_t = -softplus(-m)
    alpha_t = np.where(positive, alpha, 1.0 - alpha if alpha_switching else alpha)
    loss = -alpha_t * q**gamma * log_p_t
    # d/dm of -(1-p)^g log p with dp/dm = p(1-p)
    d_m = -alpha_t * (-gamma * p_t * q**gamma * log_p_t + q ** (gamma + 1.0))
    d_s = sign * d_m
    if loss.ndim == 0:
        return float(loss), float(d_s)
    return loss, d_s


def _giou_parts(pred: np.ndarray, gt: np.ndarray):
    px1, py1, pw, ph = pred.T
    gx1, gy1, gw, gh = gt.T
    px2, py2 = px1 + pw, py1 + ph
    gx2, gy2 = gx1 + gw, gy1 + gh
    ix_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    iy_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    ix = np.clip(ix_raw, 0.0, None)
    iy = np.clip(iy_raw, 0.0, None)
    inter = ix * iy
    union = pw * ph + gw * gh - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    area_c = cw * ch
    return dict(
        px1=px1, py1=py1, px2=px2, py2=py2, gx1=gx1, gy1=gy1, gx2=gx2, gy2=gy2,
        ix_raw=ix_raw, iy_raw=iy_raw, ix=ix, iy=iy, inter=inter, union=union,
        cw=cw, ch=ch, area_c=area_c, pw=pw, ph=ph,
    )


def giou_loss_arrays(pred: np.ndarray, gt: np.ndarray):
    """Per-row ``1 - IoU + (A_c - U) / A_c`` and its gradient w.r.t. ``pred`` (xywh)."""
    g = _giou_parts(pred, gt)
    inter, union, area_c = g["inter"], g["union"], g["area_c"]
    loss = 1.0 - inter / union + (area_c - union) / area_c
    # loss = 2 - I/U - U/A
    d_inter = -1.0 / union
    d_union = inter / union**2 - 1.0 / area_c
    d_area_c = union / area_c**2
    d_inter = d_inter + d_union * -1.0  # union = pw*ph + gw*gh - inter

    # intersection extents
    in_x = g["ix_raw"] > 0
    in_y = g["iy_raw"] > 0
    d_ix = np.where(in_x, d_inter * g["iy"], 0.0)
    d_iy = np.where(in_y, d_inter * g["ix"], 0.0)
    p_right_min = g["px2"] < g["gx2"]
    p_left_max = g["px1"] > g["gx1"]
    p_bottom_min = g["py2"] < g["gy2"]
    p_top_max = g["py1"] > g["gy1"]
    d_px2 = d_ix * p_right_min
    d_px1 = -d_ix * p_left_max
    d_py2 = d_iy * p_bottom_min
    d_py1 = -d_iy * p_top_max

    # enclosing box extents
    d_cw = d_area_c * g["ch"]
    d_ch = d_area_c * g["cw"]
    d_px2 = d_px2 + d_cw * (g["px2"] > g["gx2"])
    d_px1 = d_px1 - d_cw * (g["px1"] < g["gx1"])
    d_py2 = d_py2 + d_ch * (g["py2"] > g["gy2"])
    d_py1 = d_py1 - d_ch * (g["py1"] < g["gy1"])

    # own area inside the union
    d_pw_area = d_union * g["ph"]
    d_ph_area = d_union * g["pw"]

    grad = np.empty_like(pred)
    grad[:, 0] = d_px1 + d_px2
    grad[:, 1] = d_py1 + d_py2
    grad[:, 2] = d_px2 + d_pw_area
    grad[:, 3] = d_py2 + d_ph_area
    return loss, grad


def box_loss_arrays(pred: np.ndarray, gt: np.ndarray):
    """Mean l1 and mean GIoU terms over rows plus their gradients w.r.t. ``pred``.

    Returns ``(l1, giou, d_l1, d_giou)``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=DTYPE))
    gt = np.atleast_2d(np.asarray(gt, dtype=DTYPE))
    if np.any(gt[:, 2:] <= 0):
        raise ValueError("degenerate ground-truth box")
    n = pred.shape[0]
    diff = pred - gt
    l1 = float(np.abs(diff).sum() / n)
    d_l1 = np.sign(diff) / n
    giou, d_giou = giou_loss_arrays(pred, gt)
    return l1, float(giou.sum() / n), d_l1, d_giou / n


def box_loss(pred, gt, lambda_giou: float = 1.0, lambda_l1: float = 1.0):
    """``lambda_giou * L_giou + lambda_l1 * ||pred - gt||_1`` and its gradient.

    Accepts :class:`~reir.metrics.Box` objects or xywh sequences/arrays.
    """
    p = _as_xywh(pred)
    g = _as_xywh(gt)
    l1, giou, d_l1, d_giou = box_loss_arrays(p, g)
    loss = lambda_giou * giou + lambda_l1 * l1
    grad = lambda_giou * d_giou + lambda_l1 * d_l1
    if np.ndim(pred) == 1 or hasattr(pred, "as_list"):
        grad = grad[0]
    return loss, grad


def _as_xywh(b) -> np.ndarray:
    if hasattr(b, "as_list"):
        return np.array([b.as_list()], dtype=DTYPE)
    return np.atleast_2d(np.asarray(b, dtype=DTYPE))


@dataclass
class ScoredBatch:
    """Everything the stage objectives need from one forward pass.

    ``scores`` is (B, N); ``positive`` marks each query's referent and
    ``same_image`` marks the instances of the query's own image.
    """

    scores: np.ndarray
    positive: np.ndarray
    same_image: np.ndarray
    pred_boxes: np.ndarray
    gt_boxes: np.ndarray


@dataclass
class ObjectiveGrads:
    d_scores: np.ndarray
    d_boxes: np.ndarray
    d_log_t: float = 0.0
    d_b: float = 0.0


def _focal_terms(batch: ScoredBatch, alpha_switching: bool):
    loss, d_s = focal_loss(batch.scores, batch.positive, alpha_switching)
    n_q = batch.scores.shape[0]
    mask = batch.same_image
    return float(np.sum(loss * mask) / n_q), d_s * mask / n_q


def pretrain_loss(batch: ScoredBatch, weights: LossWeights = LossWeights(), stage: int = 1):
    """Grounding objective: focal (own image only) plus box regression."""
    if stage != 1:
        raise StageError(f"pretrain_loss used in stage {stage}")
    focal, d_focal = _focal_terms(batch, weights.alpha_switching)
    l1, giou, d_l1, d_giou = box_loss_arrays(batch.pred_boxes, batch.gt_boxes)
    box_total = weights.giou * giou + weights.l1 * l1
    total = focal + box_total
    grads = ObjectiveGrads(d_focal, weights.giou * d_giou + weights.l1 * d_l1)
    return LossBreakdown(0.0, focal, l1, giou, total), grads


def finetune_loss(batch: ScoredBatch, p: CliaParams, weights: LossWeights = LossWeights(), stage: int = 2):
    """Full objective: ``w_r * (clia + focal) + w_box * box``."""
    if stage != 2:
        raise StageError(f"finetune_loss used in stage {stage}")
    focal, d_focal = _focal_terms(batch, weights.alpha_switching)
    if weights.use_clia:
        labels = np.where(batch.positive, 1.0, -1.0)
        clia, d_clia, d_log_t, d_b = clia_from_scores(batch.scores, labels, p)
    else:
        clia, d_clia, d_log_t, d_b = 0.0, 0.0, 0.0, 0.0
    l1, giou, d_l1, d_giou = box_loss_arrays(batch.pred_boxes, batch.gt_boxes)
    box_total = weights.giou * giou + weights.l1 * l1
    total = weights.retrieve * (clia + focal) + weights.box * box_total
    grads = ObjectiveGrads(
        weights.retrieve * (d_clia + d_focal),
        weights.box * (weights.giou * d_giou + weights.l1 * d_l1),
        weights.retrieve * d_log_t,
        weights.retrieve * d_b,
    )
    return LossBreakdown(clia, focal, l1, giou, total), grads
