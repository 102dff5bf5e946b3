"""Toy dual-stream model: instance encoder, expression encoder + MORE, box head.

Backbones are replaced by small feed-forward encoders over synthetic raw
vectors. Scoring is a plain dot product between the refined expression
embedding and the instance feature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .metrics import Box
from .more import MoreConfig, MoreParams, init_more, more_backward, more_forward, more_forward_cached
from .numerics import (
    DTYPE,
    DimensionError,
    FeedForwardParams,
    ffn_arrays,
    ffn_backward,
    ffn_forward,
    ffn_forward_cached,
    ffn_from_arrays,
    init_ffn,
)
from .objectives import (
    CliaParams,
    LossBreakdown,
    LossWeights,
    ScoredBatch,
    finetune_loss,
    pretrain_loss,
)

LOG_SIZE_CLIP = 30.0


@dataclass(frozen=True)
class ModelDims:
    d_raw: int = 32
    d_txt: int = 32
    dim: int = 32
    hidden: int = 64


@dataclass(frozen=True)
class ToyModelParams:
    instance_encoder: FeedForwardParams
    expression_encoder: FeedForwardParams
    more: MoreParams
    box_head: FeedForwardParams
    clia: CliaParams

    def __post_init__(self):
        dim = self.instance_encoder.n_out
        if self.expression_encoder.n_out != self.more.dim_in:
            raise DimensionError("expression encoder output must feed MORE input")
        if self.more.dim_out != dim:
            raise DimensionError("MORE output width must equal the instance feature width")
        if self.box_head.n_in != dim or self.box_head.n_out != 4:
            raise DimensionError("box head must map the feature width to 4 outputs")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            self.instance_encoder.n_in,
            self.expression_encoder.n_in,
            self.instance_encoder.n_out,
            self.instance_encoder.n_hidden,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(ffn_arrays(self.instance_encoder, "inst"))
        out.update(ffn_arrays(self.expression_encoder, "expr"))
        out.update(self.more.to_arrays("more"))
        out.update(ffn_arrays(self.box_head, "box"))
        out["clia.log_t"] = np.array([self.clia.log_t], dtype=DTYPE)
        out["clia.b"] = np.array([self.clia.b], dtype=DTYPE)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], n_shared: int, n_routed: int, k_routed: int):
        return cls(
            ffn_from_arrays(arrays, "inst"),
            ffn_from_arrays(arrays, "expr"),
            MoreParams.from_arrays(arrays, n_shared, n_routed, k_routed, "more"),
            ffn_from_arrays(arrays, "box"),
            CliaParams(float(arrays["clia.log_t"][0]), float(arrays["clia.b"][0])),
        )

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ToyModelParams":
        return ToyModelParams.from_arrays(
            arrays, len(self.more.shared_experts), self.more.n_routed, self.more.k_routed
        )


def init_model(rng: np.random.Generator, dims: ModelDims, more_cfg: MoreConfig) -> ToyModelParams:
    if more_cfg.dim_in != dims.dim or more_cfg.dim_out != dims.dim:
        more_cfg = replace(more_cfg, dim_in=dims.dim, dim_out=dims.dim)
    return ToyModelParams(
        instance_encoder=init_ffn(rng, dims.d_raw, dims.hidden, dims.dim),
        expression_encoder=init_ffn(rng, dims.d_txt, dims.hidden, dims.dim),
        more=init_more(rng, more_cfg),
        box_head=init_ffn(rng, dims.dim, dims.hidden, 4),
        clia=CliaParams(),
    )


def head_to_boxes(head: np.ndarray) -> np.ndarray:
    """Map box-head outputs ``(x, y, log w, log h)`` to xywh."""
    out = np.array(head, dtype=DTYPE, copy=True)
    out[..., 2:] = np.exp(np.clip(out[..., 2:], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
    return out


def encode_instances(p: ToyModelParams, raw) -> tuple[np.ndarray, np.ndarray]:
    """Batch form of :func:`encode_instance`: returns ``(features, boxes_xywh)``."""
    feats = ffn_forward(p.instance_encoder, raw)
    return feats, head_to_boxes(ffn_forward(p.box_head, feats))


def encode_instance(p: ToyModelParams, raw) -> tuple[np.ndarray, Box]:
    feat, box = encode_instances(p, np.asarray(raw, dtype=DTYPE))
    if feat.ndim != 1:
        raise DimensionError("encode_instance expects a single raw vector")
    return feat, Box.from_seq(box)


def encode_expression(p: ToyModelParams, raw) -> np.ndarray:
    return more_forward(p.more, ffn_forward(p.expression_encoder, raw))


def similarity(T, O) -> float:
    T = np.asarray(T, dtype=DTYPE)
    O = np.asarray(O, dtype=DTYPE)
    if T.shape != O.shape:
        raise DimensionError(f"length mismatch {T.shape} vs {O.shape}")
    return float(T @ O)


@dataclass
class TrainBatch:
    """One minibatch of whole images and the queries that refer into them."""

    inst_raw: np.ndarray  # (N, d_raw)
    gt_boxes: np.ndarray  # (N, 4)
    inst_image: np.ndarray  # (N,)
    query_raw: np.ndarray  # (B, d_txt)
    query_target: np.ndarray  # (B,) row index into the instance block

    def positive(self) -> np.ndarray:
        return self.query_target[:, None] == np.arange(len(self.inst_raw))[None, :]

    def same_image(self) -> np.ndarray:
        q_img = self.inst_image[self.query_target]
        return q_img[:, None] == self.inst_image[None, :]


def batch_objective(
    p: ToyModelParams, batch: TrainBatch, stage: int, weights: LossWeights = LossWeights()
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Stage loss on one batch and its gradient for every parameter array."""
    feats, inst_cache = ffn_forward_cached(p.instance_encoder, batch.inst_raw)
    head, box_cache = ffn_forward_cached(p.box_head, feats)
    boxes = head_to_boxes(head)
    f_t, expr_cache = ffn_forward_cached(p.expression_encoder, batch.query_raw)
    T, more_cache = more_forward_cached(p.more, f_t)
    scored = ScoredBatch(T @ feats.T, batch.positive(), batch.same_image(), boxes, batch.gt_boxes)
    if stage == 1:
        losses, g = pretrain_loss(scored, weights, stage)
    else:
        losses, g = finetune_loss(scored, p.clia, weights, stage)

    grads: dict[str, np.ndarray] = {}
    d_head = g.d_boxes.copy()
    clipped = np.abs(head[:, 2:]) >= LOG_SIZE_CLIP
    d_head[:, 2:] = np.where(clipped, 0.0, d_head[:, 2:] * boxes[:, 2:])
    gb, d_feats_box = ffn_backward(p.box_head, box_cache, d_head)
    grads.update({f"box.{k}": v for k, v in gb.items()})

    d_T = g.d_scores @ feats
    d_feats = g.d_scores.T @ T + d_feats_box
    gi, _ = ffn_backward(p.instance_encoder, inst_cache, d_feats)
    grads.update({f"inst.{k}": v for k, v in gi.items()})

    gm, d_f = more_backward(p.more, more_cache, d_T, "more")
    grads.update(gm)
    ge, _ = ffn_backward(p.expression_encoder, expr_cache, d_f)
    grads.update({f"expr.{k}": v for k, v in ge.items()})

    grads["clia.log_t"] = np.array([g.d_log_t], dtype=DTYPE)
    grads["clia.b"] = np.array([g.d_b], dtype=DTYPE)
    return losses, grads


def is_finite_loss(losses: LossBreakdown) -> bool:
    return all(math.isfinite(v) for v in losses.as_dict().values())
