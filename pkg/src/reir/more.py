"""Mix of relation experts: shared experts plus top-k gated routed experts.

The refined embedding is

    T = sum_j shared_j(f) + sum_k gate_k(f) * routed_k(f)

where ``gate = softmax(W f + c)`` with everything outside the top-k zeroed.
The surviving gate values are *not* renormalised.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DTYPE,
    AffineParams,
    DimensionError,
    FeedForwardParams,
    affine_backward,
    affine_forward,
    ffn_arrays,
    ffn_backward,
    ffn_forward_cached,
    ffn_from_arrays,
    init_affine,
    init_ffn,
    softmax,
)


@dataclass(frozen=True)
class MoreConfig:
    n_shared: int = 1
    n_routed: int = 4
    k_routed: int = 2
    dim_in: int = 32
    dim_hidden: int = 64
    dim_out: int = 32

    def __post_init__(self):
        if self.n_shared < 1:
            raise ValueError("n_shared must be positive")
        if self.n_routed < 0 or self.k_routed < 0:
            raise ValueError("n_routed and k_routed must be non-negative")
        if self.k_routed > self.n_routed:
            raise ValueError(f"k_routed={self.k_routed} exceeds n_routed={self.n_routed}")


@dataclass(frozen=True)
class MoreParams:
    shared_experts: tuple[FeedForwardParams, ...]
    routed_experts: tuple[FeedForwardParams, ...]
    gating: AffineParams
    k_routed: int

    def __post_init__(self):
        if not self.shared_experts:
            raise DimensionError("at least one shared expert is required")
        first = self.shared_experts[0]
        for e in (*self.shared_experts, *self.routed_experts):
            if e.n_in != first.n_in or e.n_out != first.n_out:
                raise DimensionError("all experts must share input and output widths")
        if self.gating.n_out != len(self.routed_experts):
            raise DimensionError(
                f"gating emits {self.gating.n_out} logits for {len(self.routed_experts)} routed experts"
            )
        if self.routed_experts and self.gating.n_in != first.n_in:
            raise DimensionError("gating input width differs from expert input width")
        if not 0 <= self.k_routed <= len(self.routed_experts):
            raise ValueError(f"k_routed={self.k_routed} out of range")

    @property
    def dim_in(self) -> int:
        return self.shared_experts[0].n_in

    @property
    def dim_out(self) -> int:
        return self.shared_experts[0].n_out

    @property
    def n_routed(self) -> int:
        return len(self.routed_experts)

    def to_arrays(self, prefix: str = "more") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for j, e in enumerate(self.shared_experts):
            out.update(ffn_arrays(e, f"{prefix}.shared{j}"))
        for k, e in enumerate(self.routed_experts):
            out.update(ffn_arrays(e, f"{prefix}.routed{k}"))
        out[f"{prefix}.gate.w"] = self.gating.weight
        out[f"{prefix}.gate.b"] = self.gating.bias
        return out

    @classmethod
    def from_arrays(
        cls, arrays: dict[str, np.ndarray], n_shared: int, n_routed: int, k_routed: int, prefix: str = "more"
    ) -> "MoreParams":
        return cls(
            tuple(ffn_from_arrays(arrays, f"{prefix}.shared{j}") for j in range(n_shared)),
            tuple(ffn_from_arrays(arrays, f"{prefix}.routed{k}") for k in range(n_routed)),
            AffineParams(arrays[f"{prefix}.gate.w"], arrays[f"{prefix}.gate.b"]),
            k_routed,
        )


@dataclass
class GateVector:
    raw: np.ndarray
    masked: np.ndarray
    active_set: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def init_more(rng: np.random.Generator, cfg: MoreConfig) -> MoreParams:
    shared = tuple(init_ffn(rng, cfg.dim_in, cfg.dim_hidden, cfg.dim_out) for _ in range(cfg.n_shared))
    return MoreParams(shared, init_routed(rng, cfg), init_gating(rng, cfg), cfg.k_routed)


def init_routed(rng: np.random.Generator, cfg: MoreConfig) -> tuple[FeedForwardParams, ...]:
    return tuple(init_ffn(rng, cfg.dim_in, cfg.dim_hidden, cfg.dim_out) for _ in range(cfg.n_routed))


def init_gating(rng: np.random.Generator, cfg: MoreConfig) -> AffineParams:
    if cfg.n_routed == 0:
        return empty_gating(cfg.dim_in)
    return init_affine(rng, cfg.dim_in, cfg.n_routed)


def empty_gating(dim_in: int) -> AffineParams:
    return AffineParams(np.zeros((0, dim_in), dtype=DTYPE), np.zeros(0, dtype=DTYPE))


def top_k_mask(raw: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the lower index."""
    raw2 = np.atleast_2d(raw)
    n = raw2.shape[-1]
    mask = np.zeros(raw2.shape, dtype=bool)
    if k > 0 and n > 0:
        # stable sort on -raw keeps lower indices first among equal values
        order = np.argsort(-raw2, axis=-1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, True, axis=-1)
    return mask.reshape(raw.shape)


def _gate_arrays(p: MoreParams, f_t: np.ndarray):
    if p.n_routed == 0:
        shape = f_t.shape[:-1] + (0,)
        z = np.zeros(shape, dtype=DTYPE)
        return z, z.copy(), np.zeros(shape, dtype=bool)
    raw = softmax(affine_forward(p.gating, f_t))
    mask = top_k_mask(raw, p.k_routed)
    return raw, np.where(mask, raw, 0.0), mask


def gate_forward(p: MoreParams, f_t) -> GateVector:
    f_t = np.asarray(f_t, dtype=DTYPE)
    if f_t.shape[-1] != p.dim_in:
        raise DimensionError(f"expected input of length {p.dim_in}, got {f_t.shape[-1]}")
    raw, masked, mask = _gate_arrays(p, f_t)
    active = np.flatnonzero(mask) if mask.ndim == 1 else np.argwhere(mask)
    return GateVector(raw=raw, masked=masked, active_set=active)


def more_forward(p: MoreParams, f_t) -> np.ndarray:
    return more_forward_cached(p, f_t)[0]


def more_forward_cached(p: MoreParams, f_t):
    f_t = np.asarray(f_t, dtype=DTYPE)
    if f_t.shape[-1] != p.dim_in:
        raise DimensionError(f"expected input of length {p.dim_in}, got {f_t.shape[-1]}")
    out = np.zeros(f_t.shape[:-1] + (p.dim_out,), dtype=DTYPE)
    shared_caches = []
    for e in p.shared_experts:
        y, c = ffn_forward_cached(e, f_t)
        out = out + y
        shared_caches.append(c)
    raw, masked, mask = _gate_arrays(p, f_t)
    routed = []
    for k, e in enumerate(p.routed_experts):
        y, c = ffn_forward_cached(e, f_t)
        routed.append((y, c))
        # an inactive expert adds an exact 0.0 here, leaving ``out`` bitwise intact
        out = out + masked[..., k : k + 1] * y
    return out, (f_t, shared_caches, routed, raw, mask)


def more_backward(p: MoreParams, cache, upstream, prefix: str = "more"):
    """Gradients of ``<upstream, T>`` w.r.t. all MORE parameters and the input.

    Returns ``(grads, d_f_t)`` with ``grads`` keyed like :meth:`MoreParams.to_arrays`.
    """
    f_t, shared_caches, routed, raw, mask = cache
    upstream = np.asarray(upstream, dtype=DTYPE)
    batched = f_t.ndim == 2
    grads: dict[str, np.ndarray] = {}
    d_f = np.zeros_like(f_t)
    for j, (e, c) in enumerate(zip(p.shared_experts, shared_caches)):
        g, dx = ffn_backward(e, c, upstream)
        grads.update({f"{prefix}.shared{j}.{name}": v for name, v in g.items()})
        d_f = d_f + dx
    if p.n_routed:
        d_masked = np.zeros(raw.shape, dtype=DTYPE)
        for k, (e, (y, c)) in enumerate(zip(p.routed_experts, routed)):
            gate_k = np.where(mask[..., k], raw[..., k], 0.0)
            g, dx = ffn_backward(e, c, gate_k[..., None] * upstream)
            grads.update({f"{prefix}.routed{k}.{name}": v for name, v in g.items()})
            d_f = d_f + dx
            d_masked[..., k] = np.sum(upstream * y, axis=-1)
        d_raw = np.where(mask, d_masked, 0.0)
        # softmax Jacobian-vector product
        d_logits = raw * (d_raw - np.sum(raw * d_raw, axis=-1, keepdims=True))
        dw, db, dx = affine_backward(p.gating, f_t, d_logits)
        grads[f"{prefix}.gate.w"] = dw
        grads[f"{prefix}.gate.b"] = db
        d_f = d_f + dx
    else:
        grads[f"{prefix}.gate.w"] = np.zeros_like(p.gating.weight)
        grads[f"{prefix}.gate.b"] = np.zeros_like(p.gating.bias)
    if not batched:
        d_f = d_f.reshape(f_t.shape)
    return grads, d_f
