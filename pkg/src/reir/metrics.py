"""Box geometry and the REIR evaluation protocols.

Boxes are ``[x, y, w, h]`` with ``(x, y)`` the top-left corner. All
thresholds are strict (``IoU > tau``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class EmptyEvaluationError(ValueError):
    """Raised when a metric is requested over zero items."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box with w={self.w}, h={self.h}")

    @classmethod
    def from_seq(cls, v: Sequence[float]) -> "Box":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @property
    def area(self) -> float:
        return self.w * self.h


def _extent(a0: float, aw: float, b0: float, bw: float) -> tuple[float, float]:
    """1-D overlap and enclosing length, measured from ``a0``.

    Working with the origin offset keeps (x + w) - x cancellation out of the
    result, so identical intervals overlap by exactly their width.
    """
    if (b0, bw) < (a0, aw):  # fixed argument order keeps iou bitwise symmetric
        a0, aw, b0, bw = b0, bw, a0, aw
    d = b0 - a0
    overlap = min(max(0.0, min(aw, d + bw) - max(0.0, d)), aw, bw)
    return overlap, max(aw, d + bw) - min(0.0, d)


def giou_terms(a: Box, b: Box) -> tuple[float, float, float]:
    """Return ``(iou, enclosing_area, union_area)``."""
    ix, cx = _extent(a.x, a.w, b.x, b.w)
    iy, cy = _extent(a.y, a.h, b.y, b.h)
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union, cx * cy, union


def iou(a: Box, b: Box) -> float:
    return giou_terms(a, b)[0]


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU for ``(n, 4)`` xywh arrays."""
    swap = (b[:, :2] < a[:, :2]) | ((b[:, :2] == a[:, :2]) & (b[:, 2:] < a[:, 2:]))
    a0, b0 = np.where(swap, b[:, :2], a[:, :2]), np.where(swap, a[:, :2], b[:, :2])
    aw, bw = np.where(swap, b[:, 2:], a[:, 2:]), np.where(swap, a[:, 2:], b[:, 2:])
    d = b0 - a0
    lo = np.maximum(0.0, d)
    hi = np.minimum(aw, d + bw)
    side = np.minimum(np.clip(hi - lo, 0, None), np.minimum(aw, bw))
    inter = side[:, 0] * side[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / union


def precision_at_iou(pairs: Iterable[tuple[Box, Box]], tau: float) -> float:
    """Fraction of ``(pred, gt)`` pairs whose IoU strictly exceeds ``tau``."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyEvaluationError("precision_at_iou over an empty list")
    return sum(iou(p, g) > tau for p, g in pairs) / len(pairs)


def recall_at_k(rankings: Sequence[Sequence[int]], gt_images: Sequence[int], k: int) -> float:
    """Fraction of queries whose ground-truth image is in the first ``k`` images.

    ``rankings[i]`` is the image-level ranking for query ``i``. ``k`` beyond
    the ranking length is clamped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not rankings:
        raise EmptyEvaluationError("recall_at_k over zero queries")
    hits = sum(gt in list(r[:k]) for r, gt in zip(rankings, gt_images))
    return hits / len(rankings)


@dataclass(frozen=True)
class RankedCandidate:
    image_id: int
    instance_id: int
    score: float
    predicted_box: Box


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    instance_id: int
    box: Box


def candidate_sort_key(c: RankedCandidate):
    return (-c.score, c.image_id, c.instance_id)


def is_box_hit(c: RankedCandidate, gt: GroundTruth, tau: float, identity_mode: str) -> bool:
    if c.image_id != gt.image_id:
        return False
    if identity_mode == "strict" and c.instance_id != gt.instance_id:
        return False
    return iou(c.predicted_box, gt.box) > tau


def box_recall_at_k(
    rankings: Sequence[Sequence[RankedCandidate]],
    ground_truth: Sequence[GroundTruth],
    k: int,
    tau: float,
    identity_mode: str = "iou",
) -> float:
    """BoxRecall@k(tau) over instance-level rankings.

    In ``iou`` mode a top-k candidate counts when it lies in the ground-truth
    image and its predicted box overlaps the ground truth by more than
    ``tau``; ``strict`` mode additionally requires the instance id to match.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if identity_mode not in ("iou", "strict"):
        raise ValueError(f"unknown identity mode {identity_mode!r}")
    if not rankings:
        raise EmptyEvaluationError("box_recall_at_k over zero queries")
    hits = 0
    for ranked, gt in zip(rankings, ground_truth):
        if any(is_box_hit(c, gt, tau, identity_mode) for c in ranked[:k]):
            hits += 1
    return hits / len(rankings)


def image_ranking(candidates: Sequence[RankedCandidate]) -> list[int]:
    """Image order induced by a sorted instance ranking (image score = max)."""
    seen: dict[int, None] = {}
    for c in candidates:
        seen.setdefault(c.image_id, None)
    return list(seen)


@dataclass
class MetricReport:
    recall_at_k: dict[int, float]
    precision_at_iou: dict[float, float]
    box_recall: dict[tuple[int, float], float]
    n_queries: int
    index_checksum: int = 0
    spec: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        taus = sorted({tau for _, tau in self.box_recall})
        ks = sorted({k for k, _ in self.box_recall})
        return {
            "n_queries": self.n_queries,
            "index_checksum": f"{self.index_checksum:016x}",
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "precision_at_iou": {_tau_key(t): v for t, v in sorted(self.precision_at_iou.items())},
            "box_recall": {
                _tau_key(t): {str(k): self.box_recall[(k, t)] for k in ks} for t in taus
            },
            "spec": self.spec,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "MetricReport":
        return cls(
            recall_at_k={int(k): v for k, v in doc["recall_at_k"].items()},
            precision_at_iou={float(t): v for t, v in doc["precision_at_iou"].items()},
            box_recall={
                (int(k), float(t)): v for t, row in doc["box_recall"].items() for k, v in row.items()
            },
            n_queries=doc["n_queries"],
            index_checksum=int(doc["index_checksum"], 16),
            spec=dict(doc.get("spec", {})),
        )

    def pretty(self) -> str:
        taus = sorted(self.precision_at_iou)
        ks = sorted(self.recall_at_k)
        head = " | ".join(f"tau={t:g}: " + " ".join(f"BR@{k}" for k in ks) for t in taus)
        row = " | ".join(
            "       " + " ".join(f"{100 * self.box_recall[(k, t)]:5.2f}" for k in ks) for t in taus
        )
        recall = "  ".join(f"R@{k} {100 * self.recall_at_k[k]:.2f}" for k in ks)
        prec = "  ".join(f"P@{t:g} {100 * self.precision_at_iou[t]:.2f}" for t in taus)
        return f"{head}\n{row}\n{recall}\n{prec}\nqueries: {self.n_queries}"


def _tau_key(t: float) -> str:
    return f"{t:g}"
