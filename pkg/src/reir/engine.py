"""Precomputed gallery index, exhaustive dot-product ranking and evaluation."""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .binfmt import FormatError, Reader, fnv1a64, seal, unseal
from .metrics import Box, MetricReport, RankedCandidate, iou_arrays
from .numerics import DTYPE, DimensionError

INDEX_MAGIC = b"REIR"
INDEX_VERSION = 1


class DuplicateInstanceError(ValueError):
    pass


class DanglingReferenceError(KeyError):
    def __init__(self, query_id: int, key):
        super().__init__(f"query {query_id} refers to ({key[0]}, {key[1]}), which is not in the index")
        self.query_id = query_id


@dataclass
class InstanceRecord:
    image_id: int
    instance_id: int
    feature: np.ndarray
    box: Box
    gt_box: Optional[Box] = None
    raw: Optional[np.ndarray] = None


@dataclass
class QueryRecord:
    query_id: int
    embedding: np.ndarray
    gt_image_id: int
    gt_instance_id: int
    gt_box: Box
    raw: Optional[np.ndarray] = None
    relational: bool = False


@dataclass(frozen=True)
class EvalSpec:
    ks: tuple[int, ...] = (1, 5, 10)
    taus: tuple[float, ...] = (0.5, 0.7, 0.9)
    identity_mode: str = "iou"

    def __post_init__(self):
        if not self.ks or not self.taus:
            raise ValueError("ks and taus must be non-empty")
        if any(k < 1 for k in self.ks):
            raise ValueError("every k must be >= 1")
        if any(not 0.0 < t < 1.0 for t in self.taus):
            raise ValueError("every tau must lie in (0, 1)")
        if self.identity_mode not in ("iou", "strict"):
            raise ValueError(f"unknown identity mode {self.identity_mode!r}")
        object.__setattr__(self, "ks", tuple(sorted(set(self.ks))))
        object.__setattr__(self, "taus", tuple(sorted(set(self.taus))))

    def to_json(self) -> dict:
        return {"ks": list(self.ks), "taus": list(self.taus), "identity_mode": self.identity_mode}


@dataclass(frozen=True, eq=False)
class GalleryIndex:
    """Immutable gallery in canonical (image_id, instance_id) order.

    Features and boxes are stored as float32; scoring widens to float64.
    """

    dim: int
    image_ids: np.ndarray
    instance_ids: np.ndarray
    flat: np.ndarray  # (N, dim) float32
    pred_boxes: np.ndarray  # (N, 4) float32
    gt_boxes: np.ndarray  # (N, 4) float32
    gt_flags: np.ndarray  # (N,) bool
    checksum: int = 0
    _row_of: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def n_images(self) -> int:
        return len(np.unique(self.image_ids))

    @property
    def images(self) -> list[tuple[int, list[InstanceRecord]]]:
        out: list[tuple[int, list[InstanceRecord]]] = []
        for r in range(len(self)):
            rec = self.record(r)
            if not out or out[-1][0] != rec.image_id:
                out.append((rec.image_id, []))
            out[-1][1].append(rec)
        return out

    def record(self, row: int) -> InstanceRecord:
        gt = Box.from_seq(self.gt_boxes[row]) if self.gt_flags[row] else None
        return InstanceRecord(
            int(self.image_ids[row]),
            int(self.instance_ids[row]),
            self.flat[row].astype(DTYPE),
            Box.from_seq(self.pred_boxes[row]),
            gt,
        )

    def row(self, image_id: int, instance_id: int) -> Optional[int]:
        return self._row_of.get((int(image_id), int(instance_id)))


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _make_index(dim, image_ids, instance_ids, flat, pred, gt, flags) -> GalleryIndex:
    row_of = {(int(i), int(j)): r for r, (i, j) in enumerate(zip(image_ids, instance_ids))}
    idx = GalleryIndex(
        dim,
        _freeze(np.asarray(image_ids, dtype=np.int64)),
        _freeze(np.asarray(instance_ids, dtype=np.int64)),
        _freeze(np.ascontiguousarray(flat, dtype="<f4").reshape(len(image_ids), dim)),
        _freeze(np.ascontiguousarray(pred, dtype="<f4").reshape(-1, 4)),
        _freeze(np.ascontiguousarray(gt, dtype="<f4").reshape(-1, 4)),
        _freeze(np.asarray(flags, dtype=bool)),
        0,
        row_of,
    )
    object.__setattr__(idx, "checksum", fnv1a64(_serialize_body(idx)))
    return idx


def build_index(records: Iterable[InstanceRecord], dim: Optional[int] = None) -> GalleryIndex:
    records = list(records)
    if dim is None:
        dim = len(records[0].feature) if records else 0
    seen: set[tuple[int, int]] = set()
    for rec in records:
        key = (int(rec.image_id), int(rec.instance_id))
        if key in seen:
            raise DuplicateInstanceError(f"duplicate instance (image_id={key[0]}, instance_id={key[1]})")
        seen.add(key)
        if len(rec.feature) != dim:
            raise DimensionError(f"instance {key} has feature length {len(rec.feature)}, expected {dim}")
    records.sort(key=lambda r: (int(r.image_id), int(r.instance_id)))
    n = len(records)
    flat = np.array([r.feature for r in records], dtype=DTYPE).reshape(n, dim)
    pred = np.array([r.box.as_list() for r in records], dtype=DTYPE).reshape(n, 4)
    gt = np.array(
        [r.gt_box.as_list() if r.gt_box is not None else [0.0] * 4 for r in records], dtype=DTYPE
    ).reshape(n, 4)
    flags = np.array([r.gt_box is not None for r in records], dtype=bool)
    return _make_index(
        dim,
        [r.image_id for r in records],
        [r.instance_id for r in records],
        flat,
        pred,
        gt,
        flags,
    )


def build_index_arrays(image_ids, instance_ids, features, pred_boxes, gt_boxes=None) -> GalleryIndex:
    """Array-level :func:`build_index` for large galleries."""
    image_ids = np.asarray(image_ids, dtype=np.int64)
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    features = np.atleast_2d(np.asarray(features, dtype=DTYPE))
    order = np.lexsort((instance_ids, image_ids))
    keys = np.stack([image_ids[order], instance_ids[order]], axis=1)
    if len(keys) > 1:
        dup = np.flatnonzero(np.all(keys[1:] == keys[:-1], axis=1))
        if len(dup):
            i, j = keys[dup[0]]
            raise DuplicateInstanceError(f"duplicate instance (image_id={i}, instance_id={j})")
    n = len(order)
    flags = np.ones(n, dtype=bool) if gt_boxes is not None else np.zeros(n, dtype=bool)
    gt = np.asarray(gt_boxes, dtype=DTYPE)[order] if gt_boxes is not None else np.zeros((n, 4))
    return _make_index(
        features.shape[1], keys[:, 0], keys[:, 1], features[order], np.asarray(pred_boxes)[order], gt, flags
    )


# ---------------------------------------------------------------------------
# ranking


def score_all(index: GalleryIndex, T) -> np.ndarray:
    T = np.asarray(T, dtype=DTYPE)
    if T.shape[-1] != index.dim:
        raise DimensionError(f"query has length {T.shape[-1]}, index dim is {index.dim}")
    return index.flat.astype(DTYPE) @ T.T


def rank_order(index: GalleryIndex, scores: np.ndarray) -> np.ndarray:
    """Row order by (score desc, image_id asc, instance_id asc)."""
    return np.lexsort((index.instance_ids, index.image_ids, -scores))


def rank_query(index: GalleryIndex, T, k: int) -> list[RankedCandidate]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_all(index, T)
    order = rank_order(index, scores)[:k]
    return [
        RankedCandidate(
            int(index.image_ids[r]),
            int(index.instance_ids[r]),
            float(scores[r]),
            Box.from_seq(index.pred_boxes[r]),
        )
        for r in order
    ]


def worker_count() -> int:
    env = os.environ.get("REIR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# evaluation


def _eval_chunk(index: GalleryIndex, T: np.ndarray, gt_rows: np.ndarray, gt_boxes: np.ndarray, spec: EvalSpec):
    n_q = len(T)
    k_max = max(spec.ks)
    ks = np.array(spec.ks)
    taus = np.array(spec.taus)
    recall_hits = np.zeros((n_q, len(ks)), dtype=np.int64)
    box_hits = np.zeros((n_q, len(ks), len(taus)), dtype=np.int64)
    prec_hits = np.zeros((n_q, len(taus)), dtype=np.int64)
    scores = score_all(index, T)  # (N, n_q)
    for q in range(n_q):
        s = scores[:, q]
        order = rank_order(index, s)
        gt_row = gt_rows[q]
        gt_img = index.image_ids[gt_row]
        # image ranking = first appearance in the instance ranking
        uniq, first = np.unique(index.image_ids[order], return_index=True)
        gt_first = first[np.searchsorted(uniq, gt_img)]
        img_rank = int(np.sum(first < gt_first))
        recall_hits[q] = img_rank < ks
        top = order[:k_max]
        same = index.image_ids[top] == gt_img
        if spec.identity_mode == "strict":
            same &= index.instance_ids[top] == index.instance_ids[gt_row]
        ious = iou_arrays(index.pred_boxes[top].astype(DTYPE), np.broadcast_to(gt_boxes[q], (len(top), 4)))
        ok = same[:, None] & (ious[:, None] > taus[None, :])  # (k_max, n_tau)
        first_hit = np.where(ok.any(axis=0), ok.argmax(axis=0), k_max)
        box_hits[q] = first_hit[None, :] < ks[:, None]
        # localisation inside the ground-truth image: its best-scoring instance
        in_img = order[index.image_ids[order] == gt_img][0]
        loc_iou = iou_arrays(index.pred_boxes[[in_img]].astype(DTYPE), gt_boxes[[q]])[0]
        prec_hits[q] = loc_iou > taus
    return recall_hits, box_hits, prec_hits


def _resolve_rows(index: GalleryIndex, queries: Sequence[QueryRecord]) -> np.ndarray:
    rows = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        r = index.row(q.gt_image_id, q.gt_instance_id)
        if r is None:
            raise DanglingReferenceError(q.query_id, (q.gt_image_id, q.gt_instance_id))
        rows[i] = r
    return rows


def evaluate_benchmark(
    index: GalleryIndex, queries: Sequence[QueryRecord], spec: EvalSpec = EvalSpec(), threads: Optional[int] = None
) -> MetricReport:
    if len(index) == 0:
        raise ValueError("cannot evaluate against an empty index")
    if not queries:
        raise ValueError("no queries to evaluate")
    gt_rows = _resolve_rows(index, queries)
    T = np.array([q.embedding for q in queries], dtype=DTYPE)
    if T.shape[1] != index.dim:
        raise DimensionError(f"query embeddings have length {T.shape[1]}, index dim is {index.dim}")
    gt_boxes = np.array([q.gt_box.as_list() for q in queries], dtype=DTYPE)
    n_workers = min(threads or worker_count(), len(queries))
    bounds = np.linspace(0, len(queries), n_workers + 1).astype(int)
    chunks = [(bounds[i], bounds[i + 1]) for i in range(n_workers) if bounds[i] < bounds[i + 1]]
    if len(chunks) == 1:
        parts = [_eval_chunk(index, T, gt_rows, gt_boxes, spec)]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = list(pool.map(lambda c: _eval_chunk(index, T[c[0]:c[1]], gt_rows[c[0]:c[1]], gt_boxes[c[0]:c[1]], spec), chunks))
    recall = np.concatenate([p[0] for p in parts])
    box = np.concatenate([p[1] for p in parts])
    prec = np.concatenate([p[2] for p in parts])
    n = len(queries)
    return MetricReport(
        recall_at_k={k: int(recall[:, i].sum()) / n for i, k in enumerate(spec.ks)},
        precision_at_iou={t: int(prec[:, j].sum()) / n for j, t in enumerate(spec.taus)},
        box_recall={
            (k, t): int(box[:, i, j].sum()) / n for i, k in enumerate(spec.ks) for j, t in enumerate(spec.taus)
        },
        n_queries=n,
        index_checksum=index.checksum,
        spec=spec.to_json(),
    )


# ---------------------------------------------------------------------------
# persistence


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("instance_id", "<u8"), ("gt", "u1"), ("box", "<f4", (4,)), ("pred", "<f4", (4,)), ("feature", "<f4", (dim,))]
    )


def _serialize_body(index: GalleryIndex) -> bytes:
    uniq, starts, counts = np.unique(index.image_ids, return_index=True, return_counts=True)
    parts = [INDEX_MAGIC, struct.pack("<III", INDEX_VERSION, index.dim, len(uniq))]
    rec_dtype = _record_dtype(index.dim)
    for img, s, c in zip(uniq, starts, counts):
        parts.append(struct.pack("<QI", int(img), int(c)))
        recs = np.zeros(c, dtype=rec_dtype)
        recs["instance_id"] = index.instance_ids[s : s + c]
        recs["gt"] = index.gt_flags[s : s + c]
        recs["box"] = index.gt_boxes[s : s + c]
        recs["pred"] = index.pred_boxes[s : s + c]
        recs["feature"] = index.flat[s : s + c]
        parts.append(recs.tobytes())
    return b"".join(parts)


def index_bytes(index: GalleryIndex) -> bytes:
    return seal(_serialize_body(index))


def save_index(index: GalleryIndex, path) -> None:
    Path(path).write_bytes(index_bytes(index))


def _index_length(blob: bytes) -> int:
    """Body length implied by the headers alone."""
    rd = Reader(blob, len(INDEX_MAGIC) + 4)
    dim, n_images = rd.unpack("II")
    size = _record_dtype(dim).itemsize
    for _ in range(n_images):
        _, count = rd.unpack("QI")
        rd.take(count * size)
    return rd.pos


def parse_index(blob: bytes) -> GalleryIndex:
    body = unseal(blob, INDEX_MAGIC, INDEX_VERSION, _index_length)
    rd = Reader(body, len(INDEX_MAGIC) + 4)
    dim, n_images = rd.unpack("II")
    rec_dtype = _record_dtype(dim)
    img_ids, blocks = [], []
    for _ in range(n_images):
        image_id, count = rd.unpack("QI")
        recs = np.frombuffer(rd.take(count * rec_dtype.itemsize), dtype=rec_dtype)
        img_ids.append(np.full(count, image_id, dtype=np.int64))
        blocks.append(recs)
    if not rd.at_end():
        raise FormatError("trailing bytes after the last image block")
    recs = np.concatenate(blocks) if blocks else np.zeros(0, dtype=rec_dtype)
    image_ids = np.concatenate(img_ids) if img_ids else np.zeros(0, dtype=np.int64)
    return _make_index(
        dim,
        image_ids,
        recs["instance_id"].astype(np.int64),
        recs["feature"],
        recs["pred"],
        recs["box"],
        recs["gt"].astype(bool),
    )


def load_index(path) -> GalleryIndex:
    return parse_index(Path(path).read_bytes())


def write_queries(queries: Iterable[QueryRecord], path) -> None:
    with Path(path).open("w") as fh:
        for q in queries:
            fh.write(json.dumps({
                "query_id": int(q.query_id),
                "embedding": np.asarray(q.embedding, dtype=DTYPE).tolist(),
                "gt_image_id": int(q.gt_image_id),
                "gt_instance_id": int(q.gt_instance_id),
                "gt_box": q.gt_box.as_list(),
                "relational": bool(q.relational),
            }) + "\n")


def read_queries(path) -> list[QueryRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(QueryRecord(
            int(d["query_id"]),
            np.asarray(d["embedding"], dtype=DTYPE),
            int(d["gt_image_id"]),
            int(d["gt_instance_id"]),
            Box.from_seq(d["gt_box"]),
            relational=bool(d.get("relational", False)),
        ))
    return out
