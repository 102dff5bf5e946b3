"""Seeded generator for desk-scale REIR benchmarks.

Each instance gets a raw vector ``concat(a, r)``: ``a`` is an appearance
latent and ``r`` summarises the scene around it (projected mean of the
neighbours' appearance, the instance's own position and size, and the offset
to the neighbour centroid). Each instance is the referent of exactly one
query. Relational queries carry ``r``; their referent has a *decoy* twin in
another image of the same split with identical ``a``, so attribute-only
matching cannot pick the right one.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .engine import DanglingReferenceError
from .numerics import DTYPE

N_GEOMETRY = 6
# mean of (x, y, w, h) / extent under the box sampler; keeps the block zero-mean
GEOMETRY_CENTER = np.array([0.35, 0.35, 0.3, 0.3])


class SynthConfigError(ValueError):
    """The configuration cannot produce a benchmark satisfying its contract."""


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 17
    n_images: int = 200
    instances_per_image: int = 5
    d_attr: int = 16
    d_rel: int = 16
    relation_rate: float = 0.4
    noise_sigma: float = 0.05
    scene_extent: float = 1.0
    holdout_images: int = 50
    attr_norm: float = 3.0
    context_scale: float = 1.5
    geometry_scale: float = 1.5
    max_cosine: float = 0.75
    max_resample: int = 100

    def validate(self) -> None:
        if not 0.0 <= self.relation_rate <= 1.0:
            raise SynthConfigError(f"relation_rate={self.relation_rate} outside [0, 1]")
        if self.n_images < 1 or self.instances_per_image < 1:
            raise SynthConfigError("n_images and instances_per_image must be positive")
        if not 0 <= self.holdout_images <= self.n_images:
            raise SynthConfigError("holdout_images must lie in [0, n_images]")
        if self.d_attr < 1 or self.d_rel <= N_GEOMETRY:
            raise SynthConfigError(f"need d_attr >= 1 and d_rel > {N_GEOMETRY}")
        if self.noise_sigma < 0 or self.scene_extent <= 0:
            raise SynthConfigError("noise_sigma must be >= 0 and scene_extent > 0")


@dataclass
class Benchmark:
    """Column-oriented benchmark. Instance rows are sorted by (image, instance)."""

    image_ids: np.ndarray  # (N,)
    instance_ids: np.ndarray  # (N,)
    inst_raw: np.ndarray  # (N, d_raw)
    boxes: np.ndarray  # (N, 4) xywh
    inst_holdout: np.ndarray  # (N,) bool
    query_ids: np.ndarray  # (Q,)
    query_raw: np.ndarray  # (Q, d_txt)
    query_target: np.ndarray  # (Q,) row index into the instance arrays
    query_relational: np.ndarray  # (Q,) bool
    config: dict

    @property
    def query_holdout(self) -> np.ndarray:
        return self.inst_holdout[self.query_target]

    def split(self, holdout: bool) -> "Benchmark":
        inst_keep = np.flatnonzero(self.inst_holdout == holdout)
        remap = -np.ones(len(self.image_ids), dtype=np.int64)
        remap[inst_keep] = np.arange(len(inst_keep))
        q_keep = np.flatnonzero(self.query_holdout == holdout)
        return Benchmark(
            self.image_ids[inst_keep],
            self.instance_ids[inst_keep],
            self.inst_raw[inst_keep],
            self.boxes[inst_keep],
            self.inst_holdout[inst_keep],
            self.query_ids[q_keep],
            self.query_raw[q_keep],
            remap[self.query_target[q_keep]],
            self.query_relational[q_keep],
            self.config,
        )

    def gt_image(self) -> np.ndarray:
        return self.image_ids[self.query_target]

    def gt_instance(self) -> np.ndarray:
        return self.instance_ids[self.query_target]


def _iou_xywh(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _place_boxes(rng: np.random.Generator, m: int, extent: float) -> np.ndarray:
    boxes = np.zeros((m, 4), dtype=DTYPE)
    for j in range(m):
        for _ in range(1000):
            w, h = rng.uniform(0.15, 0.45, size=2) * extent
            x = rng.uniform(0.0, extent - w)
            y = rng.uniform(0.0, extent - h)
            cand = np.array([x, y, w, h])
            if all(_iou_xywh(cand, boxes[i]) <= 0.7 for i in range(j)):
                boxes[j] = cand
                break
        else:
            raise SynthConfigError("could not place non-overlapping boxes")
    return boxes


def _sample_attributes(rng: np.random.Generator, n: int, cfg: SynthConfig) -> np.ndarray:
    out = np.zeros((n, cfg.d_attr), dtype=DTYPE)
    for i in range(n):
        for _ in range(1000):
            v = rng.normal(size=cfg.d_attr)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(out[:i] @ v) <= cfg.max_cosine:
                out[i] = v
                break
        else:
            raise SynthConfigError("attribute latents too crowded; lower the instance count")
    return out * cfg.attr_norm


def _pair_decoys(rng: np.random.Generator, image_of: np.ndarray, n_pairs: int) -> list[tuple[int, int]]:
    order = list(rng.permutation(len(image_of)))
    used: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for i in order:
        if len(pairs) == n_pairs:
            break
        if i in used:
            continue
        for j in order:
            if j not in used and j != i and image_of[j] != image_of[i]:
                pairs.append((int(i), int(j)))
                used.update((i, j))
                break
    if len(pairs) < n_pairs:
        raise SynthConfigError("not enough images to plant decoys")
    return pairs


def scene_context(attrs: np.ndarray, boxes: np.ndarray, projection: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Relation summary for every instance of one scene."""
    m = len(attrs)
    ext = cfg.scene_extent
    centers = boxes[:, :2] + boxes[:, 2:] / 2
    out = np.zeros((m, cfg.d_rel), dtype=DTYPE)
    for j in range(m):
        others = [i for i in range(m) if i != j]
        if others:
            mean_attr = attrs[others].mean(axis=0)
            offset = (centers[others].mean(axis=0) - centers[j]) / ext
        else:
            mean_attr = np.zeros(attrs.shape[1])
            offset = np.zeros(2)
        geo = np.concatenate([boxes[j] / ext - GEOMETRY_CENTER, offset])
        out[j, : cfg.d_rel - N_GEOMETRY] = cfg.context_scale * (projection @ mean_attr) / cfg.attr_norm
        out[j, cfg.d_rel - N_GEOMETRY :] = cfg.geometry_scale * geo
    return out


def generate_benchmark(cfg: SynthConfig = SynthConfig()) -> Benchmark:
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    m = cfg.instances_per_image
    n = cfg.n_images * m
    image_ids = np.repeat(np.arange(cfg.n_images, dtype=np.int64), m)
    instance_ids = np.tile(np.arange(m, dtype=np.int64), cfg.n_images)
    holdout = image_ids >= cfg.n_images - cfg.holdout_images
    boxes = np.concatenate([_place_boxes(rng, m, cfg.scene_extent) for _ in range(cfg.n_images)])

    q, _ = np.linalg.qr(rng.normal(size=(cfg.d_attr, cfg.d_attr)))
    projection = q[: cfg.d_rel - N_GEOMETRY] if cfg.d_rel - N_GEOMETRY <= cfg.d_attr else rng.normal(
        size=(cfg.d_rel - N_GEOMETRY, cfg.d_attr)
    ) / np.sqrt(cfg.d_attr)

    attrs = np.zeros((n, cfg.d_attr), dtype=DTYPE)
    relational = np.zeros(n, dtype=bool)
    for part in (False, True):
        rows = np.flatnonzero(holdout == part)
        if len(rows) == 0:
            continue
        attrs[rows] = _sample_attributes(rng, len(rows), cfg)
        n_pairs = int(round(cfg.relation_rate * len(rows))) // 2
        for i, j in _pair_decoys(rng, image_ids[rows], n_pairs):
            a, b = rows[i], rows[j]
            attrs[b] = attrs[a]
            relational[[a, b]] = True

    context = np.zeros((n, cfg.d_rel), dtype=DTYPE)
    for img in range(cfg.n_images):
        sl = slice(img * m, (img + 1) * m)
        context[sl] = scene_context(attrs[sl], boxes[sl], projection, cfg)
    inst_raw = np.concatenate([attrs, context], axis=1)

    query_raw = np.zeros_like(inst_raw)
    for t in range(n):
        rho = 1.0 if relational[t] else 0.0
        pool = np.flatnonzero(holdout == holdout[t])
        for _ in range(cfg.max_resample):
            noise = rng.normal(scale=cfg.noise_sigma, size=inst_raw.shape[1])
            cand = np.concatenate([attrs[t], rho * context[t]]) + noise
            d2 = np.sum((inst_raw[pool] - cand) ** 2, axis=1)
            if pool[int(np.argmin(d2))] == t and np.sum(d2 == d2.min()) == 1:
                query_raw[t] = cand
                break
        else:
            raise SynthConfigError(
                f"query for instance ({image_ids[t]}, {instance_ids[t]}) is not unique after "
                f"{cfg.max_resample} resamples; noise_sigma is too large"
            )

    return Benchmark(
        image_ids=image_ids,
        instance_ids=instance_ids,
        inst_raw=inst_raw,
        boxes=boxes,
        inst_holdout=holdout,
        query_ids=np.arange(n, dtype=np.int64),
        query_raw=query_raw,
        query_target=np.arange(n, dtype=np.int64),
        query_relational=relational,
        config=asdict(cfg),
    )


def verify_uniqueness(bench: Benchmark) -> list[int]:
    """Query ids whose raw-space nearest instance (within their split) is not the referent."""
    bad = []
    hold_q = bench.query_holdout
    for qi in range(len(bench.query_ids)):
        pool = np.flatnonzero(bench.inst_holdout == hold_q[qi])
        d2 = np.sum((bench.inst_raw[pool] - bench.query_raw[qi]) ** 2, axis=1)
        if pool[int(np.argmin(d2))] != bench.query_target[qi]:
            bad.append(int(bench.query_ids[qi]))
    return bad


INSTANCE_FILE = "instances.jsonl"
QUERY_FILE = "queries.jsonl"
META_FILE = "benchmark.json"


def write_benchmark(bench: Benchmark, out_dir) -> tuple[Path, Path]:
    """Write the raw-instance file and the query file (one JSON object per line)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inst_path = out / INSTANCE_FILE
    query_path = out / QUERY_FILE
    with inst_path.open("w") as fh:
        for r in range(len(bench.image_ids)):
            fh.write(json.dumps({
                "image_id": int(bench.image_ids[r]),
                "instance_id": int(bench.instance_ids[r]),
                "raw": bench.inst_raw[r].tolist(),
                "gt_box": bench.boxes[r].tolist(),
                "split": "test" if bench.inst_holdout[r] else "train",
            }) + "\n")
    with query_path.open("w") as fh:
        for qi in range(len(bench.query_ids)):
            t = bench.query_target[qi]
            fh.write(json.dumps({
                "query_id": int(bench.query_ids[qi]),
                "embedding": bench.query_raw[qi].tolist(),
                "gt_image_id": int(bench.image_ids[t]),
                "gt_instance_id": int(bench.instance_ids[t]),
                "gt_box": bench.boxes[t].tolist(),
                "relational": bool(bench.query_relational[qi]),
                "split": "test" if bench.inst_holdout[t] else "train",
            }) + "\n")
    (out / META_FILE).write_text(json.dumps({"config": bench.config}, indent=2, sort_keys=True) + "\n")
    return inst_path, query_path


def read_benchmark(data_dir) -> Benchmark:
    """Load a benchmark written by :func:`write_benchmark`."""
    d = Path(data_dir)
    insts = [json.loads(line) for line in (d / INSTANCE_FILE).read_text().splitlines() if line]
    queries = [json.loads(line) for line in (d / QUERY_FILE).read_text().splitlines() if line]
    meta_path = d / META_FILE
    config = json.loads(meta_path.read_text())["config"] if meta_path.exists() else {}
    insts.sort(key=lambda r: (r["image_id"], r["instance_id"]))
    row_of = {(r["image_id"], r["instance_id"]): i for i, r in enumerate(insts)}
    targets = []
    for q in queries:
        key = (q["gt_image_id"], q["gt_instance_id"])
        if key not in row_of:
            raise DanglingReferenceError(q["query_id"], key)
        targets.append(row_of[key])
    return Benchmark(
        image_ids=np.array([r["image_id"] for r in insts], dtype=np.int64),
        instance_ids=np.array([r["instance_id"] for r in insts], dtype=np.int64),
        inst_raw=np.array([r["raw"] for r in insts], dtype=DTYPE),
        boxes=np.array([r["gt_box"] for r in insts], dtype=DTYPE),
        inst_holdout=np.array([r.get("split") == "test" for r in insts], dtype=bool),
        query_ids=np.array([q["query_id"] for q in queries], dtype=np.int64),
        query_raw=np.array([q["embedding"] for q in queries], dtype=DTYPE),
        query_target=np.array(targets, dtype=np.int64),
        query_relational=np.array([q.get("relational", False) for q in queries], dtype=bool),
        config=config,
    )
