"""Glue between a trained model, a benchmark split and the retrieval engine."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .engine import EvalSpec, GalleryIndex, QueryRecord, build_index_arrays, evaluate_benchmark
from .metrics import Box, MetricReport
from .model import ToyModelParams, encode_expression, encode_instances
from .synth import Benchmark


def encode_gallery(params: ToyModelParams, bench: Benchmark) -> GalleryIndex:
    feats, boxes = encode_instances(params, bench.inst_raw)
    return build_index_arrays(bench.image_ids, bench.instance_ids, feats, boxes, bench.boxes)


def encode_queries(params: ToyModelParams, bench: Benchmark, mask: Optional[np.ndarray] = None) -> list[QueryRecord]:
    T = encode_expression(params, bench.query_raw)
    return _query_records(bench, T, mask)


def _query_records(bench: Benchmark, T: np.ndarray, mask: Optional[np.ndarray]) -> list[QueryRecord]:
    rows = np.arange(len(bench.query_ids)) if mask is None else np.flatnonzero(mask)
    out = []
    for qi in rows:
        t = bench.query_target[qi]
        out.append(QueryRecord(
            int(bench.query_ids[qi]),
            T[qi],
            int(bench.image_ids[t]),
            int(bench.instance_ids[t]),
            Box.from_seq(bench.boxes[t]),
            raw=bench.query_raw[qi],
            relational=bool(bench.query_relational[qi]),
        ))
    return out


def evaluate_params(
    params: ToyModelParams,
    bench: Benchmark,
    spec: EvalSpec = EvalSpec(),
    subset: Optional[np.ndarray] = None,
) -> MetricReport:
    """Encode ``bench`` with ``params`` and evaluate its queries (optionally a subset mask)."""
    index = encode_gallery(params, bench)
    return evaluate_benchmark(index, encode_queries(params, bench, subset), spec)


def oracle_index_and_queries(bench: Benchmark) -> tuple[GalleryIndex, list[QueryRecord]]:
    """Gallery of unit-normalised raw features with ground-truth boxes, queried
    by the referents' own features: the self-retrieval upper bound."""
    feats = bench.inst_raw / np.linalg.norm(bench.inst_raw, axis=1, keepdims=True)
    index = build_index_arrays(bench.image_ids, bench.instance_ids, feats, bench.boxes, bench.boxes)
    return index, _query_records(bench, feats[bench.query_target], None)
