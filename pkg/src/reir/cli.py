"""Command-line entry point: ``reir gen | train | index | eval``.

Exit codes are stable per error class: 0 success, 2 invalid input or flags,
3 training diverged, 4 checkpoint incompatible with the request, 5 data
integrity (corrupt files, dangling references, duplicate ids).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .binfmt import FormatError
from .engine import (
    DanglingReferenceError,
    DuplicateInstanceError,
    EvalSpec,
    evaluate_benchmark,
    load_index,
    read_queries,
    save_index,
    write_queries,
)
from .model import ModelDims
from .more import MoreConfig
from .objectives import LossWeights
from .pipeline import encode_gallery, encode_queries, oracle_index_and_queries
from .synth import Benchmark, SynthConfig, SynthConfigError, generate_benchmark, read_benchmark, write_benchmark
from .trainer import (
    CheckpointMismatch,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("reir")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5


class UsageError(Exception):
    """Flags are individually valid but do not make sense together."""


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from None
    return parse


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _select(bench: Benchmark, split: str) -> Benchmark:
    if split == "all":
        return bench
    return bench.split(split == "test")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        n_images=args.images,
        instances_per_image=args.per_image,
        relation_rate=args.relation_rate,
        noise_sigma=args.noise,
        holdout_images=args.holdout,
    )
    bench = generate_benchmark(cfg)
    write_benchmark(bench, args.out)
    _emit({
        "seed": cfg.seed,
        "images": int(len(np.unique(bench.image_ids))),
        "instances": int(len(bench.image_ids)),
        "queries": int(len(bench.query_ids)),
        "relational_queries": int(bench.query_relational.sum()),
        "holdout_images": cfg.holdout_images,
        "out": str(args.out),
    })
    return EXIT_OK


def _train_config(args, stage: int) -> TrainConfig:
    kw = {"seed": args.seed, "optimizer": args.optimizer}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.lr is not None:
        kw["learning_rate"] = args.lr
    if args.batch_images is not None:
        kw["batch_images"] = args.batch_images
    weights = LossWeights(use_clia=not args.no_clia)
    more = MoreConfig(n_routed=args.routed, k_routed=min(args.top_k, args.routed))
    return TrainConfig.for_stage(stage, weights=weights, more=more, dims=ModelDims(), **kw)


def cmd_train(args) -> int:
    if args.stage == 2 and args.from_ckpt is None and not args.scratch:
        raise UsageError("--stage 2 needs --from <stage-1 checkpoint> (or --scratch for the stage-2-only ablation)")
    if args.stage == 1 and (args.from_ckpt is not None or args.scratch):
        raise UsageError("--from/--scratch only apply to --stage 2")
    if args.routed < 0 or args.top_k < 0:
        raise UsageError("--routed and --top-k must be >= 0")
    bench = read_benchmark(args.data).split(False)
    if len(bench.query_ids) == 0:
        raise UsageError(f"{args.data} has no training queries")
    cfg = _train_config(args, args.stage)
    _emit({"config": cfg.to_json(), "from": args.from_ckpt and str(args.from_ckpt)})

    def on_epoch(epoch, losses):
        _emit({"epoch": epoch, **losses.as_dict()})

    if args.stage == 1:
        ckpt = train_stage1(cfg, bench, on_epoch)
    else:
        start = None
        if args.from_ckpt is not None:
            start = load_checkpoint(args.from_ckpt)
            if start.stage != 1:
                raise CheckpointMismatch(f"{args.from_ckpt} is a stage-{start.stage} checkpoint; --from expects stage 1")
        ckpt = train_stage2(cfg, start, bench, on_epoch)
    save_checkpoint(ckpt, args.out)
    _emit({"checkpoint": str(args.out), "stage": ckpt.stage, "steps": ckpt.step})
    return EXIT_OK


def _model_echo(ckpt) -> dict:
    cfg = ckpt.config
    return {
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "n_routed": cfg.more.n_routed,
        "k_routed": cfg.more.k_routed,
        "use_clia": cfg.weights.use_clia,
        "optimizer": cfg.optimizer,
    }


def _subset(queries, which: str):
    if which == "relational":
        return [q for q in queries if q.relational]
    if which == "plain":
        return [q for q in queries if not q.relational]
    return queries


def cmd_index(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bench = _select(read_benchmark(args.data), args.split)
    index = encode_gallery(ckpt.params, bench)
    save_index(index, args.out)
    if args.queries is not None:
        write_queries(encode_queries(ckpt.params, bench), args.queries)
    _emit({"index": str(args.out), "images": index.n_images, "instances": len(index), "checksum": f"{index.checksum:016x}"})
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = EvalSpec(ks=args.k, taus=args.iou, identity_mode=args.mode)
    extra = {}
    if args.index is not None:
        if args.queries is None:
            raise UsageError("--index needs --queries")
        index = load_index(args.index)
        queries = read_queries(args.queries)
    elif args.data is None:
        raise UsageError("give --index/--queries, --checkpoint/--data or --oracle-features/--data")
    elif args.oracle_features:
        bench = _select(read_benchmark(args.data), args.split)
        index, queries = oracle_index_and_queries(bench)
        extra["model"] = "oracle-features"
    elif args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        bench = _select(read_benchmark(args.data), args.split)
        index = encode_gallery(ckpt.params, bench)
        queries = encode_queries(ckpt.params, bench)
        extra["model"] = _model_echo(ckpt)
    else:
        raise UsageError("--data needs --checkpoint or --oracle-features")
    queries = _subset(queries, args.subset)
    report = evaluate_benchmark(index, queries, spec)
    doc = {**report.to_json(), **extra, "subset": args.subset}
    if args.out is not None:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.pretty:
        print(report.pretty())
    else:
        _emit(doc)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reir", description="Referring expression instance retrieval toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark")
    g.add_argument("--seed", type=int, default=17)
    g.add_argument("--images", type=int, default=200)
    g.add_argument("--per-image", type=int, default=5)
    g.add_argument("--relation-rate", type=float, default=SynthConfig.relation_rate)
    g.add_argument("--noise", type=float, default=SynthConfig.noise_sigma)
    g.add_argument("--holdout", type=int, default=SynthConfig.holdout_images, help="images reserved for evaluation")
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage on the training split")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--from", dest="from_ckpt", type=Path, help="stage-1 checkpoint to finetune")
    t.add_argument("--scratch", action="store_true", help="stage 2 from fresh weights (ablation)")
    t.add_argument("--no-clia", action="store_true", help="drop the contrastive term (ablation)")
    t.add_argument("--routed", type=int, default=MoreConfig.n_routed, help="routed experts in stage 2")
    t.add_argument("--top-k", type=int, default=MoreConfig.k_routed, help="routed experts active per query")
    t.add_argument("--epochs", type=int, help="default: 30 for stage 1, 60 for stage 2")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-images", type=int)
    t.add_argument("--optimizer", choices=("sgd", "adamw"), default="sgd")
    t.add_argument("--seed", type=int, default=17)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", help="encode a split into an index file (and optionally its queries)")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--split", choices=("test", "train", "all"), default="test")
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--queries", type=Path, help="also write the encoded queries here")
    i.set_defaults(func=cmd_index)

    e = sub.add_parser("eval", help="evaluate retrieval over the (k, IoU) grid")
    e.add_argument("--index", type=Path)
    e.add_argument("--queries", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--oracle-features", action="store_true", help="score ground-truth features against themselves")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--subset", choices=("all", "relational", "plain"), default="all")
    e.add_argument("--k", type=_csv(int), default=(1, 5, 10))
    e.add_argument("--iou", type=_csv(float), default=(0.5, 0.7, 0.9))
    e.add_argument("--mode", choices=("iou", "strict"), default="iou")
    e.add_argument("--pretty", action="store_true")
    e.add_argument("--out", type=Path, help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        log.error("checkpoint mismatch: %s", exc)
        return EXIT_CHECKPOINT
    except (FormatError, DanglingReferenceError, DuplicateInstanceError, json.JSONDecodeError) as exc:
        log.error("data integrity: %s", exc)
        return EXIT_DATA
    except (UsageError, SynthConfigError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
