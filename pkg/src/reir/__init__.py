"""Referring expression instance retrieval at desk scale.

A toy dual-stream model (instance encoder, expression encoder refined by a
mix of relation experts, box head), its training objectives, a two-stage
trainer, a synthetic benchmark generator and an exact retrieval engine with
box-aware recall metrics.
"""
from .engine import EvalSpec, GalleryIndex, build_index, evaluate_benchmark, load_index, rank_query, save_index
from .metrics import Box, MetricReport
from .model import ModelDims, ToyModelParams, encode_expression, encode_instance, init_model, similarity
from .more import MoreConfig, MoreParams, more_forward
from .objectives import CliaParams, LossBreakdown, LossWeights, box_loss, clia_loss, focal_loss
from .synth import SynthConfig, generate_benchmark
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Box",
    "CliaParams",
    "EvalSpec",
    "GalleryIndex",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "ModelDims",
    "MoreConfig",
    "MoreParams",
    "SynthConfig",
    "ToyModelParams",
    "TrainConfig",
    "box_loss",
    "build_index",
    "clia_loss",
    "encode_expression",
    "encode_instance",
    "evaluate_benchmark",
    "focal_loss",
    "generate_benchmark",
    "init_model",
    "load_checkpoint",
    "load_index",
    "more_forward",
    "rank_query",
    "save_checkpoint",
    "save_index",
    "similarity",
    "train_stage1",
    "train_stage2",
]
