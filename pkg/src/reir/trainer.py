"""Two-stage training: grounding pretraining, then full finetuning.

Stage 1 trains the encoders, the shared expert and the box head on
focal + box losses with no routed experts. Stage 2 adds freshly initialised
routed experts and the gate, turns on the sigmoid contrastive loss and trains
everything. Both stages use SGD with momentum (AdamW is available as an
option) and a single x0.1 step decay.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .binfmt import FormatError, Reader, seal, unseal
from .model import ModelDims, ToyModelParams, TrainBatch, batch_objective, init_model, is_finite_loss
from .more import MoreConfig, empty_gating, init_gating, init_routed
from .numerics import DTYPE
from .objectives import CliaParams, LossBreakdown, LossWeights
from .synth import Benchmark

log = logging.getLogger(__name__)

CKPT_MAGIC = b"REIC"
CKPT_VERSION = 1
STAGE_EPOCHS = {1: 30, 2: 60}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, losses: LossBreakdown):
        super().__init__(f"loss became non-finite at step {step}: {losses}")
        self.step = step


class CheckpointMismatch(ValueError):
    """A checkpoint does not fit the requested model configuration."""


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    epochs: int = 30
    batch_images: int = 8
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"
    beta2: float = 0.999
    lr_decay_at: float = 0.8
    seed: int = 17
    dims: ModelDims = ModelDims()
    more: MoreConfig = MoreConfig()
    weights: LossWeights = LossWeights()
    grad_clip: float = 0.0  # global-norm clip; 0 disables

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_images < 1:
            raise ValueError("epochs must be >= 0, learning_rate > 0 and batch_images >= 1")

    @classmethod
    def for_stage(cls, stage: int, **kw) -> "TrainConfig":
        """Config with the stage's default epoch budget (30 for stage 1, 60 for stage 2)."""
        kw.setdefault("epochs", STAGE_EPOCHS[stage])
        return cls(stage=stage, **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["dims"] = ModelDims(**d["dims"])
        d["more"] = MoreConfig(**d["more"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class Checkpoint:
    params: ToyModelParams
    momentum: dict[str, np.ndarray]  # optimizer state, keyed "m:<param>" / "v:<param>"
    config: TrainConfig
    stage: int
    seed: int
    step: int
    history: list[dict] = field(default_factory=list)


def _stage_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *path])))


def _stage1_more(cfg: TrainConfig) -> MoreConfig:
    return replace(cfg.more, n_routed=0, k_routed=0, dim_in=cfg.dims.dim, dim_out=cfg.dims.dim)


def initial_params(cfg: TrainConfig) -> ToyModelParams:
    more_cfg = _stage1_more(cfg) if cfg.stage == 1 else replace(cfg.more, dim_in=cfg.dims.dim, dim_out=cfg.dims.dim)
    return init_model(_stage_rng(cfg.seed, 0), cfg.dims, more_cfg)


def iter_batches(bench: Benchmark, batch_images: int, rng: Optional[np.random.Generator]):
    """Yield whole-image minibatches in a shuffled order (image-id order if ``rng`` is None)."""
    images = np.unique(bench.image_ids)
    rows_of = {int(i): np.flatnonzero(bench.image_ids == i) for i in images}
    q_of_row: dict[int, list[int]] = {}
    for qi, t in enumerate(bench.query_target):
        q_of_row.setdefault(int(t), []).append(qi)
    order = images if rng is None else rng.permutation(images)
    for start in range(0, len(order), batch_images):
        rows = np.concatenate([rows_of[int(i)] for i in order[start : start + batch_images]])
        local = {int(r): n for n, r in enumerate(rows)}
        qs = [qi for r in rows for qi in q_of_row.get(int(r), [])]
        if not qs:
            continue
        yield TrainBatch(
            inst_raw=bench.inst_raw[rows],
            gt_boxes=bench.boxes[rows],
            inst_image=bench.image_ids[rows],
            query_raw=bench.query_raw[qs],
            query_target=np.array([local[int(bench.query_target[q])] for q in qs], dtype=np.int64),
        )


def training_loss(params: ToyModelParams, bench: Benchmark, cfg: TrainConfig) -> float:
    """Stage loss over the whole training set in a fixed, unshuffled batch order."""
    total, n = 0.0, 0
    for batch in iter_batches(bench, cfg.batch_images, None):
        total += batch_objective(params, batch, cfg.stage, cfg.weights)[0].total
        n += 1
    return total / max(n, 1)


def _trainable(name: str, stage: int) -> bool:
    if stage == 1:
        return not (name.startswith("clia.") or ".routed" in name or name.startswith("more.gate"))
    return True


def _optimizer_step(arrays, grads, state, lr, cfg: TrainConfig, stage: int, step: int):
    """One SGD-momentum or AdamW update. ``state`` maps ``m:<name>`` (and
    ``v:<name>`` for AdamW) to moment buffers; a fresh dict is returned."""
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g * g)) for n, g in grads.items() if _trainable(n, stage)))
        scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
    else:
        scale = 1.0
    new_arrays, new_state = {}, {}
    for name, value in arrays.items():
        m_prev = state.get(f"m:{name}", np.zeros_like(value))
        v_prev = state.get(f"v:{name}", np.zeros_like(value))
        if not _trainable(name, stage):
            new_arrays[name] = value
            new_state[f"m:{name}"] = m_prev
            if cfg.optimizer == "adamw":
                new_state[f"v:{name}"] = v_prev
            continue
        g = grads[name] * scale
        decay = cfg.weight_decay if not name.startswith("clia.") else 0.0
        if cfg.optimizer == "sgd":
            m = cfg.momentum * m_prev + g + decay * value
            new_state[f"m:{name}"] = m
            new_arrays[name] = value - lr * m
        else:
            m = cfg.momentum * m_prev + (1.0 - cfg.momentum) * g
            v = cfg.beta2 * v_prev + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.momentum ** (step + 1))
            v_hat = v / (1.0 - cfg.beta2 ** (step + 1))
            new_state[f"m:{name}"] = m
            new_state[f"v:{name}"] = v
            new_arrays[name] = value - lr * (m_hat / (np.sqrt(v_hat) + 1e-8) + decay * value)
    return new_arrays, new_state


def _run(
    params: ToyModelParams,
    momentum: dict[str, np.ndarray],
    cfg: TrainConfig,
    bench: Benchmark,
    on_epoch: Optional[Callable[[int, LossBreakdown], None]],
) -> Checkpoint:
    stage = cfg.stage
    rng = _stage_rng(cfg.seed, stage, 2)
    decay_epoch = int(math.floor(cfg.lr_decay_at * cfg.epochs))
    arrays = params.to_arrays()
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (0.1 if epoch >= decay_epoch else 1.0)
        sums = np.zeros(5)
        n_batches = 0
        for batch in iter_batches(bench, cfg.batch_images, rng):
            losses, grads = batch_objective(params, batch, stage, cfg.weights)
            if not is_finite_loss(losses):
                raise TrainingDiverged(step, losses)
            arrays, momentum = _optimizer_step(arrays, grads, momentum, lr, cfg, stage, step)
            params = params.with_arrays(arrays)
            sums += list(losses.as_dict().values())
            n_batches += 1
            step += 1
        mean = LossBreakdown(*(sums / max(n_batches, 1)))
        history.append({"epoch": epoch + 1, "lr": lr, **mean.as_dict(), "train_loss": training_loss(params, bench, cfg)})
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
    return Checkpoint(params, momentum, cfg, stage, cfg.seed, step, history)


def train_stage1(cfg: TrainConfig, bench: Benchmark, on_epoch=None) -> Checkpoint:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    return _run(initial_params(cfg), {}, cfg, bench, on_epoch)


def stage2_params(cfg: TrainConfig, ckpt: Optional[Checkpoint]) -> ToyModelParams:
    """Stage-2 starting point: the stage-1 weights plus a fresh routed bank."""
    if ckpt is None:
        return initial_params(cfg)
    p = ckpt.params
    dims = p.dims
    if dims != cfg.dims:
        bad = [f for f in ("d_raw", "d_txt", "dim", "hidden") if getattr(dims, f) != getattr(cfg.dims, f)]
        raise CheckpointMismatch(f"checkpoint dims differ in {', '.join(bad)}")
    if len(p.more.shared_experts) != cfg.more.n_shared:
        raise CheckpointMismatch("checkpoint n_shared differs from the config")
    more_cfg = replace(cfg.more, dim_in=dims.dim, dim_out=dims.dim)
    rng = _stage_rng(cfg.seed, 2, 1)
    routed = init_routed(rng, more_cfg)
    gating = init_gating(rng, more_cfg) if more_cfg.n_routed else empty_gating(dims.dim)
    more = replace(p.more, routed_experts=routed, gating=gating, k_routed=more_cfg.k_routed)
    return replace(p, more=more)


def train_stage2(cfg: TrainConfig, ckpt: Optional[Checkpoint], bench: Benchmark, on_epoch=None) -> Checkpoint:
    """Finetune from ``ckpt`` (``None`` trains stage 2 from scratch)."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    params = stage2_params(cfg, ckpt)
    return _run(params, {}, cfg, bench, on_epoch)


# ---------------------------------------------------------------------------
# checkpoint files


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.params.to_arrays()
    blocks = [(name, arrays[name]) for name in sorted(arrays)]
    blocks += [(f"optim/{name}", ckpt.momentum[name]) for name in sorted(ckpt.momentum)]
    more = ckpt.params.more
    meta = {
        "config": ckpt.config.to_json(),
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "n_shared": len(more.shared_experts),
        "n_routed": more.n_routed,
        "k_routed": more.k_routed,
        "history": ckpt.history,
        "blocks": [[name, list(a.shape)] for name, a in blocks],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    d = ckpt.params.dims
    parts = [
        CKPT_MAGIC,
        struct.pack("<IIIIII", CKPT_VERSION, d.d_raw, d.d_txt, d.dim, d.hidden, len(meta_bytes)),
        meta_bytes,
    ]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks]
    return seal(b"".join(parts))


def _checkpoint_length(blob: bytes) -> int:
    rd = Reader(blob, len(CKPT_MAGIC) + 4)
    *_, meta_len = rd.unpack("IIIII")
    meta = json.loads(rd.take(meta_len))
    return rd.pos + sum(8 * int(np.prod(shape)) for _, shape in meta["blocks"])


def parse_checkpoint(blob: bytes) -> Checkpoint:
    body = unseal(blob, CKPT_MAGIC, CKPT_VERSION, _checkpoint_length)
    rd = Reader(body, len(CKPT_MAGIC) + 4)
    d_raw, d_txt, dim, hidden, meta_len = rd.unpack("IIIII")
    meta = json.loads(rd.take(meta_len))
    arrays: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for name, shape in meta["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(DTYPE).reshape(shape)
        if name.startswith("optim/"):
            momentum[name[len("optim/"):]] = a
        else:
            arrays[name] = a
    if not rd.at_end():
        raise FormatError("trailing bytes after the last parameter block")
    params = ToyModelParams.from_arrays(arrays, meta["n_shared"], meta["n_routed"], meta["k_routed"])
    if params.dims != ModelDims(d_raw, d_txt, dim, hidden):
        raise CheckpointMismatch("header dims disagree with the parameter blocks")
    return Checkpoint(
        params,
        momentum,
        TrainConfig.from_json(meta["config"]),
        meta["stage"],
        meta["seed"],
        meta["step"],
        meta.get("history", []),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
