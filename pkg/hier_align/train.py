"""
Deterministic training loop: AdamW with two learning-rate groups, cosine
decay with linear warm-up, gradient accumulation and resumable checkpoints.

Every random draw of a micro-step comes from a stream derived from
(seed, epoch) for data order and (seed, micro_step) for slot sampling and
conditioned negatives. No generator state is carried between steps, so a
resumed run only needs the step counters to continue bit-identically.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from hier_align import numerics as nx
from hier_align.checkpoint import load_checkpoint, save_checkpoint
from hier_align.decompose import CaptionHierarchy, Level, assemble_hierarchy, slot_levels
from hier_align.encoders import encode_token_batch
from hier_align.errors import DataError
from hier_align.log import info, log_line, warn
from hier_align.loss import (
    Calibration,
    DistanceKind,
    LossMode,
    LossReport,
    alignment_loss,
    augment_conditioned_negatives,
    build_similarity,
    build_targets,
    extend_targets,
    global_loss,
    total_loss,
)
from hier_align.model import Model
from hier_align.numerics import Param, Rng, Tensor
from hier_align.storage import append_jsonl, write_jsonl
from hier_align.toyworld import ToyExample, render_patch_array

CHECKPOINT_NAME = "checkpoint.bclp"
METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    steps: int = 0  # > 0 overrides epochs with a fixed optimizer-step budget
    micro_batch: int = 8
    accum_steps: int = 1
    k_sent: int = 5
    k_phrase: int = 0
    beta: float = 0.5
    mode: LossMode = LossMode.CE
    calibrate: bool = False
    cal_lambda: float = 0.05
    cal_distance: DistanceKind = DistanceKind.INDEX
    negative_levels: Tuple[Level, ...] = ()
    lr: float = 1e-4
    lr_pool: float = 1e-3
    min_lr_ratio: float = 0.1
    warmup: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    eval_every: int = 100  # optimizer steps between validation passes; 0 disables
    log_every: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", LossMode(self.mode))
        object.__setattr__(self, "cal_distance", DistanceKind(self.cal_distance))
        levels = tuple(sorted({Level(lv) for lv in self.negative_levels}, key=lambda lv: lv.rank))
        object.__setattr__(self, "negative_levels", levels)

        for key in ("epochs", "steps", "k_sent", "k_phrase", "eval_every"):
            if getattr(self, key) < 0:
                raise ValueError(f"train.{key}={getattr(self, key)} must be >= 0.")
        for key in ("micro_batch", "accum_steps", "log_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"train.{key}={getattr(self, key)} must be >= 1.")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"train.beta={self.beta} must be within [0, 1].")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError(f"train.warmup={self.warmup} must be within [0, 1).")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ValueError(f"train.min_lr_ratio={self.min_lr_ratio} must be within [0, 1].")
        for key in ("lr", "lr_pool", "weight_decay", "cal_lambda"):
            value = getattr(self, key)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"train.{key}={value} must be a finite value >= 0.")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ValueError(f"train.{key}={getattr(self, key)} must be within [0, 1).")
        if not self.eps > 0:
            raise ValueError(f"train.eps={self.eps} must be > 0.")
        if self.negative_levels and self.micro_batch < 2:
            raise ValueError(
                f"train.negative_levels needs train.micro_batch >= 2, got {self.micro_batch}."
            )
        present = set(self.level_of)
        for lv in self.negative_levels:
            if lv not in present:
                raise ValueError(
                    f"train.negative_levels includes {lv.value!r} but k_sent={self.k_sent}, "
                    f"k_phrase={self.k_phrase} leave no such slot."
                )

    @property
    def K(self) -> int:
        return 1 + self.k_sent + self.k_phrase

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps

    @property
    def level_of(self) -> Tuple[Level, ...]:
        return slot_levels(self.k_sent, self.k_phrase)

    @property
    def calibration(self) -> Optional[Calibration]:
        if not self.calibrate:
            return None
        return Calibration(lam=self.cal_lambda, distance=self.cal_distance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "steps": self.steps,
            "micro_batch": self.micro_batch,
            "accum_steps": self.accum_steps,
            "k_sent": self.k_sent,
            "k_phrase": self.k_phrase,
            "beta": self.beta,
            "mode": self.mode.value,
            "calibrate": self.calibrate,
            "cal_lambda": self.cal_lambda,
            "cal_distance": self.cal_distance.value,
            "negative_levels": [lv.value for lv in self.negative_levels],
            "lr": self.lr,
            "lr_pool": self.lr_pool,
            "min_lr_ratio": self.min_lr_ratio,
            "warmup": self.warmup,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "eval_every": self.eval_every,
            "log_every": self.log_every,
        }


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    lr_pool: float
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    micro_step: int = 0
    rejected: int = 0

    @classmethod
    def create(cls, params: Sequence[Param], cfg: TrainConfig) -> "OptimizerState":
        state = cls(
            lr=cfg.lr,
            lr_pool=cfg.lr_pool,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        for p in params:
            if p.trainable:
                state.m[p.name] = np.zeros_like(p.data)
                state.v[p.name] = np.zeros_like(p.data)
        return state

    def lr_for(self, p: Param) -> float:
        return self.lr_pool if p.group == "pool" else self.lr

    def header(self) -> Dict[str, Any]:
        return {
            "lr": self.lr,
            "lr_pool": self.lr_pool,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
            "micro_step": self.micro_step,
            "rejected": self.rejected,
        }

    def restore(
        self,
        header: Mapping[str, Any],
        m: Mapping[str, np.ndarray],
        v: Mapping[str, np.ndarray],
    ) -> None:
        for name, current in self.m.items():
            if name not in m or name not in v:
                raise DataError(f"checkpoint has no optimizer moments for {name!r}")
            if m[name].shape != current.shape or v[name].shape != current.shape:
                raise DataError(f"optimizer moments for {name!r} do not match shape {current.shape}")
            self.m[name] = np.array(m[name], dtype=current.dtype)
            self.v[name] = np.array(v[name], dtype=current.dtype)
        self.step = int(header["step"])
        self.micro_step = int(header["micro_step"])
        self.rejected = int(header.get("rejected", 0))


def adamw_step(
    params: Sequence[Param],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr_scale: float = 1.0,
) -> bool:
    """
    One decoupled-weight-decay Adam update. Returns False (and counts the
    rejection) when any gradient is non-finite; parameters are then untouched.
    """
    for p in params:
        g = grads.get(p.name)
        if p.trainable and g is not None and not np.all(np.isfinite(g)):
            state.rejected += 1
            warn(f"optimizer step rejected: non-finite gradient in {p.name}")
            return False

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p in params:
        if not p.trainable:
            continue
        data = p.value.data
        g = grads.get(p.name)
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=data.dtype)
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(data)
            state.v[p.name] = np.zeros_like(data)
        lr = state.lr_for(p) * lr_scale
        if p.decay and state.weight_decay:
            data *= 1.0 - lr * state.weight_decay
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step_size = lr * math.sqrt(bc2) / bc1
        data -= step_size * m / (np.sqrt(v) + state.eps)
    return True


def lr_multiplier(step: int, total: int, warmup: float, min_ratio: float) -> float:
    """Linear warm-up over the first ``warmup`` share of steps, then cosine down to ``min_ratio``."""
    if total <= 0:
        return 1.0
    warm = int(math.floor(warmup * total))
    if step < warm:
        return (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Forward / step
# ---------------------------------------------------------------------------


def step_rng(seed: int, micro_step: int) -> Rng:
    return Rng(seed, ("step", micro_step))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(seed, ("order", epoch)).permutation(n)


def batch_hierarchies(
    examples: Sequence[ToyExample],
    cfg: TrainConfig,
    rng: Rng,
    counters: Optional[Counter] = None,
) -> List[CaptionHierarchy]:
    return [
        assemble_hierarchy(
            ex.captions.caption,
            ex.captions.sentences,
            ex.captions.phrases,
            cfg.k_sent,
            cfg.k_phrase,
            rng.child("hierarchy", i),
            counters,
        )
        for i, ex in enumerate(examples)
    ]


def batch_inputs(examples: Sequence[ToyExample], model: Model) -> Tensor:
    world = model.world
    for ex in examples:
        if ex.scene.grid_size != world.grid_size or ex.scene.vocab_sizes != (
            world.shape_vocab,
            world.color_vocab,
            world.size_vocab,
        ):
            raise DataError(f"scene {ex.index} does not match the model's world configuration")
    arrays = np.stack([render_patch_array(ex.scene, dtype=model.dtype) for ex in examples])
    return Tensor(arrays, dtype=model.dtype)


def forward_loss(
    model: Model,
    examples: Sequence[ToyExample],
    cfg: TrainConfig,
    rng: Rng,
    counters: Optional[Counter] = None,
    hierarchies: Optional[Sequence[CaptionHierarchy]] = None,
) -> LossReport:
    """encode -> pool -> similarity -> targets -> loss for one micro-batch."""
    if not examples:
        raise DataError("micro-batch is empty")
    counters = counters if counters is not None else Counter()
    if hierarchies is None:
        hierarchies = batch_hierarchies(examples, cfg, rng, counters)
    Ks = sorted({h.K for h in hierarchies})
    if len(Ks) != 1:
        raise DataError(f"hierarchies in one batch must share K, got {Ks}")
    levels = hierarchies[0].level_of
    if any(h.level_of != levels for h in hierarchies):
        raise DataError("hierarchies in one batch must share their slot layout")
    B, K, D = len(examples), Ks[0], model.cfg.dim

    image = model.vision(batch_inputs(examples, model))
    slots = [slot for h in hierarchies for slot in h.slots()]
    texts = nx.reshape(encode_token_batch(model.text, model.vocab, slots, counters), (B, K, D))
    pooled = model.pool(texts, image.patches)

    negatives = None
    if cfg.negative_levels:
        negatives = augment_conditioned_negatives(
            image.patches, texts, levels, cfg.negative_levels, model.pool, rng.child("negatives")
        )
    sim = build_similarity(pooled, texts, model.log_scale.value, levels=levels, negatives=negatives)
    targets = build_targets(cfg.mode, B, K, cfg.beta, cfg.calibration, levels)
    targets = extend_targets(targets, [src for src, _ in negatives.sources] if negatives is not None else ())
    report = alignment_loss(sim, targets)

    captions = nx.reshape(nx.narrow(texts, 1, 0, 1), (B, D))
    return total_loss(report, global_loss(image.cls, captions, model.log_scale.value), counters)


def train_step(
    examples: Sequence[ToyExample],
    model: Model,
    cfg: TrainConfig,
    state: OptimizerState,
    lr_scale: float = 1.0,
    counters: Optional[Counter] = None,
) -> LossReport:
    """
    Forward and backward for one micro-batch. Gradients accumulate across
    micro-steps; the optimizer fires on every ``accum_steps``-th call.
    """
    report = forward_loss(model, examples, cfg, step_rng(cfg.seed, state.micro_step), counters)
    assert report.objective is not None
    nx.scale(report.objective, 1.0 / cfg.accum_steps).backward()
    state.micro_step += 1
    if state.micro_step % cfg.accum_steps == 0:
        params = model.params()
        adamw_step(params, {p.name: p.grad for p in params}, state, lr_scale)
        model.zero_grad()
    return report


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    state: OptimizerState
    losses: List[float]
    checkpoint: Path
    counters: Counter


def planned_steps(n_examples: int, cfg: TrainConfig) -> Tuple[int, int]:
    """(optimizer steps, micro-batches per epoch) for a dataset of ``n_examples``."""
    per_epoch = max(1, n_examples // cfg.micro_batch)
    if cfg.steps > 0:
        return cfg.steps, per_epoch
    return (cfg.epochs * per_epoch) // cfg.accum_steps, per_epoch


def _metric(path: Path, step: int, name: str, value: float) -> None:
    append_jsonl(path, {"step": step, "metric": name, "value": value})


def run_training(
    dataset: Sequence[ToyExample],
    cfg: TrainConfig,
    model: Model,
    run_dir: Path,
    *,
    val: Optional[Sequence[ToyExample]] = None,
    eval_cfg: Optional[Any] = None,
    config_echo: Optional[Dict[str, Any]] = None,
    resume: Optional[Path] = None,
    stop_after: Optional[int] = None,
    progress: bool = True,
) -> TrainResult:
    if not dataset:
        raise DataError("training dataset is empty")
    n = len(dataset)
    if n < cfg.micro_batch:
        raise DataError(f"dataset has {n} examples, fewer than train.micro_batch={cfg.micro_batch}")
    total, per_epoch = planned_steps(n, cfg)
    target = total if stop_after is None else min(total, stop_after)

    state = OptimizerState.create(model.params(), cfg)
    metrics_path = run_dir / METRICS_NAME
    if resume is not None:
        ckpt = load_checkpoint(resume)
        opt = ckpt.header.get("optimizer")
        if not opt:
            raise DataError(f"{resume}: checkpoint carries no optimizer state to resume from")
        rng_header = ckpt.header.get("rng") or {}
        if rng_header.get("seed") != cfg.seed:
            raise ValueError(
                f"train.seed={cfg.seed} differs from the checkpoint's seed {rng_header.get('seed')}."
            )
        model.load_arrays(ckpt.params())
        m, v = ckpt.moments()
        state.restore(opt, m, v)
        info(f"Resuming from {resume} at step {state.step}.")
    else:
        write_jsonl(metrics_path, [{"event": "start", "config": config_echo or {}}])

    model.zero_grad()
    counters: Counter = Counter()
    losses: List[float] = []
    window: List[float] = []
    log_line(f"[INFO] training: {total} steps, {per_epoch} micro-batches per epoch, K={cfg.K}")

    bar = tqdm(total=target, initial=min(state.step, target), desc="train", unit="step", disable=not progress)
    try:
        while state.step < target:
            epoch, j = divmod(state.micro_step, per_epoch)
            order = epoch_order(cfg.seed, epoch, n)
            picks = order[j * cfg.micro_batch : (j + 1) * cfg.micro_batch]
            batch = [dataset[int(i)] for i in picks]
            scale = lr_multiplier(state.step, total, cfg.warmup, cfg.min_lr_ratio)
            before = state.step
            report = train_step(batch, model, cfg, state, scale, counters)
            window.append(report.l_total)
            if state.micro_step % cfg.accum_steps:
                continue

            loss = float(np.mean(window))
            window.clear()
            losses.append(loss)
            bar.update(state.step - before)
            bar.set_postfix(loss=f"{loss:.4f}")
            if state.step % cfg.log_every == 0 or state.step == target:
                _metric(metrics_path, state.step, "loss/total", loss)
                _metric(metrics_path, state.step, "lr/scale", scale)
            if val and cfg.eval_every and state.step % cfg.eval_every == 0:
                from hier_align.evaluation import evaluate_model, flatten_report

                with nx.no_grad():
                    report_dict = evaluate_model(model, val, cfg, eval_cfg)
                for name, value in flatten_report(report_dict).items():
                    _metric(metrics_path, state.step, name, value)
    finally:
        bar.close()

    counters["rejected_steps"] = state.rejected
    for name, value in sorted(counters.items()):
        _metric(metrics_path, state.step, f"counter/{name}", float(value))

    ckpt_path = run_dir / CHECKPOINT_NAME
    save_checkpoint(ckpt_path, model, state=state, config=config_echo, seed=cfg.seed)
    info(f"Checkpoint written to {ckpt_path} after {state.step} steps.")
    return TrainResult(model=model, state=state, losses=losses, checkpoint=ckpt_path, counters=counters)
