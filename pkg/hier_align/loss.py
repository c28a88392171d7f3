"""
Contextualized contrastive alignment objectives.

All text-conditioned visual features (rows) are scored against all text
embeddings (columns) of the micro-batch in one flattened BK x BK block. The
CE variant spreads a soft target over every slot of the same image; the BCE
variant keeps binary targets and down-weights intra-image off-diagonal pairs
by beta instead.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from hier_align import numerics as nx
from hier_align.decompose import Level
from hier_align.errors import DimensionError, NonFiniteError
from hier_align.numerics import Rng, Tensor
from hier_align.pooling import PoolBlock, PooledFeatures

MAX_LOGIT_SCALE = 100.0
INIT_LOG_SCALE = math.log(1.0 / 0.07)


class LossMode(str, Enum):
    CE = "ce"
    BCE = "bce"


class DistanceKind(str, Enum):
    INDEX = "index"  # |slot_i - slot_j|
    LEVEL = "level"  # |rank(level_i) - rank(level_j)|


@dataclass(frozen=True)
class Calibration:
    lam: float = 0.05
    distance: DistanceKind = DistanceKind.INDEX

    def __post_init__(self) -> None:
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"train.cal_lambda={self.lam} must be a finite value >= 0.")
        object.__setattr__(self, "distance", DistanceKind(self.distance))

    def to_dict(self) -> Dict[str, object]:
        return {"lam": self.lam, "distance": self.distance.value}


@dataclass(frozen=True)
class SlotMeta:
    image: int
    slot: int
    level: Level
    conditioned: bool = False


@dataclass
class SimilarityBlock:
    S: Tensor
    log_scale: Tensor
    B: int
    K: int
    row_meta: Tuple[SlotMeta, ...] = ()
    col_meta: Tuple[SlotMeta, ...] = ()

    @property
    def scale(self) -> float:
        return min(math.exp(self.log_scale.item()), MAX_LOGIT_SCALE)

    @property
    def n_base(self) -> int:
        return self.B * self.K

    @classmethod
    def from_logits(cls, S: Tensor, B: int, K: int) -> "SimilarityBlock":
        """Wrap precomputed logits; the scale slot is a unit placeholder."""
        return cls(S=S, log_scale=Tensor(np.zeros((), dtype=S.dtype), dtype=S.dtype), B=B, K=K)


@dataclass(frozen=True, eq=False)
class TargetMatrix:
    mode: LossMode
    beta: float
    B: int
    K: int
    w: np.ndarray
    p: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    calibration: Optional[Calibration] = None
    mask: Optional[np.ndarray] = None  # False where a pair is left out entirely

    @property
    def n_base(self) -> int:
        return self.B * self.K

    @property
    def size(self) -> int:
        return int(self.w.shape[0])


@dataclass(frozen=True)
class LossReport:
    l_v2t: float
    l_t2v: float
    l_beta_cal: float
    l_global: float
    l_total: float
    f_diag: float
    counters: Dict[str, int] = field(default_factory=dict)
    objective: Optional[Tensor] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> Dict[str, object]:
        return {
            "l_v2t": self.l_v2t,
            "l_t2v": self.l_t2v,
            "l_beta_cal": self.l_beta_cal,
            "l_global": self.l_global,
            "l_total": self.l_total,
            "f_diag": self.f_diag,
            "counters": dict(self.counters),
        }


@dataclass
class ConditionedNegatives:
    V: Optional[Tensor]  # [E, D] features pooled on the owner image
    T: Optional[Tensor]  # [E, D] the borrowed text embeddings
    owners: Tuple[int, ...] = ()
    sources: Tuple[Tuple[int, int], ...] = ()
    levels: Tuple[Level, ...] = ()

    @property
    def count(self) -> int:
        return len(self.owners)


def _check_beta(beta: float) -> None:
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"train.beta={beta} must be within [0, 1].")


def _check_sizes(B: int, K: int) -> None:
    if B < 1 or K < 1:
        raise ValueError(f"B={B} and K={K} must both be >= 1.")


def diag_fraction(K: int, beta: float) -> float:
    if K < 1:
        raise ValueError(f"K={K} must be >= 1.")
    _check_beta(beta)
    return 1.0 / (1.0 + (K - 1) * beta)


def logit_scale(log_scale: Tensor) -> Tensor:
    return nx.exp(nx.clamp_max(log_scale, math.log(MAX_LOGIT_SCALE)))


def _default_levels(K: int) -> Tuple[Level, ...]:
    return (Level.CAPTION,) + (Level.SENTENCE,) * (K - 1)


def _flatten(x: Union[PooledFeatures, Tensor]) -> Tensor:
    t = x.V if isinstance(x, PooledFeatures) else x
    if t.ndim == 3:
        return nx.reshape(t, (t.shape[0] * t.shape[1], t.shape[2]))
    return t


def build_similarity(
    V: Union[PooledFeatures, Tensor],
    T: Tensor,
    log_scale: Tensor,
    *,
    K: Optional[int] = None,
    levels: Optional[Sequence[Level]] = None,
    negatives: Optional[ConditionedNegatives] = None,
) -> SimilarityBlock:
    """
    S_ij = cos(v_i, t_j) * min(exp(log_scale), 100). Inputs are [B, K, D] or
    already flattened image-major [B*K, D] (then ``K`` is required).
    """
    v_src = V.V if isinstance(V, PooledFeatures) else V
    if K is None:
        if v_src.ndim != 3:
            raise DimensionError("flattened similarity inputs need K")
        K = v_src.shape[1]
    v = _flatten(V)
    t = _flatten(T)
    if v.shape != t.shape:
        raise DimensionError(f"visual {v.shape} and text {t.shape} features disagree")
    if v.shape[0] % K:
        raise DimensionError(f"{v.shape[0]} rows do not split into slots of K={K}")
    B = v.shape[0] // K
    levels = tuple(levels) if levels is not None else _default_levels(K)
    meta = tuple(SlotMeta(i // K, i % K, levels[i % K]) for i in range(B * K))

    if negatives is not None and negatives.count:
        v = nx.concat([v, negatives.V], axis=0)
        t = nx.concat([t, negatives.T], axis=0)
        meta = meta + tuple(
            SlotMeta(owner, slot, lv, conditioned=True)
            for owner, (_, slot), lv in zip(negatives.owners, negatives.sources, negatives.levels)
        )

    cos = nx.matmul(nx.l2_normalize_rows(v), nx.transpose(nx.l2_normalize_rows(t)))
    S = nx.mul(cos, logit_scale(log_scale))
    return SimilarityBlock(S=S, log_scale=log_scale, B=B, K=K, row_meta=meta, col_meta=meta)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def _intra_block(
    K: int,
    beta: float,
    calibration: Optional[Calibration],
    levels: Optional[Sequence[Level]],
) -> np.ndarray:
    block = np.full((K, K), float(beta), dtype=np.float64)
    if calibration is not None:
        if calibration.distance == DistanceKind.INDEX:
            idx = np.arange(K)
            dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
        else:
            lv = tuple(levels) if levels is not None else _default_levels(K)
            ranks = np.asarray([level.rank for level in lv], dtype=np.float64)
            dist = np.abs(ranks[:, None] - ranks[None, :])
        block = beta * np.exp(-calibration.lam * dist)
    np.fill_diagonal(block, 1.0)
    return block


def _row_normalize(w: np.ndarray) -> np.ndarray:
    sums = w.sum(axis=1, keepdims=True)
    out = np.zeros_like(w)
    np.divide(w, sums, out=out, where=sums > 0)
    return out


def build_ce_targets(
    B: int,
    K: int,
    beta: float,
    calibration: Optional[Calibration] = None,
    levels: Optional[Sequence[Level]] = None,
) -> TargetMatrix:
    _check_sizes(B, K)
    _check_beta(beta)
    w = np.kron(np.eye(B), _intra_block(K, beta, calibration, levels))
    return TargetMatrix(
        mode=LossMode.CE, beta=beta, B=B, K=K, w=w, p=_row_normalize(w), calibration=calibration
    )


def build_bce_targets(
    B: int,
    K: int,
    beta: float,
    calibration: Optional[Calibration] = None,
    levels: Optional[Sequence[Level]] = None,
) -> TargetMatrix:
    _check_sizes(B, K)
    _check_beta(beta)
    y = np.kron(np.eye(B), np.ones((K, K)))
    w = np.ones((B * K, B * K), dtype=np.float64)
    block = _intra_block(K, beta, calibration, levels)
    for b in range(B):
        w[b * K : (b + 1) * K, b * K : (b + 1) * K] = block
    return TargetMatrix(mode=LossMode.BCE, beta=beta, B=B, K=K, w=w, y=y, calibration=calibration)


def build_targets(
    mode: LossMode,
    B: int,
    K: int,
    beta: float,
    calibration: Optional[Calibration] = None,
    levels: Optional[Sequence[Level]] = None,
) -> TargetMatrix:
    if LossMode(mode) == LossMode.CE:
        return build_ce_targets(B, K, beta, calibration, levels)
    return build_bce_targets(B, K, beta, calibration, levels)


def extend_targets(tgt: TargetMatrix, source_images: Sequence[int]) -> TargetMatrix:
    """
    Grow the target grid by one conditioned-negative row and column per entry
    of ``source_images`` (the image each borrowed text came from). They are
    never positives: CE gives them zero target mass, BCE gives them y=0 with
    weight 1. An extra column holds the same text as a column of its source
    image, so it is kept out of that image's rows (and the extra row out of
    that image's columns): BCE weight 0, excluded from the CE normaliser.
    """
    extra = len(source_images)
    if extra == 0:
        return tgt
    n = tgt.n_base
    m = n + extra
    mask = np.ones((m, m), dtype=bool)
    for e, src in enumerate(source_images):
        if not (0 <= src < tgt.B):
            raise ValueError(f"source image {src} is outside the micro-batch of B={tgt.B}.")
        block = slice(src * tgt.K, (src + 1) * tgt.K)
        mask[block, n + e] = False
        mask[n + e, block] = False
    if tgt.mode == LossMode.CE:
        w = np.zeros((m, m), dtype=np.float64)
        w[:n, :n] = tgt.w[:n, :n]
        return replace(tgt, w=w, p=_row_normalize(w), mask=mask)
    assert tgt.y is not None
    y = np.zeros((m, m), dtype=np.float64)
    y[:n, :n] = tgt.y[:n, :n]
    w = np.ones((m, m), dtype=np.float64)
    w[:n, :n] = tgt.w[:n, :n]
    w[~mask] = 0.0
    return replace(tgt, w=w, y=y, mask=mask)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _check_grid(sim: SimilarityBlock, tgt: TargetMatrix) -> None:
    if sim.S.shape != tgt.w.shape:
        raise DimensionError(f"similarity {sim.S.shape} and targets {tgt.w.shape} disagree")


def _report(l_v2t: Tensor, l_t2v: Tensor, tgt: TargetMatrix) -> LossReport:
    objective = nx.scale(nx.add(l_v2t, l_t2v), 0.5)
    a, b = l_v2t.item(), l_t2v.item()
    beta_cal = 0.5 * (a + b)
    return LossReport(
        l_v2t=a,
        l_t2v=b,
        l_beta_cal=beta_cal,
        l_global=0.0,
        l_total=beta_cal,
        f_diag=diag_fraction(tgt.K, tgt.beta),
        objective=objective,
    )


def ce_loss(sim: SimilarityBlock, tgt: TargetMatrix) -> LossReport:
    if tgt.mode != LossMode.CE or tgt.p is None:
        raise ValueError(f"ce_loss needs CE targets, got mode={tgt.mode.value}.")
    _check_grid(sim, tgt)
    S = sim.S
    p_v2t = Tensor(tgt.p, dtype=S.dtype)
    p_t2v = Tensor(_row_normalize(tgt.w.T), dtype=S.dtype)
    norm = -1.0 / tgt.n_base
    l_v2t = nx.scale(nx.sum_all(nx.mul(p_v2t, nx.log_softmax_rows(S, tgt.mask))), norm)
    mask_t = tgt.mask.T if tgt.mask is not None else None
    l_t2v = nx.scale(nx.sum_all(nx.mul(p_t2v, nx.log_softmax_rows(nx.transpose(S), mask_t))), norm)
    return _report(l_v2t, l_t2v, tgt)


def bce_loss(sim: SimilarityBlock, tgt: TargetMatrix) -> LossReport:
    if tgt.mode != LossMode.BCE or tgt.y is None:
        raise ValueError(f"bce_loss needs BCE targets, got mode={tgt.mode.value}.")
    _check_grid(sim, tgt)
    S = sim.S
    norm = 1.0 / tgt.n_base
    w = Tensor(tgt.w, dtype=S.dtype)
    w_t = Tensor(np.ascontiguousarray(tgt.w.T), dtype=S.dtype)
    l_v2t = nx.scale(nx.sum_all(nx.mul(w, nx.bce_with_logits(S, tgt.y))), norm)
    l_t2v = nx.scale(nx.sum_all(nx.mul(w_t, nx.bce_with_logits(nx.transpose(S), tgt.y.T))), norm)
    return _report(l_v2t, l_t2v, tgt)


def alignment_loss(sim: SimilarityBlock, tgt: TargetMatrix) -> LossReport:
    return ce_loss(sim, tgt) if tgt.mode == LossMode.CE else bce_loss(sim, tgt)


def info_nce(logits: Tensor) -> Tensor:
    """Symmetric single-positive InfoNCE over a square logit matrix."""
    n = logits.shape[0]
    eye = Tensor(np.eye(n), dtype=logits.dtype)
    rows = nx.scale(nx.sum_all(nx.mul(eye, nx.log_softmax_rows(logits))), -1.0 / n)
    cols = nx.scale(nx.sum_all(nx.mul(eye, nx.log_softmax_rows(nx.transpose(logits)))), -1.0 / n)
    return nx.scale(nx.add(rows, cols), 0.5)


def global_loss(cls_embeddings: Tensor, caption_embeddings: Tensor, log_scale: Tensor) -> Tensor:
    if cls_embeddings.shape != caption_embeddings.shape or cls_embeddings.ndim != 2:
        raise DimensionError(
            f"global loss needs matching [B, D] inputs, got {cls_embeddings.shape} "
            f"and {caption_embeddings.shape}"
        )
    cos = nx.matmul(
        nx.l2_normalize_rows(cls_embeddings),
        nx.transpose(nx.l2_normalize_rows(caption_embeddings)),
    )
    return info_nce(nx.mul(cos, logit_scale(log_scale)))


def total_loss(
    beta_cal: Union[LossReport, float],
    global_term: Union[Tensor, float] = 0.0,
    counters: Optional[Counter] = None,
) -> LossReport:
    if not isinstance(beta_cal, LossReport):
        value = float(beta_cal)
        beta_cal = LossReport(
            l_v2t=value,
            l_t2v=value,
            l_beta_cal=value,
            l_global=0.0,
            l_total=value,
            f_diag=float("nan"),
            objective=Tensor(np.asarray(value, dtype=np.float64)),
        )
    g_value = global_term.item() if isinstance(global_term, Tensor) else float(global_term)
    if not (math.isfinite(beta_cal.l_beta_cal) and math.isfinite(g_value)):
        raise NonFiniteError(
            f"loss components must be finite (beta_cal={beta_cal.l_beta_cal}, global={g_value})"
        )
    objective = beta_cal.objective
    if objective is not None:
        objective = nx.add(objective, global_term)
    merged = dict(beta_cal.counters)
    if counters:
        merged.update({k: int(v) for k, v in counters.items()})
    return replace(
        beta_cal,
        l_global=g_value,
        l_total=beta_cal.l_beta_cal + g_value,
        counters=merged,
        objective=objective,
    )


# ---------------------------------------------------------------------------
# Text-conditioned negatives
# ---------------------------------------------------------------------------


def augment_conditioned_negatives(
    patches: Tensor,
    texts: Tensor,
    level_of: Sequence[Level],
    levels: Iterable[Level],
    block: PoolBlock,
    rng: Rng,
) -> ConditionedNegatives:
    """
    For every image b and enabled level, borrow one text slot of that level
    from a uniformly drawn other image b' != b and pool it on b's patches.
    """
    enabled = sorted({Level(lv) for lv in levels}, key=lambda lv: lv.rank)
    if not enabled:
        return ConditionedNegatives(V=None, T=None)
    if texts.ndim != 3:
        raise DimensionError(f"texts must be [B, K, D], got {texts.shape}")
    B, K, D = texts.shape
    if B < 2:
        raise ValueError(f"conditioned negatives need train.micro_batch >= 2, got B={B}.")
    if len(level_of) != K:
        raise DimensionError(f"{len(level_of)} slot levels for K={K}")

    slots_by_level: Dict[Level, List[int]] = {}
    for lv in enabled:
        slots = [k for k, slot_level in enumerate(level_of) if slot_level == lv]
        if not slots:
            raise ValueError(f"train.negative_levels includes {lv.value!r} but the hierarchy has no such slot.")
        slots_by_level[lv] = slots

    rows: List[int] = []
    owners: List[int] = []
    sources: List[Tuple[int, int]] = []
    picked_levels: List[Level] = []
    for b in range(B):
        for lv in enabled:
            other = int(rng.integers(0, B - 1))
            if other >= b:
                other += 1
            choices = slots_by_level[lv]
            slot = choices[int(rng.integers(0, len(choices)))]
            rows.append(other * K + slot)
            owners.append(b)
            sources.append((other, slot))
            picked_levels.append(lv)

    n_levels = len(enabled)
    borrowed = nx.gather_rows(nx.reshape(texts, (B * K, D)), rows)
    pooled = block(nx.reshape(borrowed, (B, n_levels, D)), patches)
    return ConditionedNegatives(
        V=nx.reshape(pooled.V, (B * n_levels, D)),
        T=borrowed,
        owners=tuple(owners),
        sources=tuple(sources),
        levels=tuple(picked_levels),
    )
