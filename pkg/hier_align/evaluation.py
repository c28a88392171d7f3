"""
Evaluation suite for trained models.

Scores are ranked by cosine similarity; the logit scale never changes a
ranking so it is left out. Ties are broken in favour of the lower candidate
index, which for retrieval means the ground-truth match wins a tie only when
it comes first.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from hier_align import numerics as nx
from hier_align.encoders import ImageTokens, TextEncoder, encode_token_batch
from hier_align.errors import DataError, DimensionError
from hier_align.numerics import Rng, Tensor
from hier_align.pooling import PooledFeatures
from hier_align.storage import dumps_canonical, write_bytes, write_file, write_json
from hier_align.toyworld import RegionAnnotation, ToyExample
from hier_align.vocab import Vocabulary

ArrayLike = Union[Tensor, PooledFeatures, np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    ks: Tuple[int, ...] = (1, 5)
    tci: bool = False
    max_images: int = 0  # 0 evaluates every image
    pgm: bool = True
    heatmap_scene: int = 0
    heatmap_text: str = ""

    def __post_init__(self) -> None:
        ks = tuple(sorted({int(k) for k in self.ks}))
        if not ks or ks[0] < 1:
            raise ValueError(f"eval.ks={self.ks!r} must list positive integers.")
        object.__setattr__(self, "ks", ks)
        if self.max_images < 0:
            raise ValueError(f"eval.max_images={self.max_images} must be >= 0.")
        if self.heatmap_scene < 0:
            raise ValueError(f"eval.heatmap_scene={self.heatmap_scene} must be >= 0.")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ks": list(self.ks),
            "tci": self.tci,
            "max_images": self.max_images,
            "pgm": self.pgm,
            "heatmap_scene": self.heatmap_scene,
            "heatmap_text": self.heatmap_text,
        }


@dataclass(frozen=True)
class RetrievalReport:
    # r_at["i2t"][k], r_at["t2i"][k]
    r_at: Dict[str, Dict[int, float]]
    n_queries: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_queries": self.n_queries,
            "r_at": {d: {str(k): v for k, v in sorted(r.items())} for d, r in sorted(self.r_at.items())},
        }


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, PooledFeatures):
        x = x.V
    if isinstance(x, Tensor):
        return np.asarray(x.data, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = np.argwhere(norms[..., 0] == 0)
    if zero.size:
        raise DataError(f"{what} row {tuple(int(i) for i in zero[0])} has zero norm")
    return x / norms


def _true_ranks(scores: np.ndarray) -> np.ndarray:
    """0-based rank of column i within row i."""
    m = scores.shape[0]
    diag = scores[np.arange(m), np.arange(m)][:, None]
    idx = np.arange(m)
    greater = (scores > diag).sum(axis=1)
    tied_before = ((scores == diag) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return greater + tied_before


def recall_from_scores(scores: np.ndarray, ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    """``scores[i, j]`` rates image i against text j; the diagonal holds the true pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"retrieval scores must be square, got {scores.shape}")
    m = scores.shape[0]
    if m == 0:
        raise DataError("retrieval needs at least one query")
    i2t = _true_ranks(scores)
    t2i = _true_ranks(scores.T)
    return RetrievalReport(
        r_at={
            "i2t": {int(k): float(np.mean(i2t < k)) for k in ks},
            "t2i": {int(k): float(np.mean(t2i < k)) for k in ks},
        },
        n_queries=m,
    )


def recall_at_k(image_embs: ArrayLike, text_embs: ArrayLike, ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    images = _as_array(image_embs)
    texts = _as_array(text_embs)
    if images.shape != texts.shape or images.ndim != 2:
        raise DimensionError(f"paired embeddings must be [M, D] each, got {images.shape} and {texts.shape}")
    if images.shape[0] == 0:
        raise DataError("retrieval needs at least one query")
    scores = _unit_rows(images, "image embedding") @ _unit_rows(texts, "text embedding").T
    return recall_from_scores(scores, ks)


# ---------------------------------------------------------------------------
# Region matching and grounding
# ---------------------------------------------------------------------------


def grid_side(n_patches: int) -> int:
    g = math.isqrt(n_patches)
    if g * g != n_patches:
        raise DimensionError(f"{n_patches} patches do not form a square grid")
    return g


def _patches_of(image: ImageTokens, index: int) -> np.ndarray:
    patches = _as_array(image.patches)
    return patches[index] if patches.ndim == 3 else patches


def region_feature(patches: np.ndarray, region: RegionAnnotation, grid_size: int) -> np.ndarray:
    """Mean of the patch embeddings inside the box."""
    region.check_grid(grid_size)
    cells = region.cells(grid_size)
    if not cells:
        raise DataError(f"region box {region.box} is empty")
    return np.asarray(patches, dtype=np.float64)[cells].mean(axis=0)


def region_match(
    image: ImageTokens,
    region: RegionAnnotation,
    candidates: Sequence[Sequence[str]],
    enc: TextEncoder,
    vocab: Vocabulary,
    *,
    index: int = 0,
    counters: Optional[Counter] = None,
) -> int:
    """0-based rank of ``candidates[0]`` (the positive) against the region feature."""
    if len(candidates) < 2:
        raise DataError("region matching needs a positive and at least one negative")
    positive = tuple(candidates[0])
    if any(tuple(c) == positive for c in candidates[1:]):
        raise DataError(f"positive {' '.join(positive)!r} also appears among the negatives")
    patches = _patches_of(image, index)
    feature = region_feature(patches, region, grid_side(patches.shape[0]))
    feature = _unit_rows(feature[None, :], "region feature")[0]
    with nx.no_grad():
        texts = encode_token_batch(enc, vocab, candidates, counters)
    scores = _unit_rows(_as_array(texts), "candidate embedding") @ feature
    return int((scores[1:] > scores[0]).sum())


def encode_images(model: Any, examples: Sequence[ToyExample]) -> ImageTokens:
    from hier_align.train import batch_inputs

    with nx.no_grad():
        return model.vision(batch_inputs(examples, model))


def encode_captions(model: Any, examples: Sequence[ToyExample], counters: Optional[Counter] = None) -> Tensor:
    with nx.no_grad():
        return encode_token_batch(model.text, model.vocab, [ex.captions.caption for ex in examples], counters)


def region_match_accuracy(
    model: Any,
    examples: Sequence[ToyExample],
    images: Optional[ImageTokens] = None,
) -> Tuple[float, int]:
    """Top-1 share over every annotated region: positive phrase vs its hard negatives."""
    images = images if images is not None else encode_images(model, examples)
    hits = 0
    total = 0
    for b, ex in enumerate(examples):
        for ann, negatives in zip(ex.annotations, ex.captions.hard_negatives):
            if not negatives:
                continue
            candidates = [ex.captions.phrases[ann.phrase_index], *negatives]
            rank = region_match(images, ann, candidates, model.text, model.vocab, index=b)
            hits += int(rank == 0)
            total += 1
    if total == 0:
        raise DataError("no annotated regions with hard negatives to match")
    return hits / total, total


def phrase_grounding(
    model: Any,
    examples: Sequence[ToyExample],
    images: Optional[ImageTokens] = None,
) -> Tuple[float, int]:
    """Share of annotated phrases whose head-averaged pooling attention peaks inside their box."""
    images = images if images is not None else encode_images(model, examples)
    grid = model.world.grid_size
    hits = 0
    total = 0
    with nx.no_grad():
        for b, ex in enumerate(examples):
            if not ex.annotations:
                continue
            phrases = [ex.captions.phrases[a.phrase_index] for a in ex.annotations]
            texts = encode_token_batch(model.text, model.vocab, phrases)
            patches = nx.narrow(images.patches, 0, b, 1)
            pooled = model.pool(nx.reshape(texts, (1, *texts.shape)), patches)
            peaks = pooled.alphas[0].mean(axis=1).argmax(axis=-1)
            for ann, peak in zip(ex.annotations, peaks):
                hits += int(int(peak) in ann.cells(grid))
                total += 1
    if total == 0:
        raise DataError("no annotated phrases to ground")
    return hits / total, total


# ---------------------------------------------------------------------------
# Diversity and text-conditioned retrieval
# ---------------------------------------------------------------------------


def sim_diversity(V: Union[ArrayLike, Sequence[ArrayLike]]) -> float:
    """
    Mean over images of the mean pairwise cosine among that image's K pooled
    features. Accepts [K, D], [B, K, D] or a list of per-image [K, D] blocks.
    """
    if isinstance(V, (list, tuple)):
        blocks = [_as_array(v) for v in V]
    else:
        arr = _as_array(V)
        blocks = [arr] if arr.ndim == 2 else list(arr)
    if not blocks:
        raise DataError("sim diversity needs at least one image")
    means: List[float] = []
    for block in blocks:
        k = block.shape[0]
        if block.ndim != 2 or k < 2:
            raise DataError(f"sim diversity needs K >= 2 features per image, got shape {block.shape}")
        unit = _unit_rows(block, "pooled feature")
        gram = unit @ unit.T
        upper = np.triu_indices(k, 1)
        means.append(float(gram[upper].mean()))
    return float(np.mean(means))


def model_sim_diversity(model: Any, examples: Sequence[ToyExample], cfg: Any) -> float:
    from hier_align.train import batch_hierarchies

    hierarchies = batch_hierarchies(examples, cfg, Rng(cfg.seed, ("eval", "hierarchy")))
    images = encode_images(model, examples)
    with nx.no_grad():
        slots = [slot for h in hierarchies for slot in h.slots()]
        texts = encode_token_batch(model.text, model.vocab, slots)
        texts = nx.reshape(texts, (len(examples), hierarchies[0].K, model.cfg.dim))
        pooled = model.pool(texts, images.patches)
    return sim_diversity(pooled)


def tci_scores(model: Any, examples: Sequence[ToyExample]) -> np.ndarray:
    """[M, M] cosine between image i pooled by caption j and caption j itself."""
    images = encode_images(model, examples)
    captions = encode_captions(model, examples)
    m = len(examples)
    cap_unit = _unit_rows(_as_array(captions), "caption embedding")
    scores = np.zeros((m, m), dtype=np.float64)
    with nx.no_grad():
        queries = nx.reshape(captions, (1, *captions.shape))
        for i in range(m):
            pooled = model.pool(queries, nx.narrow(images.patches, 0, i, 1))
            v = _unit_rows(_as_array(pooled.V)[0], "pooled feature")
            scores[i] = np.sum(v * cap_unit, axis=1)
    return scores


def tci_retrieval(model: Any, examples: Sequence[ToyExample], ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    if not examples:
        raise DataError("retrieval needs at least one query")
    return recall_from_scores(tci_scores(model, examples), ks)


def cls_retrieval(model: Any, examples: Sequence[ToyExample], ks: Sequence[int] = (1, 5)) -> RetrievalReport:
    if not examples:
        raise DataError("retrieval needs at least one query")
    return recall_at_k(encode_images(model, examples).cls, encode_captions(model, examples), ks)


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------


def heatmap_values(patches: np.ndarray, text_emb: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """G x G grid of cos(patch, text) * scale. Zero-norm patches score 0."""
    patches = np.asarray(patches, dtype=np.float64)
    text = np.asarray(text_emb, dtype=np.float64).reshape(-1)
    t_norm = np.linalg.norm(text)
    if t_norm == 0:
        raise DataError("heatmap text embedding has zero norm")
    norms = np.linalg.norm(patches, axis=1)
    dots = patches @ (text / t_norm)
    cos = np.zeros_like(dots)
    np.divide(dots, norms, out=cos, where=norms > 0)
    g = grid_side(patches.shape[0])
    return (cos * scale).reshape(g, g)


def heatmap_csv(values: np.ndarray, header: Optional[str] = None) -> str:
    lines = [f"# {header}"] if header else []
    lines.extend(",".join(f"{v:.6f}" for v in row) for row in values)
    return "\n".join(lines) + "\n"


def heatmap_pgm(values: np.ndarray) -> bytes:
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        norm = (values - lo) / (hi - lo)
    else:
        norm = np.zeros_like(values)
    pixels = np.round(norm * 255).astype(np.uint8)
    g_rows, g_cols = pixels.shape
    return f"P5\n{g_cols} {g_rows}\n255\n".encode("ascii") + pixels.tobytes()


def export_heatmap(
    image: ImageTokens,
    text_emb: ArrayLike,
    path: Path,
    *,
    index: int = 0,
    scale: float = 1.0,
    pgm_path: Optional[Path] = None,
    header: Optional[str] = None,
) -> np.ndarray:
    values = heatmap_values(_patches_of(image, index), _as_array(text_emb), scale)
    try:
        write_file(path, heatmap_csv(values, header))
        if pgm_path is not None:
            write_bytes(pgm_path, heatmap_pgm(values))
    except OSError as exc:
        raise OSError(f"cannot write heatmap {path}: {exc.strerror or exc}") from exc
    return values


def read_heatmap_csv(path: Path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in path.read_text(encoding="utf-8").splitlines()
        if line and not line.startswith("#")
    ]
    return np.asarray(rows, dtype=np.float64)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def evaluate_model(
    model: Any,
    examples: Sequence[ToyExample],
    train_cfg: Any,
    eval_cfg: Optional[EvalConfig] = None,
) -> Dict[str, Any]:
    eval_cfg = eval_cfg or EvalConfig()
    if eval_cfg.max_images:
        examples = examples[: eval_cfg.max_images]
    if not examples:
        raise DataError("evaluation set is empty")

    images = encode_images(model, examples)
    report: Dict[str, Any] = {
        "n_images": len(examples),
        "cls_retrieval": recall_at_k(images.cls, encode_captions(model, examples), eval_cfg.ks).to_dict(),
    }
    if eval_cfg.tci:
        report["tci_retrieval"] = tci_retrieval(model, examples, eval_cfg.ks).to_dict()
    top1, regions = region_match_accuracy(model, examples, images)
    report["region_match"] = {"top1": top1, "regions": regions}
    grounded, phrases = phrase_grounding(model, examples, images)
    report["phrase_grounding"] = {"accuracy": grounded, "phrases": phrases}
    if train_cfg.K >= 2:
        report["sim_diversity"] = model_sim_diversity(model, examples, train_cfg)
    return report


def flatten_report(report: Dict[str, Any]) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for path in ("cls_retrieval", "tci_retrieval"):
        if path not in report:
            continue
        for direction, values in report[path]["r_at"].items():
            for k, value in values.items():
                out[f"retrieval/{path.split('_')[0]}/{direction}@{k}"] = float(value)
    if "region_match" in report:
        out["region_match/top1"] = float(report["region_match"]["top1"])
    if "phrase_grounding" in report:
        out["phrase_grounding/accuracy"] = float(report["phrase_grounding"]["accuracy"])
    if "sim_diversity" in report:
        out["sim_diversity"] = float(report["sim_diversity"])
    return out


def write_eval_report(
    json_path: Path,
    csv_path: Path,
    report: Dict[str, Any],
    config: Dict[str, Any],
    meta: Dict[str, Any],
) -> None:
    try:
        write_json(json_path, {"config": config, "report": report, "meta": meta})
        lines = [f"# config={dumps_canonical(config)}", "metric,value"]
        lines.extend(f"{name},{value:.6f}" for name, value in sorted(flatten_report(report).items()))
        write_file(csv_path, "\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write evaluation report {json_path}: {exc.strerror or exc}") from exc
