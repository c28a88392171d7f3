"""
Synthetic grid scenes with captions, ground-truth regions and hard negatives.

Each cell of a G x G grid carries a (shape, color, size) id triple; empty cells
carry the background triple (0, 0, 0). Objects occupy exactly one cell.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from hier_align.errors import DataError
from hier_align.numerics import Rng, Tensor
from hier_align.storage import iter_jsonl, write_jsonl
from hier_align.vocab import COLORS, NUMBERS, SHAPES, SIZES

Tokens = Tuple[str, ...]

ROW_BANDS = ("top", "middle", "bottom")
COL_BANDS = ("left", "center", "right")

PHRASE_OBJECT = "object"
PHRASE_SPATIAL = "spatial"


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 7
    objects: int = 4
    shape_vocab: int = 7
    color_vocab: int = 7
    size_vocab: int = 4
    hard_negatives: int = 10
    train_count: int = 2000
    val_count: int = 256

    def __post_init__(self) -> None:
        if self.grid_size < 1:
            raise ValueError(f"world.grid_size={self.grid_size} must be >= 1.")
        cells = self.grid_size * self.grid_size
        if not 1 <= self.objects <= cells:
            raise ValueError(
                f"world.objects={self.objects} must be within [1, {cells}] for a "
                f"{self.grid_size}x{self.grid_size} grid."
            )
        for name, value, limit in (
            ("shape_vocab", self.shape_vocab, len(SHAPES)),
            ("color_vocab", self.color_vocab, len(COLORS)),
            ("size_vocab", self.size_vocab, len(SIZES)),
        ):
            if not 2 <= value <= limit:
                raise ValueError(f"world.{name}={value} must be within [2, {limit}].")
        if self.hard_negatives < 0:
            raise ValueError(f"world.hard_negatives={self.hard_negatives} must be >= 0.")
        if self.hard_negatives > self.available_swaps:
            raise ValueError(
                f"world.hard_negatives={self.hard_negatives} exceeds the "
                f"{self.available_swaps} single-attribute swaps the vocabularies allow."
            )
        for name, value in (("train_count", self.train_count), ("val_count", self.val_count)):
            if value < 0:
                raise ValueError(f"world.{name}={value} must be >= 0.")

    @property
    def n_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def d_in(self) -> int:
        return self.shape_vocab + self.color_vocab + self.size_vocab

    @property
    def available_swaps(self) -> int:
        # object attributes use ids 1..V-1, so each has V-2 alternatives
        return (self.shape_vocab - 2) + (self.color_vocab - 2) + (self.size_vocab - 2)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Scene:
    grid_size: int
    cells: np.ndarray
    occupancy: np.ndarray
    vocab_sizes: Tuple[int, int, int]

    def __post_init__(self) -> None:
        n = self.grid_size * self.grid_size
        if self.cells.shape != (n, 3) or self.occupancy.shape != (n,):
            raise DataError(f"scene arrays do not match a {self.grid_size}x{self.grid_size} grid")
        if not self.occupancy.any():
            raise DataError("scene has no objects")
        for attr, size in enumerate(self.vocab_sizes):
            col = self.cells[:, attr]
            if col.min() < 0 or col.max() >= size:
                raise DataError(f"scene attribute {attr} outside vocabulary of {size}")
        if np.any(self.cells[~self.occupancy] != 0) or np.any(self.cells[self.occupancy] == 0):
            raise DataError("background cells must carry (0, 0, 0) and objects ids >= 1")

    @property
    def n_patches(self) -> int:
        return self.grid_size * self.grid_size

    def objects(self) -> List[Tuple[int, Tuple[int, int, int]]]:
        """Occupied cells in row-major order with their (shape, color, size) ids."""
        return [
            (int(i), (int(self.cells[i, 0]), int(self.cells[i, 1]), int(self.cells[i, 2])))
            for i in np.flatnonzero(self.occupancy)
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid_size": self.grid_size,
            "cells": self.cells.tolist(),
            "occupancy": [bool(v) for v in self.occupancy],
            "vocab_sizes": list(self.vocab_sizes),
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "Scene":
        try:
            return cls(
                grid_size=int(raw["grid_size"]),
                cells=np.asarray(raw["cells"], dtype=np.int64).reshape(-1, 3),
                occupancy=np.asarray(raw["occupancy"], dtype=bool),
                vocab_sizes=tuple(int(v) for v in raw["vocab_sizes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed scene: {exc}") from exc


@dataclass(frozen=True)
class RegionAnnotation:
    box: Tuple[int, int, int, int]
    phrase_index: int

    def __post_init__(self) -> None:
        r0, c0, r1, c1 = self.box
        if r0 > r1 or c0 > c1 or min(self.box) < 0:
            raise DataError(f"region box {self.box} is empty or negative")
        if self.phrase_index < 0:
            raise DataError(f"phrase_index={self.phrase_index} must be >= 0")

    def check_grid(self, grid_size: int) -> None:
        if max(self.box) >= grid_size:
            raise DataError(f"region box {self.box} leaves the {grid_size}x{grid_size} grid")

    def cells(self, grid_size: int) -> List[int]:
        r0, c0, r1, c1 = self.box
        return [r * grid_size + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]


@dataclass(frozen=True)
class ToyCaptionSet:
    caption: Tokens
    sentences: Tuple[Tokens, ...]
    phrases: Tuple[Tokens, ...]
    phrase_kinds: Tuple[str, ...]
    # aligned with the annotation list, not with phrases
    hard_negatives: Tuple[Tuple[Tokens, ...], ...]


@dataclass(frozen=True)
class ToyExample:
    index: int
    scene: Scene
    captions: ToyCaptionSet
    annotations: Tuple[RegionAnnotation, ...]


def generate_scene(rng: Rng, cfg: WorldConfig) -> Scene:
    n = cfg.n_patches
    if cfg.objects > n:
        raise ValueError(f"world.objects={cfg.objects} exceeds {n} grid cells.")
    placed = np.asarray(rng.choice(n, size=cfg.objects, replace=False), dtype=np.int64)
    cells = np.zeros((n, 3), dtype=np.int64)
    cells[placed, 0] = rng.integers(1, cfg.shape_vocab, size=cfg.objects)
    cells[placed, 1] = rng.integers(1, cfg.color_vocab, size=cfg.objects)
    cells[placed, 2] = rng.integers(1, cfg.size_vocab, size=cfg.objects)
    occupancy = np.zeros(n, dtype=bool)
    occupancy[placed] = True
    return Scene(
        grid_size=cfg.grid_size,
        cells=cells,
        occupancy=occupancy,
        vocab_sizes=(cfg.shape_vocab, cfg.color_vocab, cfg.size_vocab),
    )


def band_words(cell: int, grid_size: int) -> Tuple[str, str]:
    r, c = divmod(cell, grid_size)
    return ROW_BANDS[min(2, r * 3 // grid_size)], COL_BANDS[min(2, c * 3 // grid_size)]


def describe(attrs: Tuple[int, int, int]) -> Tokens:
    shape, color, size = attrs
    return (SIZES[size], COLORS[color], SHAPES[shape])


def _count_header(n: int) -> Tokens:
    if n == 1:
        return ("there", "is", "one", "object", ".")
    word = NUMBERS[n] if n < len(NUMBERS) - 1 else NUMBERS[-1]
    return ("there", "are", word, "objects", ".")


def single_swaps(attrs: Tuple[int, int, int], vocab_sizes: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Every attribute triple that differs from ``attrs`` in exactly one slot."""
    out: List[Tuple[int, int, int]] = []
    for slot, size in enumerate(vocab_sizes):
        for value in range(1, size):
            if value == attrs[slot]:
                continue
            swapped = list(attrs)
            swapped[slot] = value
            out.append((swapped[0], swapped[1], swapped[2]))
    return out


def generate_annotations(
    scene: Scene,
    rng: Rng,
    hard_negatives: int = 10,
) -> Tuple[ToyCaptionSet, List[RegionAnnotation]]:
    sentences: List[Tokens] = []
    phrases: List[Tokens] = []
    kinds: List[str] = []
    annotations: List[RegionAnnotation] = []
    negatives: List[Tuple[Tokens, ...]] = []

    for cell, attrs in scene.objects():
        r, c = divmod(cell, scene.grid_size)
        row_word, col_word = band_words(cell, scene.grid_size)
        desc = describe(attrs)
        if int(rng.integers(0, 2)) == 0:
            sentence = ("a", *desc, "at", "the", row_word, "and", "on", "the", col_word, ".")
        else:
            sentence = ("a", *desc, "sits", "at", "the", row_word, "on", "the", col_word, ".")
        sentences.append(sentence)

        annotations.append(RegionAnnotation(box=(r, c, r, c), phrase_index=len(phrases)))
        phrases.append(desc)
        kinds.append(PHRASE_OBJECT)
        phrases.append(("at", "the", row_word, col_word))
        kinds.append(PHRASE_SPATIAL)

        swaps = single_swaps(attrs, scene.vocab_sizes)
        if hard_negatives > len(swaps):
            raise ValueError(
                f"world.hard_negatives={hard_negatives} exceeds {len(swaps)} available swaps."
            )
        picks = rng.choice(len(swaps), size=hard_negatives, replace=False) if hard_negatives else []
        negatives.append(tuple(describe(swaps[int(i)]) for i in picks))

    caption: Tokens = _count_header(len(sentences))
    for sentence in sentences:
        caption = caption + sentence
    captions = ToyCaptionSet(
        caption=caption,
        sentences=tuple(sentences),
        phrases=tuple(phrases),
        phrase_kinds=tuple(kinds),
        hard_negatives=tuple(negatives),
    )
    return captions, annotations


def render_patch_input(scene: Scene) -> Tensor:
    """One row per cell: one-hot shape | one-hot color | one-hot size."""
    return Tensor(render_patch_array(scene))


def render_patch_array(scene: Scene, dtype: Any = np.float32) -> np.ndarray:
    s, c, z = scene.vocab_sizes
    rows = np.arange(scene.n_patches)
    out = np.zeros((scene.n_patches, s + c + z), dtype=dtype)
    out[rows, scene.cells[:, 0]] = 1.0
    out[rows, s + scene.cells[:, 1]] = 1.0
    out[rows, s + c + scene.cells[:, 2]] = 1.0
    return out


def make_example(seed: int, index: int, cfg: WorldConfig, split: str = "train") -> ToyExample:
    rng = Rng(seed, (split, index))
    scene = generate_scene(rng.child("scene"), cfg)
    captions, annotations = generate_annotations(scene, rng.child("captions"), cfg.hard_negatives)
    return ToyExample(index=index, scene=scene, captions=captions, annotations=tuple(annotations))


def generate_dataset(seed: int, count: int, cfg: WorldConfig, split: str = "train") -> List[ToyExample]:
    return [make_example(seed, i, cfg, split) for i in range(count)]


def example_to_record(ex: ToyExample, cfg: WorldConfig, seed: int, split: str) -> Dict[str, Any]:
    caps = ex.captions
    return {
        "index": ex.index,
        "split": split,
        "seed": seed,
        "world": cfg.to_dict(),
        "scene": ex.scene.to_dict(),
        "caption": list(caps.caption),
        "sentences": [list(s) for s in caps.sentences],
        "phrases": [list(p) for p in caps.phrases],
        "phrase_kinds": list(caps.phrase_kinds),
        "annotations": [
            {
                "box": list(a.box),
                "phrase_index": a.phrase_index,
                "hard_negatives": [list(n) for n in negs],
            }
            for a, negs in zip(ex.annotations, caps.hard_negatives)
        ],
    }


def _tokens(raw: Any, what: str) -> Tokens:
    if not isinstance(raw, list) or not all(isinstance(t, str) for t in raw):
        raise DataError(f"{what} must be a list of token strings")
    return tuple(raw)


def record_to_example(rec: Dict[str, Any]) -> ToyExample:
    try:
        scene = Scene.from_dict(rec["scene"])
        phrases = tuple(_tokens(p, "phrase") for p in rec["phrases"])
        annotations: List[RegionAnnotation] = []
        negatives: List[Tuple[Tokens, ...]] = []
        for a in rec["annotations"]:
            ann = RegionAnnotation(box=tuple(int(v) for v in a["box"]), phrase_index=int(a["phrase_index"]))
            ann.check_grid(scene.grid_size)
            if ann.phrase_index >= len(phrases):
                raise DataError(f"phrase_index={ann.phrase_index} outside {len(phrases)} phrases")
            annotations.append(ann)
            negatives.append(tuple(_tokens(n, "hard negative") for n in a.get("hard_negatives", [])))
        captions = ToyCaptionSet(
            caption=_tokens(rec["caption"], "caption"),
            sentences=tuple(_tokens(s, "sentence") for s in rec["sentences"]),
            phrases=phrases,
            phrase_kinds=tuple(str(k) for k in rec.get("phrase_kinds", [PHRASE_OBJECT] * len(phrases))),
            hard_negatives=tuple(negatives),
        )
        return ToyExample(
            index=int(rec["index"]),
            scene=scene,
            captions=captions,
            annotations=tuple(annotations),
        )
    except KeyError as exc:
        raise DataError(f"record is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed record: {exc}") from exc


def write_dataset(path: Path, examples: Sequence[ToyExample], cfg: WorldConfig, seed: int, split: str) -> int:
    return write_jsonl(path, (example_to_record(ex, cfg, seed, split) for ex in examples))


def read_dataset(path: Path) -> List[ToyExample]:
    out: List[ToyExample] = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(record_to_example(rec))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out
