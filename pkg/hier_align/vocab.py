"""
Closed token vocabulary and static part-of-speech lexicon for toy captions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Tuple

from hier_align.errors import DataError

PAD = "<pad>"
UNK = "<unk>"

# Index 0 of every attribute list is the background value of empty cells.
SHAPES: Tuple[str, ...] = (
    "blank", "circle", "square", "triangle", "star", "cross", "diamond", "ring", "hexagon",
)
COLORS: Tuple[str, ...] = (
    "grey", "red", "blue", "green", "yellow", "purple", "orange", "white", "black",
)
SIZES: Tuple[str, ...] = ("plain", "small", "medium", "large", "huge")
NUMBERS: Tuple[str, ...] = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "many",
)
SPATIAL_HEADS: Tuple[str, ...] = (
    "left", "right", "top", "bottom", "center", "middle", "near", "front", "back",
)
FUNCTION_WORDS: Tuple[str, ...] = (
    "a", "the", "there", "are", "is", "objects", "object", "at", "on", "in", "and", "of",
    "to", "next", "sits", "rests", "leaning", "against", "beside", ".",
)

SENTENCE_TERMINATORS = frozenset({"."})


class PosTag(str, Enum):
    NOUN = "NOUN"
    ADJ = "ADJ"
    DET = "DET"
    VERB = "VERB"
    ADP = "ADP"
    SPATIAL = "SPATIAL"
    OTHER = "OTHER"


def _build_lexicon() -> Dict[str, PosTag]:
    lex: Dict[str, PosTag] = {}
    for w in SHAPES + ("objects", "object"):
        lex[w] = PosTag.NOUN
    for w in COLORS + SIZES:
        lex[w] = PosTag.ADJ
    for w in ("a", "the"):
        lex[w] = PosTag.DET
    for w in ("is", "are", "sits", "rests", "leaning"):
        lex[w] = PosTag.VERB
    for w in ("at", "on", "in", "of", "to", "against", "beside"):
        lex[w] = PosTag.ADP
    for w in SPATIAL_HEADS:
        lex[w] = PosTag.SPATIAL
    return lex


POS_LEXICON: Mapping[str, PosTag] = _build_lexicon()


def tag_tokens(tokens: Sequence[str], lexicon: Mapping[str, PosTag] = POS_LEXICON) -> List[PosTag]:
    return [lexicon.get(t, PosTag.OTHER) for t in tokens]


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique.")
        if self.tokens[:2] != (PAD, UNK):
            raise ValueError(f"vocabulary must start with {PAD!r}, {UNK!r}.")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, tokens: Sequence[str], *, strict: bool = False) -> List[int]:
        ids: List[int] = []
        for t in tokens:
            i = self.index.get(t)
            if i is None:
                if strict:
                    raise DataError(f"token {t!r} is not in the vocabulary")
                i = self.unk_id
            ids.append(i)
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]


def default_vocabulary() -> Vocabulary:
    seen: Dict[str, None] = {PAD: None, UNK: None}
    for group in (SHAPES, COLORS, SIZES, NUMBERS, SPATIAL_HEADS, FUNCTION_WORDS):
        for w in group:
            seen.setdefault(w, None)
    return Vocabulary(tuple(seen))


def detokenize(tokens: Sequence[str]) -> str:
    out = " ".join(tokens)
    return out.replace(" .", ".")


def tokenize(text: str) -> List[str]:
    """Lower-case whitespace split with sentence periods as their own tokens."""
    return text.lower().replace(".", " . ").split()
