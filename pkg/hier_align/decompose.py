"""
Caption hierarchy construction: cleaning, sentence splitting, rule-based phrase
extraction over POS tags, and sampling of K = 1 + K_sent + K_phrase text slots.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from itertools import groupby
from typing import Any, Dict, FrozenSet, Hashable, List, Optional, Sequence, Tuple, TypeVar

from hier_align.errors import DataError
from hier_align.numerics import Rng
from hier_align.vocab import SENTENCE_TERMINATORS, PosTag, detokenize, tag_tokens

Tokens = Tuple[str, ...]
T = TypeVar("T", bound=Hashable)

DEFAULT_STOP_TAGS: FrozenSet[PosTag] = frozenset({PosTag.DET, PosTag.ADP})
MIN_PHRASE_CHARS = 3


class Level(str, Enum):
    CAPTION = "caption"
    SENTENCE = "sentence"
    PHRASE = "phrase"

    @property
    def rank(self) -> int:
        return _LEVEL_RANK[self]


_LEVEL_RANK = {Level.CAPTION: 0, Level.SENTENCE: 1, Level.PHRASE: 2}


@dataclass(frozen=True)
class CaptionHierarchy:
    caption: Tokens
    sentences: Tuple[Tokens, ...]
    phrases: Tuple[Tokens, ...]

    def __post_init__(self) -> None:
        if not self.caption:
            raise DataError("hierarchy caption must not be empty")
        for level, group in ((Level.SENTENCE, self.sentences), (Level.PHRASE, self.phrases)):
            for i, slot in enumerate(group):
                if not slot:
                    raise DataError(f"hierarchy {level.value} slot {i} is empty")

    @property
    def k_sent(self) -> int:
        return len(self.sentences)

    @property
    def k_phrase(self) -> int:
        return len(self.phrases)

    @property
    def K(self) -> int:
        return 1 + self.k_sent + self.k_phrase

    @property
    def level_of(self) -> Tuple[Level, ...]:
        return (Level.CAPTION,) + (Level.SENTENCE,) * self.k_sent + (Level.PHRASE,) * self.k_phrase

    def slots(self) -> List[Tokens]:
        return [self.caption, *self.sentences, *self.phrases]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "caption": list(self.caption),
            "sentences": [list(s) for s in self.sentences],
            "phrases": [list(p) for p in self.phrases],
            "level_of": [lv.value for lv in self.level_of],
            "K": self.K,
        }


def slot_levels(k_sent: int, k_phrase: int) -> Tuple[Level, ...]:
    return (Level.CAPTION,) + (Level.SENTENCE,) * k_sent + (Level.PHRASE,) * k_phrase


# ---------------------------------------------------------------------------
# Cleaning and splitting
# ---------------------------------------------------------------------------


def _collapse_block_repeat(items: List[T]) -> Tuple[List[T], bool]:
    n = len(items)
    for i in range(n):
        for length in range(2, (n - i) // 3 + 1):
            block = items[i : i + length]
            reps = 1
            while items[i + reps * length : i + (reps + 1) * length] == block:
                reps += 1
            if reps >= 3:
                return items[: i + length] + items[i + reps * length :], True
    return items, False


def clean_caption(tokens: Sequence[T]) -> List[T]:
    """
    Collapse consecutive duplicate tokens and any block of >= 2 tokens repeated
    >= 3 times in a row. Runs to a fixpoint, so the result is stable under a
    second pass.
    """
    out = list(tokens)
    while True:
        out = [k for k, _ in groupby(out)]
        out, changed = _collapse_block_repeat(out)
        if not changed:
            return out


def split_sentences(tokens: Sequence[str], terminators: FrozenSet[str] = SENTENCE_TERMINATORS) -> List[Tokens]:
    out: List[Tokens] = []
    cur: List[str] = []
    for t in tokens:
        cur.append(t)
        if t in terminators:
            if any(x not in terminators for x in cur):
                out.append(tuple(cur))
            cur = []
    if cur:
        out.append(tuple(cur))
    return out


# ---------------------------------------------------------------------------
# Phrase extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhraseSpan:
    start: int
    end: int
    kind: str


def _coerce_tags(tags: Sequence[Any]) -> List[PosTag]:
    out: List[PosTag] = []
    for t in tags:
        try:
            out.append(PosTag(t))
        except ValueError as exc:
            raise DataError(f"unknown POS tag {t!r}") from exc
    return out


def _spatial_run(tags: Sequence[PosTag], start: int) -> Optional[int]:
    """End of an ADP DET? SPATIAL+ run beginning at ``start``, or None."""
    n = len(tags)
    if start >= n or tags[start] != PosTag.ADP:
        return None
    q = start + 1
    if q < n and tags[q] == PosTag.DET:
        q += 1
    if q >= n or tags[q] != PosTag.SPATIAL:
        return None
    while q < n and tags[q] == PosTag.SPATIAL:
        q += 1
    return q


def extract_phrase_spans(tokens: Sequence[str], tags: Sequence[Any]) -> List[PhraseSpan]:
    if len(tokens) != len(tags):
        raise DataError(f"got {len(tags)} POS tags for {len(tokens)} tokens")
    pos = _coerce_tags(tags)
    n = len(pos)
    spans: List[PhraseSpan] = []
    absorbed: set = set()

    i = 0
    while i < n:
        j = i
        if pos[j] == PosTag.DET:
            j += 1
        while j < n and pos[j] == PosTag.ADJ:
            j += 1
        k = j
        while k < n and pos[k] == PosTag.NOUN:
            k += 1
        if k == j:
            i += 1
            continue
        end = k
        ext = _spatial_run(pos, k)
        if ext is not None:
            absorbed.add(k)
            end = ext
        spans.append(PhraseSpan(i, end, "noun_chunk"))
        i = end

    for p in range(n - 1):
        if pos[p] == PosTag.VERB and pos[p + 1] == PosTag.ADP:
            spans.append(PhraseSpan(p, p + 2, "action"))

    for p in range(n):
        if p in absorbed:
            continue
        q = _spatial_run(pos, p)
        if q is None:
            continue
        if q < n and tokens[q].lower() == "of":
            q += 1
        spans.append(PhraseSpan(p, q, "spatial"))

    spans.sort(key=lambda s: (s.start, s.end))
    return spans


def extract_phrases(
    tokens: Sequence[str],
    tags: Sequence[Any],
    stop_tags: FrozenSet[PosTag] = DEFAULT_STOP_TAGS,
) -> List[Tokens]:
    pos = _coerce_tags(tags)
    out: List[Tokens] = []
    seen: set = set()
    for span in extract_phrase_spans(tokens, pos):
        phrase = tuple(tokens[span.start : span.end])
        if len(detokenize(phrase)) < MIN_PHRASE_CHARS:
            continue
        if all(t in stop_tags for t in pos[span.start : span.end]):
            continue
        if phrase in seen:
            continue
        seen.add(phrase)
        out.append(phrase)
    return out


def decompose_caption(
    tokens: Sequence[str],
    tags: Optional[Sequence[Any]] = None,
    stop_tags: FrozenSet[PosTag] = DEFAULT_STOP_TAGS,
) -> Tuple[Tokens, List[Tokens], List[Tokens]]:
    """
    Clean a caption and derive its sentence and phrase pools. Without ``tags``
    the static lexicon tags the tokens.
    """
    if tags is None:
        tags = tag_tokens(tokens)
    if len(tags) != len(tokens):
        raise DataError(f"got {len(tags)} POS tags for {len(tokens)} tokens")
    pairs = clean_caption(list(zip(tokens, _coerce_tags(tags))))
    cleaned = tuple(t for t, _ in pairs)
    tag_of = [g for _, g in pairs]

    sentences = split_sentences(cleaned)
    phrases: List[Tokens] = []
    seen: set = set()
    cursor = 0
    for sentence in sentences:
        sent_tags = tag_of[cursor : cursor + len(sentence)]
        cursor += len(sentence)
        for phrase in extract_phrases(sentence, sent_tags, stop_tags):
            if phrase not in seen:
                seen.add(phrase)
                phrases.append(phrase)
    return cleaned, sentences, phrases


# ---------------------------------------------------------------------------
# Slot sampling
# ---------------------------------------------------------------------------


def _sample_slots(pool: Sequence[Tokens], k: int, rng: Rng) -> List[Tokens]:
    if k == 0:
        return []
    if len(pool) >= k:
        return [pool[int(i)] for i in rng.choice(len(pool), size=k, replace=False)]
    # too few: every item once, the remainder drawn with replacement
    picks = list(range(len(pool))) + [int(i) for i in rng.integers(0, len(pool), size=k - len(pool))]
    order = rng.permutation(k)
    return [pool[picks[int(i)]] for i in order]


def assemble_hierarchy(
    caption: Sequence[str],
    sentences: Sequence[Sequence[str]],
    phrases: Sequence[Sequence[str]],
    k_sent: int,
    k_phrase: int,
    rng: Rng,
    counters: Optional[Counter] = None,
) -> CaptionHierarchy:
    if k_sent < 0 or k_phrase < 0:
        raise ValueError(f"k_sent={k_sent} and k_phrase={k_phrase} must be >= 0.")
    cap = tuple(caption)
    if not cap:
        raise DataError("caption must not be empty")
    counters = counters if counters is not None else Counter()

    sent_pool = [tuple(s) for s in sentences if s]
    if k_sent > 0 and not sent_pool:
        counters["sentence_fallbacks"] += 1
        sent_pool = [cap]
    phrase_pool = [tuple(p) for p in phrases if p]
    if k_phrase > 0 and not phrase_pool:
        counters["phrase_fallbacks"] += 1
        phrase_pool = [cap]

    return CaptionHierarchy(
        caption=cap,
        sentences=tuple(_sample_slots(sent_pool, k_sent, rng.child("sentences"))),
        phrases=tuple(_sample_slots(phrase_pool, k_phrase, rng.child("phrases"))),
    )
