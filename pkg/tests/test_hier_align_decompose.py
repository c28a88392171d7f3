import unittest
from collections import Counter

from hier_align.decompose import (
    CaptionHierarchy,
    Level,
    assemble_hierarchy,
    clean_caption,
    decompose_caption,
    extract_phrases,
    slot_levels,
    split_sentences,
)
from hier_align.errors import DataError
from hier_align.numerics import Rng
from hier_align.vocab import tokenize

SENTS = [("s1", "."), ("s2", "."), ("s3", ".")]


class HierAlignDecomposeTests(unittest.TestCase):
    def test_clean_caption_collapses_repeats(self) -> None:
        self.assertEqual(clean_caption(["very", "very", "good"]), ["very", "good"])
        self.assertEqual(clean_caption(list("abababc")), list("abc"))
        self.assertEqual(clean_caption(list("abcd")), list("abcd"))
        # two repeats of a block are kept
        self.assertEqual(clean_caption(list("ababc")), list("ababc"))

    def test_clean_caption_is_idempotent(self) -> None:
        samples = [
            list("aaabcbcbcbcdd"),
            list("xyxyxyzzzxyxyxy"),
            ["a", "b", "a", "a", "b", "a", "b", "a", "b"],
            list("abcabcabcab"),
        ]
        for tokens in samples:
            once = clean_caption(tokens)
            self.assertEqual(clean_caption(once), once)

    def test_split_sentences(self) -> None:
        self.assertEqual(
            split_sentences(["a", "dog", "runs", ".", "it", "barks", "."]),
            [("a", "dog", "runs", "."), ("it", "barks", ".")],
        )
        self.assertEqual(split_sentences(["no", "stop"]), [("no", "stop")])
        self.assertEqual(split_sentences([".", "x", "."]), [("x", ".")])
        self.assertEqual(split_sentences([]), [])

    def test_noun_chunk_absorbs_spatial_run(self) -> None:
        tokens = ["the", "red", "cube", "on", "the", "left"]
        tags = ["DET", "ADJ", "NOUN", "ADP", "DET", "SPATIAL"]
        self.assertEqual(extract_phrases(tokens, tags), [tuple(tokens)])

    def test_action_phrase(self) -> None:
        self.assertEqual(
            extract_phrases(["leaning", "against"], ["VERB", "ADP"]),
            [("leaning", "against")],
        )

    def test_spatial_relation_takes_trailing_of(self) -> None:
        tokens = ["sits", "to", "the", "left", "of", "it"]
        tags = ["VERB", "ADP", "DET", "SPATIAL", "ADP", "OTHER"]
        phrases = extract_phrases(tokens, tags)
        self.assertIn(("sits", "to"), phrases)
        self.assertIn(("to", "the", "left", "of"), phrases)

    def test_stop_only_and_short_phrases_are_dropped(self) -> None:
        self.assertEqual(extract_phrases(["the", "a", "the"], ["DET", "DET", "DET"]), [])
        # "ox" is shorter than three characters
        self.assertEqual(extract_phrases(["ox"], ["NOUN"]), [])

    def test_phrases_are_contiguous_subsequences(self) -> None:
        tokens = tokenize(
            "a small red circle at the top and on the left. "
            "a large blue square sits at the bottom on the right."
        )
        _, sentences, phrases = decompose_caption(tokens)
        self.assertEqual(len(sentences), 2)
        for phrase in phrases:
            n = len(phrase)
            self.assertTrue(
                any(tuple(tokens[i : i + n]) == phrase for i in range(len(tokens) - n + 1)),
                phrase,
            )
        self.assertIn(("a", "small", "red", "circle", "at", "the", "top"), phrases)
        self.assertIn(("sits", "at"), phrases)
        self.assertIn(("on", "the", "right"), phrases)

    def test_misaligned_tags_raise(self) -> None:
        with self.assertRaises(DataError):
            extract_phrases(["a", "b"], ["DET"])
        with self.assertRaises(DataError):
            decompose_caption(["a", "b"], ["DET"])
        with self.assertRaises(DataError):
            extract_phrases(["a"], ["BOGUS"])

    def test_decompose_cleans_before_splitting(self) -> None:
        cleaned, sentences, _ = decompose_caption(["a", "a", "red", "circle", ".", "."])
        self.assertEqual(cleaned, ("a", "red", "circle", "."))
        self.assertEqual(sentences, [("a", "red", "circle", ".")])

    def test_assemble_hierarchy_slot_counts(self) -> None:
        phrases = [(f"p{i}",) for i in range(40)]
        h = assemble_hierarchy(("cap",), SENTS * 2, phrases, 5, 0, Rng(0))
        self.assertEqual(h.K, 6)
        h = assemble_hierarchy(("cap",), SENTS * 2, phrases, 5, 30, Rng(0))
        self.assertEqual(h.K, 36)
        self.assertEqual(h.slots()[0], ("cap",))
        self.assertEqual(h.level_of, slot_levels(5, 30))
        self.assertEqual(len(set(h.phrases)), 30)

    def test_sampling_without_replacement_has_no_duplicates(self) -> None:
        sentences = [(f"s{i}", ".") for i in range(8)]
        for seed in range(20):
            h = assemble_hierarchy(("cap",), sentences, [], 5, 0, Rng(seed))
            self.assertEqual(len(set(h.sentences)), 5)

    def test_too_few_sentences_sample_with_replacement_covering_all(self) -> None:
        for seed in range(20):
            h = assemble_hierarchy(("cap",), SENTS, [], 5, 0, Rng(seed))
            self.assertEqual(h.k_sent, 5)
            self.assertEqual(set(h.sentences), set(SENTS))

    def test_missing_pools_fall_back_to_caption(self) -> None:
        counters: Counter = Counter()
        h = assemble_hierarchy(("cap", "."), [], [], 2, 1, Rng(0), counters)
        self.assertEqual(h.sentences, (("cap", "."), ("cap", ".")))
        self.assertEqual(h.phrases, (("cap", "."),))
        self.assertEqual(counters["sentence_fallbacks"], 1)
        self.assertEqual(counters["phrase_fallbacks"], 1)

    def test_assemble_is_seed_deterministic(self) -> None:
        sentences = [(f"s{i}", ".") for i in range(8)]
        a = assemble_hierarchy(("cap",), sentences, [], 4, 0, Rng(3, ("h", 1)))
        b = assemble_hierarchy(("cap",), sentences, [], 4, 0, Rng(3, ("h", 1)))
        self.assertEqual(a, b)

    def test_assemble_rejects_bad_input(self) -> None:
        with self.assertRaises(ValueError):
            assemble_hierarchy(("cap",), SENTS, [], -1, 0, Rng(0))
        with self.assertRaises(DataError):
            assemble_hierarchy((), SENTS, [], 1, 0, Rng(0))
        with self.assertRaises(DataError):
            CaptionHierarchy(caption=("c",), sentences=((),), phrases=())

    def test_hierarchy_to_dict(self) -> None:
        h = CaptionHierarchy(caption=("c",), sentences=(("s",),), phrases=(("p",),))
        out = h.to_dict()
        self.assertEqual(out["K"], 3)
        self.assertEqual(out["level_of"], ["caption", "sentence", "phrase"])
        self.assertEqual(Level.PHRASE.rank, 2)


if __name__ == "__main__":
    unittest.main()
