import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from hier_align.encoders import ImageTokens
from hier_align.errors import DataError
from hier_align.evaluation import (
    EvalConfig,
    cls_retrieval,
    evaluate_model,
    export_heatmap,
    flatten_report,
    heatmap_pgm,
    heatmap_values,
    read_heatmap_csv,
    recall_at_k,
    recall_from_scores,
    region_feature,
    region_match,
    region_match_accuracy,
    sim_diversity,
    tci_retrieval,
    tci_scores,
    write_eval_report,
)
from hier_align.model import Model, ModelConfig
from hier_align.numerics import Rng, Tensor
from hier_align.toyworld import RegionAnnotation, WorldConfig, generate_dataset
from hier_align.train import TrainConfig
from hier_align.vocab import default_vocabulary

WORLD = WorldConfig(
    grid_size=3,
    objects=2,
    shape_vocab=5,
    color_vocab=5,
    size_vocab=4,
    hard_negatives=4,
    train_count=6,
    val_count=6,
)
TINY = ModelConfig(dim=8, vision_heads=2, vision_layers=1, text_heads=2, pool_heads=2, max_len=48, mlp_ratio=2)


def _model() -> Model:
    return Model(TINY, WORLD, default_vocabulary(), seed=0)


class HierAlignRetrievalTests(unittest.TestCase):
    def test_identity_pairs_recall_one(self) -> None:
        x = Rng(0).normal(size=(6, 4))
        report = recall_at_k(x, x, ks=(1, 5))
        self.assertEqual(report.r_at["i2t"][1], 1.0)
        self.assertEqual(report.r_at["t2i"][1], 1.0)
        self.assertEqual(report.n_queries, 6)

    def test_exact_reversal_recall_zero(self) -> None:
        eye = np.eye(10)
        report = recall_at_k(eye, eye[::-1], ks=(1,))
        self.assertEqual(report.r_at["i2t"][1], 0.0)
        self.assertEqual(report.r_at["t2i"][1], 0.0)

    def test_ties_break_toward_lower_index(self) -> None:
        scores = np.ones((3, 3))
        report = recall_from_scores(scores, ks=(1, 2))
        # only query 0 sits first among equals
        self.assertAlmostEqual(report.r_at["i2t"][1], 1.0 / 3.0)
        self.assertAlmostEqual(report.r_at["i2t"][2], 2.0 / 3.0)

    def test_recall_is_monotone_in_k(self) -> None:
        rng = Rng(1)
        report = recall_at_k(rng.normal(size=(30, 8)), rng.normal(size=(30, 8)), ks=(1, 5, 10, 30))
        for direction in ("i2t", "t2i"):
            values = [report.r_at[direction][k] for k in (1, 5, 10, 30)]
            self.assertEqual(values, sorted(values))
            self.assertEqual(values[-1], 1.0)

    def test_recall_is_rotation_invariant(self) -> None:
        rng = Rng(2)
        images = rng.normal(size=(20, 6))
        texts = images + 0.8 * rng.normal(size=(20, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        a = recall_at_k(images, texts, ks=(1, 5))
        b = recall_at_k(images @ q, texts @ q, ks=(1, 5))
        self.assertEqual(a.r_at, b.r_at)

    def test_random_embeddings_sit_near_chance(self) -> None:
        values = [
            recall_at_k(Rng(s).normal(size=(100, 16)), Rng(s + 100).normal(size=(100, 16)), ks=(1,)).r_at["i2t"][1]
            for s in range(5)
        ]
        self.assertLess(abs(float(np.mean(values)) - 0.01), 0.02)

    def test_recall_errors(self) -> None:
        with self.assertRaises(DataError):
            recall_at_k(np.zeros((0, 3)), np.zeros((0, 3)))
        with self.assertRaisesRegex(DataError, "zero norm"):
            recall_at_k(np.asarray([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))

    def test_report_to_dict_uses_string_keys(self) -> None:
        out = recall_at_k(np.eye(3), np.eye(3), ks=(1,)).to_dict()
        self.assertEqual(out["r_at"]["i2t"], {"1": 1.0})


class HierAlignDiversityTests(unittest.TestCase):
    def test_closed_forms(self) -> None:
        e = np.asarray([1.0, 2.0, 0.0])
        self.assertAlmostEqual(sim_diversity(np.stack([e, e, 3 * e])), 1.0)
        self.assertAlmostEqual(sim_diversity(np.eye(2)), 0.0)
        alternating = np.stack([e, -e, e, -e])
        self.assertAlmostEqual(sim_diversity(alternating), -1.0 / 3.0)

    def test_batched_and_listed_inputs_average_per_image(self) -> None:
        same = np.ones((2, 3))
        ortho = np.eye(2, 3)
        self.assertAlmostEqual(sim_diversity([same, ortho]), 0.5)
        self.assertAlmostEqual(sim_diversity(np.stack([same, ortho])), 0.5)

    def test_needs_two_features(self) -> None:
        with self.assertRaises(DataError):
            sim_diversity(np.ones((1, 3)))


class HierAlignRegionTests(unittest.TestCase):
    def setUp(self) -> None:
        self.model = _model()
        self.examples = generate_dataset(0, 6, WORLD)

    def test_single_cell_region_feature_is_that_patch(self) -> None:
        patches = Rng(3).normal(size=(9, 4))
        feature = region_feature(patches, RegionAnnotation(box=(1, 2, 1, 2), phrase_index=0), 3)
        np.testing.assert_array_equal(feature, patches[5])
        box = region_feature(patches, RegionAnnotation(box=(0, 0, 1, 1), phrase_index=0), 3)
        np.testing.assert_allclose(box, patches[[0, 1, 3, 4]].mean(axis=0))

    def test_region_match_rejects_positive_among_negatives(self) -> None:
        image = ImageTokens(cls=Tensor(np.zeros((1, 8))), patches=Tensor(Rng(4).normal(size=(1, 9, 8))))
        positive = ("small", "red", "circle")
        with self.assertRaisesRegex(DataError, "also appears"):
            region_match(
                image,
                RegionAnnotation(box=(0, 0, 0, 0), phrase_index=0),
                [positive, ("large", "red", "circle"), positive],
                self.model.text,
                self.model.vocab,
            )

    def test_region_match_rank_is_within_candidates(self) -> None:
        ex = self.examples[0]
        image = ImageTokens(cls=Tensor(np.zeros((1, 8))), patches=Tensor(Rng(4).normal(size=(1, 9, 8))))
        ann = ex.annotations[0]
        candidates = [ex.captions.phrases[ann.phrase_index], *ex.captions.hard_negatives[0]]
        rank = region_match(image, ann, candidates, self.model.text, self.model.vocab)
        self.assertGreaterEqual(rank, 0)
        self.assertLess(rank, len(candidates))

    def test_region_match_accuracy_counts_every_region(self) -> None:
        acc, n = region_match_accuracy(self.model, self.examples)
        self.assertEqual(n, 6 * WORLD.objects)
        self.assertGreaterEqual(acc, 0.0)
        self.assertLessEqual(acc, 1.0)

    def test_tci_scores_are_square_and_deterministic(self) -> None:
        a = tci_scores(self.model, self.examples)
        b = tci_scores(self.model, self.examples)
        self.assertEqual(a.shape, (6, 6))
        np.testing.assert_array_equal(a, b)
        self.assertEqual(tci_retrieval(self.model, self.examples, ks=(1,)).n_queries, 6)
        self.assertEqual(cls_retrieval(self.model, self.examples, ks=(1,)).n_queries, 6)

    def test_evaluate_model_report(self) -> None:
        cfg = TrainConfig(k_sent=2, micro_batch=2)
        report = evaluate_model(self.model, self.examples, cfg, EvalConfig(ks=(1, 5), tci=True, max_images=4))
        self.assertEqual(report["n_images"], 4)
        self.assertEqual(report["region_match"]["regions"], 4 * WORLD.objects)
        self.assertEqual(report["phrase_grounding"]["phrases"], 4 * WORLD.objects)
        self.assertIn("tci_retrieval", report)
        self.assertGreaterEqual(report["sim_diversity"], -1.0)
        flat = flatten_report(report)
        self.assertIn("retrieval/cls/i2t@1", flat)
        self.assertIn("retrieval/tci/t2i@5", flat)
        self.assertIn("region_match/top1", flat)

        single = evaluate_model(self.model, self.examples, TrainConfig(k_sent=0), EvalConfig())
        self.assertNotIn("sim_diversity", single)
        self.assertNotIn("tci_retrieval", single)

    def test_write_eval_report(self) -> None:
        report = {"n_images": 1, "region_match": {"top1": 0.5, "regions": 2}}
        with tempfile.TemporaryDirectory() as td:
            json_path = Path(td) / "eval.json"
            csv_path = Path(td) / "eval.csv"
            write_eval_report(json_path, csv_path, report, {"seed": 1}, {"host": "h"})
            saved = json.loads(json_path.read_text(encoding="utf-8"))
            self.assertEqual(saved["report"], report)
            self.assertEqual(saved["meta"], {"host": "h"})
            lines = csv_path.read_text(encoding="utf-8").splitlines()
            self.assertEqual(lines[1:], ["metric,value", "region_match/top1,0.500000"])

    def test_eval_config_validation(self) -> None:
        self.assertEqual(EvalConfig(ks=(5, 1, 5)).ks, (1, 5))
        with self.assertRaises(ValueError):
            EvalConfig(ks=(0,))


class HierAlignHeatmapTests(unittest.TestCase):
    def test_orthogonal_text_gives_zero_map(self) -> None:
        patches = np.zeros((4, 3))
        patches[:, 0] = np.arange(1, 5)
        values = heatmap_values(patches, np.asarray([0.0, 1.0, 0.0]), scale=10.0)
        np.testing.assert_array_equal(values, np.zeros((2, 2)))

    def test_matching_patch_is_the_unique_maximum(self) -> None:
        patches = np.eye(9) * 0.1 + Rng(5).normal(size=(9, 9)) * 0.01
        text = np.zeros(9)
        text[7] = 1.0
        patches[7] = text * 3.0
        values = heatmap_values(patches, text)
        self.assertEqual(int(np.argmax(values)), 7)
        self.assertEqual(int((values == values.max()).sum()), 1)

    def test_zero_text_raises(self) -> None:
        with self.assertRaises(DataError):
            heatmap_values(np.ones((4, 2)), np.zeros(2))

    def test_export_round_trip(self) -> None:
        rng = Rng(6)
        image = ImageTokens(cls=Tensor(np.zeros((2, 4))), patches=Tensor(rng.normal(size=(2, 9, 4))))
        text = rng.normal(size=4)
        with tempfile.TemporaryDirectory() as td:
            csv_path = Path(td) / "h.csv"
            pgm_path = Path(td) / "h.pgm"
            values = export_heatmap(image, text, csv_path, index=1, scale=2.0, pgm_path=pgm_path, header="query")
            self.assertTrue(csv_path.read_text(encoding="utf-8").startswith("# query\n"))
            np.testing.assert_allclose(read_heatmap_csv(csv_path), values, atol=1e-6)
            self.assertTrue(np.all(np.abs(values) <= 2.0 + 1e-9))
            blob = pgm_path.read_bytes()
            self.assertTrue(blob.startswith(b"P5\n3 3\n255\n"))
            pixels = np.frombuffer(blob[len(b"P5\n3 3\n255\n") :], dtype=np.uint8)
            self.assertEqual(pixels.size, 9)
            self.assertEqual((int(pixels.min()), int(pixels.max())), (0, 255))

    def test_flat_map_pgm_is_black(self) -> None:
        blob = heatmap_pgm(np.full((2, 2), 0.3))
        self.assertEqual(blob[-4:], b"\x00\x00\x00\x00")


if __name__ == "__main__":
    unittest.main()
