import math
import unittest
from collections import Counter
from typing import Tuple

import numpy as np

from hier_align import numerics as nx
from hier_align.decompose import Level
from hier_align.errors import DimensionError, NonFiniteError
from hier_align.loss import (
    INIT_LOG_SCALE,
    MAX_LOGIT_SCALE,
    Calibration,
    ConditionedNegatives,
    DistanceKind,
    LossMode,
    SimilarityBlock,
    alignment_loss,
    augment_conditioned_negatives,
    bce_loss,
    build_bce_targets,
    build_ce_targets,
    build_similarity,
    build_targets,
    ce_loss,
    diag_fraction,
    extend_targets,
    global_loss,
    info_nce,
    total_loss,
)
from hier_align.numerics import Param, Rng, Tensor
from hier_align.pooling import PoolBlock

BETAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _logits(S: np.ndarray, B: int, K: int) -> SimilarityBlock:
    return SimilarityBlock.from_logits(Tensor(S, dtype=np.float64), B, K)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class HierAlignLossTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = Rng(8, ("loss-test",))

    def test_target_matrix_suite(self) -> None:
        for trial in range(50):
            r = self.rng.child("targets", trial)
            B = int(r.integers(1, 5))
            K = int(r.integers(1, 9))
            beta = BETAS[int(r.integers(0, len(BETAS)))]
            ce = build_ce_targets(B, K, beta)
            np.testing.assert_allclose(ce.p.sum(axis=1), 1.0, atol=1e-9)
            expected = 1.0 / (1.0 + (K - 1) * beta)
            for i in range(B * K):
                self.assertEqual(ce.p[i, i], expected)
            self.assertEqual(diag_fraction(K, beta), expected)

            bce = build_bce_targets(B, K, beta)
            for i in range(B * K):
                for j in range(B * K):
                    same = i // K == j // K
                    self.assertEqual(bce.y[i, j], 1.0 if same else 0.0)
                    want_w = 1.0 if (i == j or not same) else beta
                    self.assertEqual(bce.w[i, j], want_w)

    def test_ce_targets_zero_across_images(self) -> None:
        tgt = build_ce_targets(3, 2, 0.5)
        self.assertEqual(tgt.p[0, 2], 0.0)
        self.assertAlmostEqual(tgt.p[0, 1], 0.5 / 1.5, places=12)

    def test_ce_at_beta_zero_matches_info_nce(self) -> None:
        for trial in range(20):
            r = self.rng.child("infonce", trial)
            B = int(r.integers(1, 4))
            K = int(r.integers(1, 4))
            n = B * K
            S = r.normal(size=(n, n)) * 3.0
            got = ce_loss(_logits(S, B, K), build_ce_targets(B, K, 0.0)).l_beta_cal
            want = -0.5 * (np.mean(np.diag(_log_softmax(S))) + np.mean(np.diag(_log_softmax(S.T))))
            self.assertAlmostEqual(got, want, delta=1e-9)
            self.assertAlmostEqual(info_nce(Tensor(S, dtype=np.float64)).item(), want, delta=1e-9)

    def test_bce_single_pair_matches_sigmoid_bce(self) -> None:
        for x in (-4.0, -0.3, 0.0, 1.7, 9.0):
            got = bce_loss(_logits(np.asarray([[x]]), 1, 1), build_bce_targets(1, 1, 0.5)).l_beta_cal
            want = -math.log(1.0 / (1.0 + math.exp(-x)))
            self.assertAlmostEqual(got, want, delta=1e-9)

    def test_closed_form_values_at_zero_logits(self) -> None:
        zeros = np.zeros((2, 2))
        for beta in BETAS:
            ce = ce_loss(_logits(zeros, 1, 2), build_ce_targets(1, 2, beta))
            self.assertAlmostEqual(ce.l_beta_cal, math.log(2.0), delta=1e-9)
        bce = bce_loss(_logits(zeros, 1, 2), build_bce_targets(1, 2, 1.0))
        self.assertAlmostEqual(bce.l_beta_cal, 2.0 * math.log(2.0), delta=1e-9)

    def test_distance_calibration_weights(self) -> None:
        cal = Calibration(lam=0.05, distance=DistanceKind.INDEX)
        tgt = build_ce_targets(1, 4, 0.75, cal)
        self.assertEqual(tgt.w[0, 0], 1.0)
        for d, want in ((1, 0.71), (2, 0.68), (3, 0.65)):
            self.assertAlmostEqual(tgt.w[0, d], want, delta=0.005)
            self.assertAlmostEqual(tgt.w[d, 0], want, delta=0.005)
        np.testing.assert_allclose(tgt.p.sum(axis=1), 1.0, atol=1e-12)

    def test_level_distance_uses_level_ranks(self) -> None:
        cal = Calibration(lam=0.5, distance=DistanceKind.LEVEL)
        levels = (Level.CAPTION, Level.SENTENCE, Level.SENTENCE, Level.PHRASE)
        tgt = build_bce_targets(1, 4, 1.0, cal, levels)
        self.assertAlmostEqual(tgt.w[1, 2], 1.0, places=12)
        self.assertAlmostEqual(tgt.w[0, 1], math.exp(-0.5), places=12)
        self.assertAlmostEqual(tgt.w[0, 3], math.exp(-1.0), places=12)

    def test_lambda_zero_calibration_equals_uncalibrated(self) -> None:
        plain = build_ce_targets(2, 3, 0.5)
        flat = build_ce_targets(2, 3, 0.5, Calibration(lam=0.0))
        np.testing.assert_array_equal(plain.p, flat.p)

    def test_beta_one_ce_is_uniform_within_image(self) -> None:
        tgt = build_ce_targets(2, 4, 1.0)
        np.testing.assert_allclose(tgt.p[:4, :4], 0.25)
        self.assertEqual(float(tgt.p[:4, 4:].sum()), 0.0)

    def test_invalid_target_arguments(self) -> None:
        with self.assertRaises(ValueError):
            build_targets(LossMode.CE, 1, 2, 1.5)
        with self.assertRaises(ValueError):
            build_targets(LossMode.BCE, 0, 2, 0.5)
        with self.assertRaises(ValueError):
            Calibration(lam=-0.1)
        with self.assertRaises(ValueError):
            ce_loss(_logits(np.zeros((2, 2)), 1, 2), build_bce_targets(1, 2, 0.5))
        with self.assertRaises(DimensionError):
            ce_loss(_logits(np.zeros((3, 3)), 1, 3), build_ce_targets(1, 2, 0.5))

    def test_extend_targets(self) -> None:
        sources = [1, 0, 1]
        ce = extend_targets(build_ce_targets(2, 2, 0.5), sources)
        self.assertEqual(ce.size, 7)
        np.testing.assert_allclose(ce.p[:4].sum(axis=1), 1.0)
        self.assertEqual(float(ce.p[4:].sum()), 0.0)
        self.assertEqual(float(ce.p[:, 4:].sum()), 0.0)
        self.assertFalse(ce.mask[2, 4] or ce.mask[3, 4] or ce.mask[4, 2] or ce.mask[4, 3])
        self.assertTrue(ce.mask[0, 4] and ce.mask[4, 0] and ce.mask[4, 5])

        bce = extend_targets(build_bce_targets(2, 2, 0.5), sources)
        self.assertEqual(float(bce.y[4:].sum() + bce.y[:, 4:].sum()), 0.0)
        np.testing.assert_array_equal(bce.w[4, :4], [1.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(bce.w[:4, 5], [0.0, 0.0, 1.0, 1.0])
        self.assertTrue(np.all(bce.w[4:, 4:] == 1.0))
        self.assertEqual(bce.w[0, 1], 0.5)

        plain = build_ce_targets(2, 2, 0.5)
        self.assertIs(extend_targets(plain, []), plain)
        with self.assertRaises(ValueError):
            extend_targets(plain, [2])

    def test_loss_gradients_in_both_modes(self) -> None:
        B, K = 2, 3
        cal = Calibration(lam=0.3)
        for mode in (LossMode.CE, LossMode.BCE):
            for calibration in (None, cal):
                S = Param(Tensor(self.rng.normal(size=(B * K, B * K)) * 2.0, dtype=np.float64), "S")
                tgt = build_targets(mode, B, K, 0.5, calibration)

                def f() -> Tensor:
                    return alignment_loss(SimilarityBlock.from_logits(S.value, B, K), tgt).objective

                self.assertLess(nx.grad_check(f, [S]), 1e-7, (mode, calibration))

    def test_build_similarity_scales_cosines(self) -> None:
        V = self.rng.normal(size=(2, 3, 4))
        T = self.rng.normal(size=(2, 3, 4))
        log_scale = Tensor(np.asarray(INIT_LOG_SCALE), dtype=np.float64)
        sim = build_similarity(Tensor(V), Tensor(T), log_scale)
        self.assertEqual(sim.S.shape, (6, 6))
        self.assertEqual((sim.B, sim.K), (2, 3))
        v = V.reshape(6, 4) / np.linalg.norm(V.reshape(6, 4), axis=1, keepdims=True)
        t = T.reshape(6, 4) / np.linalg.norm(T.reshape(6, 4), axis=1, keepdims=True)
        np.testing.assert_allclose(sim.S.data, (v @ t.T) / 0.07, rtol=1e-9)

    def test_logit_scale_is_capped(self) -> None:
        V = self.rng.normal(size=(1, 2, 4))
        log_scale = Param(Tensor(np.asarray(math.log(1000.0)), dtype=np.float64), "log_scale")
        sim = build_similarity(Tensor(V), Tensor(V), log_scale.value)
        self.assertAlmostEqual(sim.scale, MAX_LOGIT_SCALE)
        np.testing.assert_allclose(np.diag(sim.S.data), MAX_LOGIT_SCALE)
        report = ce_loss(sim, build_ce_targets(1, 2, 0.5))
        report.objective.backward()
        self.assertEqual(float(log_scale.grad), 0.0)

    def test_build_similarity_requires_k_for_flat_inputs(self) -> None:
        flat = Tensor(self.rng.normal(size=(6, 4)))
        with self.assertRaises(DimensionError):
            build_similarity(flat, flat, Tensor(np.asarray(0.0)))
        sim = build_similarity(flat, flat, Tensor(np.asarray(0.0)), K=3)
        self.assertEqual(sim.B, 2)

    def test_global_loss_is_symmetric_info_nce(self) -> None:
        cls = self.rng.normal(size=(3, 4))
        cap = self.rng.normal(size=(3, 4))
        zero = Tensor(np.asarray(0.0), dtype=np.float64)
        got = global_loss(Tensor(cls), Tensor(cap), zero).item()
        u = cls / np.linalg.norm(cls, axis=1, keepdims=True)
        w = cap / np.linalg.norm(cap, axis=1, keepdims=True)
        logits = u @ w.T
        want = -0.5 * (np.mean(np.diag(_log_softmax(logits))) + np.mean(np.diag(_log_softmax(logits.T))))
        self.assertAlmostEqual(got, want, delta=1e-9)
        with self.assertRaises(DimensionError):
            global_loss(Tensor(cls), Tensor(cap[:2]), zero)

    def test_total_loss_combines_terms(self) -> None:
        report = ce_loss(_logits(np.zeros((2, 2)), 1, 2), build_ce_targets(1, 2, 0.5))
        counters: Counter = Counter({"truncated_slots": 2})
        out = total_loss(report, 0.25, counters)
        self.assertAlmostEqual(out.l_total, math.log(2.0) + 0.25, delta=1e-12)
        self.assertEqual(out.l_global, 0.25)
        self.assertEqual(out.counters["truncated_slots"], 2)
        self.assertAlmostEqual(out.objective.item(), out.l_total, delta=1e-12)
        self.assertEqual(total_loss(1.0, 0.5).l_total, 1.5)
        self.assertEqual(total_loss(1.0).l_total, 1.0)
        with self.assertRaises(NonFiniteError):
            total_loss(float("nan"))

    def test_report_fields(self) -> None:
        report = ce_loss(_logits(np.zeros((4, 4)), 2, 2), build_ce_targets(2, 2, 0.5))
        self.assertAlmostEqual(report.f_diag, 1.0 / 1.5)
        self.assertAlmostEqual(report.l_beta_cal, 0.5 * (report.l_v2t + report.l_t2v))
        self.assertIn("l_total", report.to_dict())

    def test_conditioned_negatives(self) -> None:
        B, K, N, D = 3, 3, 4, 8
        block = PoolBlock(D, 2, Rng(1), dtype=np.float64)
        patches = Tensor(self.rng.normal(size=(B, N, D)))
        texts = Tensor(self.rng.normal(size=(B, K, D)))
        levels = (Level.CAPTION, Level.SENTENCE, Level.SENTENCE)
        neg = augment_conditioned_negatives(patches, texts, levels, [Level.SENTENCE], block, Rng(2))
        self.assertEqual(neg.count, B)
        self.assertEqual(neg.owners, (0, 1, 2))
        for owner, (source, slot) in zip(neg.owners, neg.sources):
            self.assertNotEqual(owner, source)
            self.assertIn(slot, (1, 2))
            self.assertTrue(np.array_equal(neg.T.data[owner], texts.data[source, slot]))
        self.assertEqual(neg.V.shape, (B, D))

        pooled = block(texts, patches)
        sim = build_similarity(pooled, texts, Tensor(np.asarray(0.0), dtype=np.float64), levels=levels, negatives=neg)
        self.assertEqual(sim.S.shape, (B * K + B, B * K + B))
        self.assertTrue(all(m.conditioned for m in sim.row_meta[B * K :]))
        tgt = extend_targets(build_ce_targets(B, K, 0.5, levels=levels), [src for src, _ in neg.sources])
        self.assertTrue(math.isfinite(alignment_loss(sim, tgt).l_total))

    def test_conditioned_negatives_validation(self) -> None:
        block = PoolBlock(8, 2, Rng(1), dtype=np.float64)
        patches = Tensor(self.rng.normal(size=(1, 4, 8)))
        texts = Tensor(self.rng.normal(size=(1, 2, 8)))
        levels = (Level.CAPTION, Level.SENTENCE)
        with self.assertRaises(ValueError):
            augment_conditioned_negatives(patches, texts, levels, [Level.SENTENCE], block, Rng(0))
        two_p = Tensor(self.rng.normal(size=(2, 4, 8)))
        two_t = Tensor(self.rng.normal(size=(2, 2, 8)))
        with self.assertRaises(ValueError):
            augment_conditioned_negatives(two_p, two_t, levels, [Level.PHRASE], block, Rng(0))
        empty = augment_conditioned_negatives(two_p, two_t, levels, [], block, Rng(0))
        self.assertEqual(empty.count, 0)

    def _conditioned_setup(self, B: int, K: int) -> Tuple[SimilarityBlock, ConditionedNegatives, Tuple[Level, ...]]:
        N, D = 4, 8
        block = PoolBlock(D, 2, Rng(1), dtype=np.float64)
        patches = Tensor(self.rng.normal(size=(B, N, D)))
        texts = Tensor(self.rng.normal(size=(B, K, D)))
        levels = (Level.CAPTION,) + (Level.SENTENCE,) * (K - 1)
        neg = augment_conditioned_negatives(
            patches, texts, levels, [Level.CAPTION, Level.SENTENCE], block, Rng(4)
        )
        pooled = block(texts, patches)
        log_scale = Tensor(np.asarray(0.0), dtype=np.float64)
        sim = build_similarity(pooled, texts, log_scale, levels=levels, negatives=neg)
        return sim, neg, levels

    def test_conditioned_columns_never_repeat_a_positive(self) -> None:
        B, K = 3, 3
        n = B * K
        sim, neg, levels = self._conditioned_setup(B, K)
        S = sim.S.data
        sources = [src for src, _ in neg.sources]
        for mode in (LossMode.CE, LossMode.BCE):
            tgt = extend_targets(build_targets(mode, B, K, 0.5, levels=levels), sources)
            positive = tgt.p if mode == LossMode.CE else tgt.y
            for e, (src, slot) in enumerate(neg.sources):
                col, twin = n + e, src * K + slot
                np.testing.assert_allclose(S[:n, col], S[:n, twin], atol=1e-12)
                for i in range(n):
                    if positive[i, twin] > 0:
                        self.assertFalse(tgt.mask[i, col], (mode, i, col))
                        if mode == LossMode.BCE:
                            self.assertEqual(tgt.w[i, col], 0.0)
                for j in range(src * K, (src + 1) * K):
                    self.assertFalse(tgt.mask[col, j])

    def test_separated_logits_with_conditioned_negative_reach_zero_loss(self) -> None:
        # B=2, K=1; the extra slot is owned by image 0 and borrows image 1's text,
        # so column 2 repeats column 1 and S[2, 1] == S[2, 2].
        ce_S = np.asarray([[50.0, 0.0, 0.0], [0.0, 50.0, 50.0], [0.0, 0.0, 0.0]])
        ce = ce_loss(_logits(ce_S, 2, 1), extend_targets(build_ce_targets(2, 1, 0.0), [1]))
        self.assertLess(ce.l_beta_cal, 1e-6)

        bce_S = np.asarray([[50.0, -50.0, -50.0], [-50.0, 50.0, 50.0], [-50.0, -50.0, -50.0]])
        bce = bce_loss(_logits(bce_S, 2, 1), extend_targets(build_bce_targets(2, 1, 0.0), [1]))
        self.assertLess(bce.l_beta_cal, 1e-6)

    def test_conditioned_gradients_respect_the_mask(self) -> None:
        B, K = 2, 2
        for mode in (LossMode.CE, LossMode.BCE):
            S = Param(Tensor(self.rng.normal(size=(B * K + 2, B * K + 2)) * 2.0, dtype=np.float64), "S")
            tgt = extend_targets(build_targets(mode, B, K, 0.5), [1, 0])

            def f() -> Tensor:
                return alignment_loss(SimilarityBlock.from_logits(S.value, B, K), tgt).objective

            self.assertLess(nx.grad_check(f, [S]), 1e-7, mode)
            f().backward()
            self.assertTrue(np.all(S.grad[~tgt.mask] == 0.0), mode)

    def test_augmentation_adds_negatives_and_keeps_positives(self) -> None:
        B, K = 3, 3
        n = B * K
        _, neg, levels = self._conditioned_setup(B, K)
        sources = [src for src, _ in neg.sources]
        for mode in (LossMode.CE, LossMode.BCE):
            plain = build_targets(mode, B, K, 0.5, levels=levels)
            grown = extend_targets(plain, sources)
            if mode == LossMode.CE:
                before_pos, after_pos = plain.p > 0, grown.p > 0
                before_neg = int((plain.p == 0).sum())
                after_neg = int(((grown.p == 0) & grown.mask).sum())
            else:
                before_pos, after_pos = (plain.y == 1) & (plain.w > 0), (grown.y == 1) & (grown.w > 0)
                before_neg = int(((plain.y == 0) & (plain.w > 0)).sum())
                after_neg = int(((grown.y == 0) & (grown.w > 0)).sum())
            np.testing.assert_array_equal(after_pos[:n, :n], before_pos)
            self.assertFalse(after_pos[n:].any() or after_pos[:, n:].any())
            self.assertGreater(after_neg, before_neg, mode)
        self.assertEqual(neg.count, 2 * B)

    def test_disabled_levels_reproduce_the_plain_loss(self) -> None:
        B, K, N, D = 3, 2, 4, 8
        block = PoolBlock(D, 2, Rng(1), dtype=np.float64)
        patches = Tensor(self.rng.normal(size=(B, N, D)))
        texts = Tensor(self.rng.normal(size=(B, K, D)))
        levels = (Level.CAPTION, Level.SENTENCE)
        log_scale = Tensor(np.asarray(INIT_LOG_SCALE), dtype=np.float64)
        pooled = block(texts, patches)
        empty = augment_conditioned_negatives(patches, texts, levels, [], block, Rng(0))
        for mode in (LossMode.CE, LossMode.BCE):
            tgt = build_targets(mode, B, K, 0.5, levels=levels)
            plain = alignment_loss(build_similarity(pooled, texts, log_scale, levels=levels), tgt)
            off = alignment_loss(
                build_similarity(pooled, texts, log_scale, levels=levels, negatives=empty),
                extend_targets(tgt, [src for src, _ in empty.sources]),
            )
            self.assertEqual(off.l_total, plain.l_total)

    def test_permuting_images_leaves_total_loss_unchanged(self) -> None:
        for trial in range(10):
            r = self.rng.child("perm", trial)
            B = int(r.integers(2, 5))
            K = int(r.integers(1, 4))
            D = 6
            S = r.normal(size=(B * K, B * K)) * 3.0
            cls = r.normal(size=(B, D))
            caps = r.normal(size=(B, D))
            log_scale = Tensor(np.asarray(INIT_LOG_SCALE), dtype=np.float64)
            order = r.permutation(B)
            idx = [int(order[b]) * K + k for b in range(B) for k in range(K)]
            for mode in (LossMode.CE, LossMode.BCE):
                for calibration in (None, Calibration(lam=0.3)):
                    tgt = build_targets(mode, B, K, 0.5, calibration)
                    before = total_loss(
                        alignment_loss(_logits(S, B, K), tgt),
                        global_loss(Tensor(cls), Tensor(caps), log_scale),
                    )
                    after = total_loss(
                        alignment_loss(_logits(S[np.ix_(idx, idx)], B, K), tgt),
                        global_loss(Tensor(cls[order]), Tensor(caps[order]), log_scale),
                    )
                    self.assertAlmostEqual(before.l_total, after.l_total, delta=1e-9)

    def test_ce_without_context_improves_as_a_diagonal_logit_grows(self) -> None:
        S = Rng(3).normal(size=(4, 4))
        tgt = build_ce_targets(2, 2, 0.0)
        previous = math.inf
        for step in range(12):
            grown = S.copy()
            grown[1, 1] += 0.5 * step
            value = ce_loss(_logits(grown, 2, 2), tgt).l_beta_cal
            self.assertLess(value, previous)
            previous = value

    def test_saturated_predictions_give_near_zero_loss(self) -> None:
        scale = math.exp(INIT_LOG_SCALE)
        ce = ce_loss(_logits(np.eye(4) * 50.0 * scale, 4, 1), build_ce_targets(4, 1, 0.0))
        self.assertLess(ce.l_beta_cal, 1e-6)
        bce_S = np.where(np.eye(4) > 0, 50.0, -50.0)
        bce = bce_loss(_logits(bce_S, 4, 1), build_bce_targets(4, 1, 0.5))
        self.assertLess(bce.l_beta_cal, 1e-6)

    def test_bce_zero_logits_two_images(self) -> None:
        bce = bce_loss(_logits(np.zeros((2, 2)), 2, 1), build_bce_targets(2, 1, 0.5))
        self.assertAlmostEqual(bce.l_beta_cal, 2.0 * math.log(2.0), delta=1e-9)

    def test_global_loss_reference_values(self) -> None:
        log_scale = Tensor(np.asarray(INIT_LOG_SCALE), dtype=np.float64)
        one = Tensor(self.rng.normal(size=(1, 5)))
        single = global_loss(one, Tensor(self.rng.normal(size=(1, 5))), log_scale)
        self.assertAlmostEqual(single.item(), 0.0, delta=1e-12)

        basis = np.eye(8)
        orthogonal = global_loss(Tensor(basis[:4]), Tensor(basis[4:]), log_scale)
        self.assertAlmostEqual(orthogonal.item(), math.log(4.0), delta=1e-9)
        self.assertAlmostEqual(info_nce(Tensor(np.zeros((4, 4)), dtype=np.float64)).item(), math.log(4.0), delta=1e-12)

        top = Tensor(np.asarray(math.log(MAX_LOGIT_SCALE)), dtype=np.float64)
        aligned = global_loss(Tensor(basis[:4]), Tensor(basis[:4]), top)
        self.assertLess(aligned.item(), 1e-6)


if __name__ == "__main__":
    unittest.main()
