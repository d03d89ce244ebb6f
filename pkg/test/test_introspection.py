import csv
import dataclasses
import os
import tempfile
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis.strategies import integers

from semloc.attribution import AttributionResult, coalition_values
from semloc.introspection import ClassAblationRow, FidelityCurve, JsdShiftRow, \
    attention_performance_correlation, bootstrap_charact_lower, budget_count, \
    budget_grid, build_pairs, charact, charact_curve, class_ablation, \
    fidelity_curves, frequency_importance, jsd, jsd_shift, jsd_shifts, \
    kendall_tau, mean_class_attribution, rank_classes, ranking_scores, \
    sample_places, score_histogram, write_rankings
from semloc.scene_graph import OFFICE_TAXONOMY, SemanticClass, class_counts
from semloc.testing import tiny_dataset, tiny_encoder, toy_scene


def curve(fid_plus, fid_minus, grid=(0.2, 1.0)) -> FidelityCurve:
    """
    A fidelity curve with the given mean values and a single pair.
    """
    plus, minus = np.array(fid_plus, dtype=float), np.array(fid_minus, dtype=float)
    return FidelityCurve(
        explainer='test',
        grid=tuple(grid),
        s_keep=np.zeros(len(grid)),
        s_drop=np.zeros(len(grid)),
        fid_plus=plus,
        fid_minus=minus,
        pairs=1,
        plus_samples=plus[None, :],
        minus_samples=minus[None, :],
    )


class JsdTestCase(TestCase):
    @settings(max_examples=100, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_identities(self, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(20)), rng.dirichlet(np.ones(20))

        self.assertEqual(jsd(p, p), 0.0)
        self.assertAlmostEqual(jsd(p, q), jsd(q, p), places=12)
        self.assertLessEqual(jsd(p, q), 1.0)
        self.assertGreaterEqual(jsd(p, q), 0.0)

    def test_disjoint_support(self):
        p = np.array([1.0, 0.0, 0.0, 0.0])
        q = np.array([0.0, 0.0, 0.5, 0.5])
        self.assertAlmostEqual(jsd(p, q), 1.0, delta=1e-6)

    def test_histogram(self):
        np.testing.assert_allclose(
            score_histogram([0.0, 0.04, 0.5, 1.0], bins=4),
            [0.5, 0.0, 0.25, 0.25],
        )

    def test_empty_histogram(self):
        with self.assertRaises(ValueError):
            score_histogram([])

    def test_no_op_removal(self):
        """
        Removing a class that is absent leaves the distribution unchanged.
        """
        scene = toy_scene()
        couch = SemanticClass(8, 'couch', 'CO')
        row = jsd_shift('saliency', couch, scene, scene, [0, 1, 2, 3], tiny_encoder(0))

        self.assertEqual(row.jsd, 0.0)
        self.assertEqual(row.count, 0)
        self.assertEqual(row.normalised_jsd, 0.0)

    def test_shifts_skip_absent_classes(self):
        scene = toy_scene()
        rows = jsd_shifts('attention', scene, scene, [0, 1, 2, 3], tiny_encoder(0))

        self.assertListEqual([r.code for r in rows], ['CH', 'CP', 'PL', 'TC'])
        for r in rows:
            self.assertGreaterEqual(r.jsd, 0.0)
            self.assertLessEqual(r.jsd, 1.0)


class FidelityTestCase(TestCase):
    def setUp(self):
        super().setUp()
        scene = toy_scene()
        self.encoder = tiny_encoder(1)
        self.pairs = build_pairs(scene, scene, [0, 1, 2, 3], hops=1)

    def test_keep_everything(self):
        for explainer in ('saliency', 'ig', 'attention', 'random'):
            c = fidelity_curves(explainer, self.pairs, self.encoder, budget_grid(0.25, 1.0, 0.25))
            self.assertEqual(c.fid_minus[-1], 0.0)
            self.assertEqual(c.pairs, 4)

    def test_drop_everything(self):
        c = fidelity_curves('saliency', self.pairs[:1], self.encoder, (0.5, 1.0))
        P, Q = self.pairs[0]

        values = coalition_values(P, Q, self.encoder)
        values.register([Q.object_ids, ()])
        self.assertAlmostEqual(c.fid_plus[-1], abs(values[()] - values[Q.object_ids]),
            places=12)

    def test_precomputed_results(self):
        grid = (0.5, 1.0)
        results = [AttributionResult('fixed', q.centre, p.centre, q.object_ids,
            tuple(q.label_of(o) for o in q.object_ids), np.ones(len(q.object_ids)))
            for p, q in self.pairs]

        c = fidelity_curves('fixed', self.pairs, self.encoder, grid, results=results)
        self.assertEqual(c.explainer, 'fixed')
        self.assertTupleEqual(c.plus_samples.shape, (4, 2))

    def test_pairs_without_objects_are_skipped(self):
        scene = toy_scene()
        empty = dataclasses.replace(scene, objects=(), edges_visibility=())
        bare = build_pairs(scene, empty, [0], hops=0)

        c = fidelity_curves('saliency', bare + self.pairs[:1], self.encoder, (1.0,))
        self.assertEqual(c.skipped, 1)
        self.assertEqual(c.pairs, 1)

        with self.assertRaises(ValueError):
            fidelity_curves('saliency', bare, self.encoder, (1.0,))

    def test_invalid_grid(self):
        for grid in ((), (0.0, 0.5), (0.5, 0.2), (0.5, 1.5)):
            with self.subTest(grid=grid):
                with self.assertRaises(ValueError):
                    fidelity_curves('saliency', self.pairs, self.encoder, grid)

    def test_budget(self):
        self.assertTupleEqual(budget_grid(0.05, 1.0, 0.05)[-2:], (0.95, 1.0))
        self.assertEqual(len(budget_grid(0.05, 1.0, 0.05)), 20)
        self.assertEqual(budget_count(0.2, 5), 1)
        self.assertEqual(budget_count(0.25, 5), 2)
        self.assertEqual(budget_count(1.0, 3), 3)


class CharactTestCase(TestCase):
    def test_unit_cases(self):
        self.assertEqual(charact(curve([1.0, 1.0], [0.0, 0.0])).value, 1.0)
        self.assertEqual(charact(curve([0.5, 0.5], [0.5, 0.5])).value, 0.5)
        self.assertEqual(charact(curve([0.0, 0.3], [0.1, 0.0])).value, 0.0)
        self.assertEqual(charact(curve([0.4, 0.3], [1.0, 0.0])).value, 0.0)

    def test_sufficiency_floor(self):
        """
        Similarity changes above 1 floor the sufficiency term at zero.
        """
        with self.assertLogs('semloc.introspection', 'DEBUG') as logs:
            self.assertEqual(charact(curve([0.5, 0.5], [1.4, 0.0])).value, 0.0)
        self.assertIn('floored', logs.output[0])
        self.assertTrue(logs.output[0].startswith('DEBUG:'))

    def test_clamp(self):
        with self.assertLogs('semloc.introspection', 'DEBUG') as logs:
            self.assertEqual(charact(curve([1.8, 1.8], [0.0, 0.0]), w_plus=0.9,
                w_minus=0.1).value, 1.0)
        self.assertListEqual([r.levelname for r in logs.records], ['DEBUG'])
        self.assertIn('clamped', logs.output[0])

    def test_weights(self):
        c = curve([0.5, 0.5], [0.0, 0.0])
        self.assertAlmostEqual(charact(c, w_plus=1.0, w_minus=0.0).value, 0.5)

        with self.assertRaises(ValueError):
            charact(c, w_plus=0.7, w_minus=0.7)

    def test_rho_must_be_on_grid(self):
        with self.assertRaises(ValueError):
            charact(curve([0.5, 0.5], [0.0, 0.0]), rho=0.3)

    def test_curve_and_bootstrap(self):
        c = curve([1.0, 0.5], [0.0, 0.5])
        np.testing.assert_allclose(charact_curve(c), [1.0, 0.5])
        # A single pair resamples to itself.
        self.assertEqual(bootstrap_charact_lower(c, rho=0.2, resamples=20), 1.0)


class RankingTestCase(TestCase):
    def test_descending_with_ties(self):
        self.assertListEqual(rank_classes({18: 0.1, 5: 0.3, 11: 0.1, 8: 0.5}),
            [8, 5, 11, 18])
        self.assertListEqual(rank_classes(dict.fromkeys((12, 5, 10), 0.0)), [5, 10, 12])

    @settings(max_examples=20, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        scores = dict(zip((5, 8, 10, 11, 12, 18), rng.normal(size=6)))
        transformed = {k: np.exp(3.0 * v) + 2.0 for k, v in scores.items()}
        self.assertListEqual(rank_classes(scores), rank_classes(transformed))

    def test_kendall_tau(self):
        ranking = [8, 11, 18, 12, 5, 10]
        self.assertEqual(kendall_tau(ranking, ranking), 1.0)
        self.assertEqual(kendall_tau(ranking, ranking[::-1]), -1.0)

        with self.assertRaises(ValueError):
            kendall_tau([5, 8], [5, 10])

    def test_ranking_scores(self):
        ablation = [ClassAblationRow(5, 'CH', 2, 0.8, 0.6)]
        shifts = [JsdShiftRow('ig', 5, 'CH', 4, 0.2), JsdShiftRow('attention', 5, 'CH', 4, 0.4)]

        self.assertAlmostEqual(ranking_scores('ablation', ablation, shifts)[5], 0.1)
        self.assertDictEqual(ranking_scores('attention', ablation, shifts), {5: 0.1})

        with self.assertRaises(ValueError):
            ranking_scores('lime', ablation, shifts)

    def test_mean_class_attribution(self):
        a = AttributionResult('ig', 0, 0, (1, 2), (5, 10), np.array([1.0, 1.0]))
        b = AttributionResult('ig', 1, 1, (3,), (5,), np.array([2.0]))
        self.assertDictEqual(mean_class_attribution([a, b]), {5: 0.75, 10: 0.25})
        self.assertDictEqual(mean_class_attribution([]), {})

    def test_frequency_importance(self):
        counts = {5: 28, 8: 11, 10: 35, 11: 13}
        self.assertAlmostEqual(
            frequency_importance(counts, {5: 0.2, 8: 0.4, 10: 0.1, 11: 0.3}), -1.0,
        )
        self.assertIsNone(frequency_importance(counts, {5: 0.1, 8: 0.2}))
        self.assertIsNone(frequency_importance(counts, dict.fromkeys(counts, 0.5)))

    def test_write_rankings(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'rankings.csv')
            write_rankings([('attention', 1, ['CO', 'PL', 'TC', 'PA', 'CH', 'CP'])], path)
            with open(path) as f:
                rows = list(csv.reader(f))

        self.assertListEqual(rows[0], ['method', 'run', '1st', '2nd', '3rd', '4th', '5th', '6th'])
        self.assertListEqual(rows[1][:3], ['attention', '1', 'CO'])


class CorrelationTestCase(TestCase):
    def rows(self, drops, jsds):
        ablation = [ClassAblationRow(label, 'X', 1, 0.5, 0.5 - d)
            for label, d in zip((5, 8, 10, 11), drops)]
        shifts = [JsdShiftRow('attention', label, 'X', 1, j)
            for label, j in zip((5, 8, 10, 11), jsds)]
        return ablation, shifts

    def test_linear(self):
        c = attention_performance_correlation(*self.rows([0.1, 0.2, 0.3, 0.4],
            [0.2, 0.4, 0.6, 0.8]))
        self.assertAlmostEqual(c.pearson, 1.0)
        self.assertAlmostEqual(c.spearman, 1.0)
        self.assertEqual(len(c.points), 4)

    def test_anti_correlated(self):
        c = attention_performance_correlation(*self.rows([0.1, 0.2, 0.3, 0.4],
            [0.8, 0.6, 0.4, 0.2]))
        self.assertAlmostEqual(c.pearson, -1.0)

    def test_constant_inputs(self):
        c = attention_performance_correlation(*self.rows([0.1] * 4, [0.2, 0.4, 0.6, 0.8]))
        self.assertFalse(c.defined)
        self.assertIsNone(c.spearman)

    def test_too_few_classes(self):
        ablation, shifts = self.rows([0.1, 0.2], [0.2, 0.4])
        with self.assertRaises(ValueError):
            attention_performance_correlation(ablation, shifts)


class ClassAblationTestCase(TestCase):
    def test_rows(self):
        scene, split = tiny_dataset()
        encoder = tiny_encoder(0)
        taxonomy = OFFICE_TAXONOMY + (SemanticClass(99, 'lamp', 'LA'),)
        rows = class_ablation(scene, split, encoder, taxonomy)
        counts = class_counts(scene)

        self.assertNotIn(99, [r.label for r in rows])
        for r in rows:
            self.assertEqual(r.count, counts[r.label])
            self.assertGreater(r.count, 0)
            self.assertAlmostEqual(r.normalised_drop, (r.pr_auc_with - r.pr_auc_without) / r.count)

        self.assertEqual(len({r.pr_auc_with for r in rows}), 1)

    def test_sample_places(self):
        _, split = tiny_dataset()
        self.assertListEqual(sample_places(split, 'train'), split.places('train'))

        sampled = sample_places(split, 'train', limit=5, seed=1)
        self.assertEqual(len(sampled), 5)
        self.assertListEqual(sampled, sorted(sampled))
        self.assertListEqual(sampled, sample_places(split, 'train', limit=5, seed=1))
