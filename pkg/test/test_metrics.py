import csv
import json
import os
import tempfile
from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis.strategies import integers

from semloc.exceptions import DegenerateLabels, ShapeMismatch
from semloc.metrics import EVAL_COLUMNS, SimilarityMatrix, bow_similarity_matrix, \
    evaluate, f1_best, pair_scores, pr_auc, recall_at_n, similarity_matrix, \
    write_eval_reports, write_similarity_csv
from semloc.scene_graph import ego_graphs
from semloc.testing import tiny_encoder, toy_scene


def brute_operating_points(scores, labels):
    """
    ``(threshold, precision, recall, f1)`` for every distinct score,
    predicting positive when ``score >= threshold``; highest threshold first.
    """
    n_pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        fn = n_pos - tp
        points.append((t, tp / (tp + fp), tp / n_pos, 2 * tp / (2 * tp + fp + fn)))
    return points


def brute_pr_auc(scores, labels):
    area, previous_recall = 0.0, 0.0
    for _, precision, recall, _ in brute_operating_points(scores, labels):
        area += (recall - previous_recall) * precision
        previous_recall = recall
    return area


def brute_f1(scores, labels):
    best = None
    for t, _, _, f1 in brute_operating_points(scores, labels):
        # Thresholds descend, so ``>=`` keeps the lowest among ties.
        if best is None or f1 >= best[0]:
            best = (f1, t)
    return best


def brute_recall(values, query_ids, map_ids, positives, n):
    hits = 0
    for q, row in zip(query_ids, values):
        ranked = sorted(zip(map_ids, row), key=lambda pair: (-pair[1], pair[0]))
        if {m for m, _ in ranked[:n]} & positives.get(q, set()):
            hits += 1
    return hits / len(query_ids)


def random_instance(seed):
    """
    Scores with deliberate ties, and labels with both classes present.
    """
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 201))
    scores = np.round(rng.uniform(-1.0, 1.0, size=size), int(rng.integers(1, 4)))
    labels = rng.random(size) < rng.uniform(0.05, 0.5)
    labels[0], labels[1] = True, False
    return scores.tolist(), labels.astype(int).tolist()


class MetricOracleTestCase(TestCase):
    """
    Metrics agree with brute-force reimplementations.
    """

    @settings(max_examples=50, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_pr_auc(self, seed):
        scores, labels = random_instance(seed)
        self.assertAlmostEqual(pr_auc(scores, labels), brute_pr_auc(scores, labels),
            places=12)

    @settings(max_examples=50, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_f1_best(self, seed):
        scores, labels = random_instance(seed)
        f1, threshold = f1_best(scores, labels)
        expected_f1, expected_threshold = brute_f1(scores, labels)

        self.assertAlmostEqual(f1, expected_f1, places=12)
        self.assertEqual(threshold, expected_threshold)

    @settings(max_examples=50, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_recall_at_n(self, seed):
        rng = np.random.default_rng(seed)
        n_queries, n_map = int(rng.integers(1, 10)), int(rng.integers(1, 20))
        query_ids = list(range(n_queries))
        map_ids = [int(m) for m in rng.permutation(100)[:n_map]]
        values = np.round(rng.uniform(-1.0, 1.0, size=(n_queries, n_map)), 1)
        positives = {
            q: {m for m in map_ids if rng.random() < 0.2}
            for q in query_ids
        }
        sim = SimilarityMatrix(tuple(query_ids), tuple(map_ids), values)

        for n in (1, 5, 10):
            self.assertEqual(
                recall_at_n(sim, positives, n),
                brute_recall(values, query_ids, map_ids, positives, n),
            )


class PrAucTestCase(TestCase):
    def test_perfect_separation(self):
        self.assertEqual(pr_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]), 1.0)

    def test_random_scores_match_prevalence(self):
        rng = np.random.default_rng(0)
        labels = np.zeros(100000, dtype=int)
        labels[:10000] = 1
        self.assertAlmostEqual(pr_auc(rng.random(labels.size), labels), 0.1, delta=0.01)

    def test_monotone_transform(self):
        scores, labels = random_instance(3)
        self.assertAlmostEqual(
            pr_auc(scores, labels),
            pr_auc([3.0 * s + 1.0 for s in scores], labels),
            places=12,
        )

    def test_degenerate_labels(self):
        with self.assertRaises(DegenerateLabels) as context:
            pr_auc([0.1, 0.2], [0, 0])

        self.assertEqual(context.exception.context['positives'], 0)

        with self.assertRaises(DegenerateLabels):
            pr_auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            pr_auc([0.1, 0.2, 0.3], [0, 1])


class F1TestCase(TestCase):
    def test_separable(self):
        f1, threshold = f1_best([0.9, 0.7, 0.3], [1, 1, 0])
        self.assertEqual(f1, 1.0)
        self.assertEqual(threshold, 0.7)

    def test_all_scores_equal(self):
        f1, threshold = f1_best([0.5] * 4, [1, 0, 1, 0])
        self.assertAlmostEqual(f1, 2.0 / 3.0)
        self.assertEqual(threshold, 0.5)

    def test_ties_prefer_lowest_threshold(self):
        """
        Both thresholds give F1 = 2/3; the lower one wins.
        """
        f1, threshold = f1_best([0.9, 0.8, 0.7, 0.6], [1, 0, 0, 1])
        self.assertAlmostEqual(f1, 2.0 / 3.0)
        self.assertEqual(threshold, 0.6)


class RecallTestCase(TestCase):
    def setUp(self):
        super().setUp()
        self.sim = SimilarityMatrix(
            query_ids=(0, 1, 2),
            map_ids=(10, 11, 12),
            values=np.array([
                [0.9, 0.1, 0.5],
                [0.2, 0.2, 0.1],
                [0.0, 0.3, 0.8],
            ]),
        )
        self.positives = {0: {10}, 1: {11}, 2: {11}}

    def test_top_one(self):
        # Query 1 ties between 10 and 11; the lower id wins.
        self.assertAlmostEqual(recall_at_n(self.sim, self.positives, 1), 1 / 3)

    def test_non_decreasing(self):
        values = [recall_at_n(self.sim, self.positives, n) for n in (1, 2, 3)]
        self.assertListEqual(values, sorted(values))
        self.assertEqual(values[-1], 1.0)

    def test_saturation(self):
        """
        With ``n`` past the map size, recall is the share of queries with any
        positive.
        """
        positives = {0: {10}, 1: set()}
        self.assertAlmostEqual(recall_at_n(self.sim, positives, 50), 1 / 3)

    def test_invalid_n(self):
        with self.assertRaises(ValueError):
            recall_at_n(self.sim, self.positives, 0)


class SimilarityMatrixTestCase(TestCase):
    def test_identical_graphs(self):
        scene = toy_scene()
        graphs = ego_graphs(scene, [0, 1, 2, 3], 1)
        sim = similarity_matrix(graphs, graphs, tiny_encoder(0))

        np.testing.assert_allclose(np.diag(sim.values), 1.0, atol=1e-9)
        self.assertTrue(((sim.values >= -1.0) & (sim.values <= 1.0)).all())
        self.assertEqual(sim.entry(1, 3), sim.values[1, 3])

    def test_bow_shape(self):
        scene = toy_scene()
        sim = bow_similarity_matrix(ego_graphs(scene, [0, 3], 0),
            ego_graphs(scene, [0, 1, 2, 3], 0), scene.taxonomy)

        self.assertTupleEqual(sim.values.shape, (2, 4))
        # Place 3 only sees a trash can, which nobody else sees.
        self.assertAlmostEqual(sim.entry(3, 3), 1.0)
        self.assertEqual(sim.entry(3, 0), 0.0)

    def test_dimensions_must_match(self):
        with self.assertRaises(ShapeMismatch):
            SimilarityMatrix((0, 1), (0,), np.zeros((1, 2)))

    def test_pair_scores(self):
        sim = SimilarityMatrix((0, 1), (5, 6), np.array([[0.1, 0.2], [0.3, 0.4]]))
        scores, labels = pair_scores(sim, {0: {6}, 1: {5, 6}})

        np.testing.assert_array_equal(scores, [0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(labels, [0, 1, 1, 1])


class ReportWriterTestCase(TestCase):
    def setUp(self):
        super().setUp()
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)

    def path(self, name):
        return os.path.join(self.directory.name, name)

    def test_eval_reports(self):
        sim = SimilarityMatrix((0, 1), (0, 1), np.array([[0.9, 0.1], [0.2, 0.8]]))
        report = evaluate(sim, {0: {0}, 1: {1}})
        self.assertEqual(report.pr_auc, 1.0)
        self.assertEqual(report.recall_at_1, 1.0)
        self.assertEqual(report.pairs, 4)

        write_eval_reports({'model': report, 'bow': report}, self.path('eval.csv'),
            self.path('eval.json'))

        with open(self.path('eval.csv')) as f:
            rows = list(csv.DictReader(f))
        self.assertListEqual([r['model'] for r in rows], ['model', 'bow'])
        self.assertListEqual(list(rows[0]), list(EVAL_COLUMNS))

        with open(self.path('eval.json')) as f:
            self.assertEqual(json.load(f)[1]['recall@10'], 1.0)

    def test_similarity_csv(self):
        sim = SimilarityMatrix((3,), (1, 2), np.array([[0.25, -0.5]]))
        write_similarity_csv(sim, self.path('sim.csv'))

        with open(self.path('sim.csv')) as f:
            self.assertEqual(f.read(), 'query_id,1,2\n3,0.25,-0.5\n')
