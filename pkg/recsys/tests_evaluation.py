import math

import numpy as np
from django.test import SimpleTestCase

from recsys.data import FalseNegativeSet, build_false_negative_set
from recsys.diagnostics import run_diagnostics
from recsys.evaluation import (
    SAMPLED_LIST_LENGTH, RankedList, RankingEvaluator, build_ranked_list, ccdf, ccdf_ppos,
    label_error_ratio, ndcg_at_k, ranks_against, recall_at_k, std_mean_ratio, std_mean_report,
)
from recsys.exceptions import ConfigurationError, ProtocolError
from recsys.model import TrainHyper, init
from recsys.testing import dataset_from_pairs, fixed_score_state, toy_dataset


def ranked(items, ground_truth):
    return RankedList(0, np.array(items, dtype=np.int64), frozenset(ground_truth))


class MetricExampleTests(SimpleTestCase):
    def test_recall(self):
        self.assertEqual(recall_at_k(ranked([3, 1, 2, 0], {3}), 3), 1.0)
        self.assertEqual(recall_at_k(ranked([1, 2, 0, 3], {3}), 3), 0.0)
        self.assertEqual(recall_at_k(ranked([1, 3, 0, 2], {3, 2}), 3), 0.5)

    def test_ndcg(self):
        self.assertEqual(ndcg_at_k(ranked([3, 1, 2], {3}), 1), 1.0)
        self.assertAlmostEqual(ndcg_at_k(ranked([1, 3, 2], {3}), 3), 0.63093, places=5)
        self.assertEqual(ndcg_at_k(ranked([1, 2, 3], {3}), 2), 0.0)
        # Unnormalised: two hits at the top sum past 1
        self.assertGreater(ndcg_at_k(ranked([1, 3, 2], {1, 3}), 3), 1.0)

    def test_bad_cutoff(self):
        with self.assertRaises(ConfigurationError):
            recall_at_k(ranked([0], {0}), 0)
        with self.assertRaises(ConfigurationError):
            ndcg_at_k(ranked([0], {0}), 0)


class RankedListTests(SimpleTestCase):
    def test_full_protocol_order(self):
        ds = dataset_from_pairs(1, 4, [(0, 3)], test={0: {0}})
        state = fixed_score_state(np.array([0.1, 0.9, 0.5, 5.0]))
        self.assertEqual(build_ranked_list(state, ds, 0).items.tolist(), [1, 2, 0])

    def test_ties_follow_item_index(self):
        ds = dataset_from_pairs(1, 6, [(0, 2)], test={0: {4}})
        state = fixed_score_state(np.zeros(6))
        self.assertEqual(build_ranked_list(state, ds, 0).items.tolist(), [0, 1, 3, 4, 5])

    def test_full_list_leaves_out_validation_item(self):
        ds = dataset_from_pairs(1, 5, [(0, 0)], test={0: {1}}, validation={0: 2})
        state = fixed_score_state(np.arange(5.0))
        self.assertEqual(sorted(build_ranked_list(state, ds, 0).items.tolist()), [1, 3, 4])
        self.assertEqual(sorted(build_ranked_list(state, ds, 0, split='validation').items.tolist()),
                         [2, 3, 4])

    def test_sampled_protocol(self):
        ds = dataset_from_pairs(1, 300, [(0, i) for i in range(10)], test={0: {42}})
        state = fixed_score_state(np.random.default_rng(0).normal(size=300))
        first = build_ranked_list(state, ds, 0, 'sampled100', rng=np.random.default_rng(5))
        second = build_ranked_list(state, ds, 0, 'sampled100', rng=np.random.default_rng(5))
        self.assertEqual(first.items.size, SAMPLED_LIST_LENGTH)
        self.assertIn(42, first.items.tolist())
        self.assertEqual(len(set(first.items.tolist())), SAMPLED_LIST_LENGTH)
        self.assertFalse(set(first.items.tolist()) & set(range(10)))
        np.testing.assert_array_equal(first.items, second.items)

    def test_sampled_protocol_needs_candidates(self):
        ds = dataset_from_pairs(1, 60, [(0, 0)], test={0: {1}})
        with self.assertRaises(ProtocolError):
            build_ranked_list(fixed_score_state(np.zeros(60)), ds, 0, 'sampled100',
                              rng=np.random.default_rng(0))

    def test_user_without_ground_truth(self):
        ds = dataset_from_pairs(2, 5, [(0, 0), (1, 1)], test={0: {2}})
        with self.assertRaises(ProtocolError):
            build_ranked_list(fixed_score_state(np.zeros(5), num_users=2), ds, 1)

    def test_ranks_against(self):
        scores = np.array([[2.0, 1.0, 2.0, -np.inf]])
        items = np.array([[0, 1, 2, 3]])
        np.testing.assert_array_equal(ranks_against(scores, items, np.array([2.0]), np.array([2])), [2])


class MetricOracleTests(SimpleTestCase):
    """Evaluator output against a sort-and-count recomputation."""

    @staticmethod
    def brute_force(item_scores, ds, cutoffs):
        recall = {k: [] for k in cutoffs}
        ndcg = {k: [] for k in cutoffs}
        for u, truth in sorted(ds.test.items()):
            if not truth:
                continue
            items = [i for i in range(ds.num_items) if i not in ds.per_user_positives[u]]
            items.sort(key=lambda i: (-item_scores[i], i))
            for k in cutoffs:
                hits = [rank for rank, i in enumerate(items[:k], start=1) if i in truth]
                recall[k].append(len(hits) / len(truth))
                ndcg[k].append(sum(1.0 / math.log2(rank + 1) for rank in hits))
        return ({k: sum(v) / len(v) for k, v in recall.items()},
                {k: sum(v) / len(v) for k, v in ndcg.items()})

    def test_random_instances(self):
        rng = np.random.default_rng(99)
        cutoffs = (1, 3, 5)
        for trial in range(500):
            num_users = int(rng.integers(1, 5))
            num_items = int(rng.integers(4, 16))
            # Integer scores force plenty of ties
            item_scores = rng.integers(0, 4, size=num_items).astype(np.float64)
            train, test = [], {}
            for u in range(num_users):
                chosen = rng.choice(num_items, size=int(rng.integers(2, num_items)), replace=False)
                cut = int(rng.integers(1, chosen.size))
                train.extend((u, int(i)) for i in chosen[:cut])
                test[u] = {int(i) for i in chosen[cut:]}
            ds = dataset_from_pairs(num_users, num_items, train, test=test)
            state = fixed_score_state(item_scores, num_users=num_users)

            results = RankingEvaluator(ds, cutoffs=cutoffs).evaluate(state)
            recall, ndcg = self.brute_force(item_scores.tolist(), ds, cutoffs)
            for k in cutoffs:
                self.assertAlmostEqual(results[f'recall@{k}'], recall[k], delta=1e-12, msg=f'trial {trial}')
                self.assertAlmostEqual(results[f'ndcg@{k}'], ndcg[k], delta=1e-12, msg=f'trial {trial}')
            for u in test:
                lst = build_ranked_list(state, ds, u)
                expected = sorted((i for i in range(num_items) if i not in ds.per_user_positives[u]),
                                  key=lambda i: (-item_scores[i], i))
                self.assertEqual(lst.items.tolist(), expected)

    def test_ndcg1_equals_recall1_on_leave_one_out(self):
        ds = toy_dataset(num_users=30, num_items=400, per_user=8, split='leave_one_out')
        state = init(ds.num_users, ds.num_items, TrainHyper(embedding_dim=4), seed=3)
        for u in ds.test:
            lst = build_ranked_list(state, ds, u)
            self.assertEqual(ndcg_at_k(lst, 1), recall_at_k(lst, 1))
        results = RankingEvaluator(ds, 'sampled100', seed=1).evaluate(state)
        self.assertEqual(results['ndcg@1'], results['recall@1'])
        for value in results.values():
            self.assertTrue(0.0 <= value <= 1.0)

    def test_monotone_transform_invariance(self):
        ds = toy_dataset(num_users=6, num_items=30, per_user=8)
        scores = np.random.default_rng(4).normal(size=ds.num_items)
        a = RankingEvaluator(ds).evaluate(fixed_score_state(scores, ds.num_users))
        b = RankingEvaluator(ds).evaluate(fixed_score_state(np.exp(scores), ds.num_users))
        self.assertEqual(a, b)

    def test_sampled_negatives_reused(self):
        ds = toy_dataset(num_users=30, num_items=400, per_user=8, split='leave_one_out')
        evaluator = RankingEvaluator(ds, 'sampled100', seed=8)
        state = init(ds.num_users, ds.num_items, TrainHyper(embedding_dim=4), seed=0)
        first = {u: n.copy() for u, n in evaluator.negatives('test').items()}
        evaluator.evaluate(state)
        for u, negatives in evaluator.negatives('test').items():
            np.testing.assert_array_equal(negatives, first[u])
        for u in evaluator.users('test'):
            self.assertEqual(evaluator.ranked_list(state, int(u)).items.size, SAMPLED_LIST_LENGTH)
        again = RankingEvaluator(ds, 'sampled100', seed=8).evaluate(state)
        self.assertEqual(evaluator.evaluate(state), again)


class DiagnosticStatisticTests(SimpleTestCase):
    def test_label_error_ratio(self):
        fns = FalseNegativeSet(10, {0: frozenset([1, 2]), 1: frozenset([3])},
                               {0: frozenset([1]), 1: frozenset()}, 1.0, 0.5)
        self.assertEqual(label_error_ratio([0, 1], [5, 5], fns), 0.0)
        self.assertEqual(label_error_ratio([0, 0, 1], [1, 2, 3], fns), 1.0)
        users = [0, 0, 1, 0, 1, 0, 1, 0]
        items = [1, 2, 3, 4, 5, 6, 7, 8]
        self.assertEqual(label_error_ratio(users, items, fns), 0.375)
        with self.assertRaises(ValueError):
            label_error_ratio([], [], fns)

    def test_ccdf(self):
        points = dict(ccdf([0.2, 0.6, 0.9], thresholds=[0.0, 0.5, 1.5]))
        self.assertEqual(points[0.0], 1.0)
        self.assertAlmostEqual(points[0.5], 2 / 3)
        self.assertEqual(points[1.5], 0.0)
        values = [f for _, f in ccdf(np.random.default_rng(0).random(200))]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_ccdf_ppos_at_init(self):
        ds = toy_dataset(num_users=20, num_items=80, per_user=10)
        state = init(ds.num_users, ds.num_items, TrainHyper(embedding_dim=8), seed=1)
        rng = np.random.default_rng(2)
        users = rng.integers(0, ds.num_users, size=2000)
        items = rng.integers(0, ds.num_items, size=2000)
        points = dict(ccdf_ppos(state, ds, users, items))
        self.assertEqual(points[0.0], 1.0)
        self.assertAlmostEqual(points[0.5], 0.5, delta=0.1)

    def test_std_mean(self):
        self.assertAlmostEqual(float(std_mean_ratio([0, 1, 0, 1, 0])), 1.2247, places=4)
        np.testing.assert_array_equal(std_mean_ratio(np.full((3, 5), 0.4)), 0.0)
        self.assertEqual(float(std_mean_ratio(np.zeros(5))), 0.0)
        report = std_mean_report({'flat': np.full((4, 5), 0.3),
                                  'oscillating': np.tile([0.1, 0.9, 0.1, 0.9, 0.1], (4, 1))})
        self.assertEqual(report['flat'], 0.0)
        self.assertGreater(report['oscillating'], report['flat'])


class DiagnosticsRunTests(SimpleTestCase):
    def test_report_shape(self):
        ds = toy_dataset(num_users=10, num_items=40, per_user=10, test_fraction=0.4)
        hyper = TrainHyper(embedding_dim=4, batch_size=16)
        state = init(ds.num_users, ds.num_items, hyper, seed=0)
        before = state.copy()
        fns = build_false_negative_set(ds, 0.5, 1.0, seed=0)
        report = run_diagnostics(state, ds, fns, hyper, seed=1, difficulties=(1, 4), probes=50)

        self.assertEqual(sorted(report.ler_by_difficulty), [1, 4])
        for ler in report.ler_by_difficulty.values():
            self.assertTrue(0.0 <= ler <= 1.0)
        self.assertEqual(set(report.std_mean_by_class), {'UN', 'HN_4', 'FN'})
        ccdf_values = report.ccdf_frame()['ccdf'].tolist()
        self.assertTrue(all(a >= b for a, b in zip(ccdf_values, ccdf_values[1:])))
        self.assertEqual(list(report.class_frame().columns), ['class', 'statistic', 'value'])
        for name, value in before.parameters().items():
            np.testing.assert_array_equal(state.parameters()[name], value)

    def test_needs_false_negatives(self):
        ds = toy_dataset()
        hyper = TrainHyper(embedding_dim=4)
        fns = build_false_negative_set(ds, 0.0, 1.0, seed=0)
        with self.assertRaises(ConfigurationError):
            run_diagnostics(init(ds.num_users, ds.num_items, hyper), ds, fns, hyper)
