import json
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy.special import softmax
from scipy.stats import chisquare

from recsys import metrics
from recsys.data import PositiveIndex, build_false_negative_set
from recsys.exceptions import ConfigurationError, NoCandidateError
from recsys.model import TrainHyper, init, score
from recsys.sampler import (
    HISTORY_WINDOW, SamplerConfig, SamplingStrategy, SRNSSampler, UserMemory, alpha_at, build_sampler,
    draw_hard, draw_popularity, draw_rank_based, duplicate_mask, empty_history, gumbel_top_k,
    memory_update, push_history, refresh_rows, sample_hard_D, sample_popularity, sample_rank_based,
    sample_uniform, select_slots, srns_select, std_over_window, window_std,
)
from recsys.testing import dataset_from_pairs, fixed_score_state, toy_dataset


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def brute_force_select(cand_scores, pos_score, cand_history, pos_history, alpha_t):
    """First slot within 1e-12 of the best ``P_pos + alpha_t * std`` value."""
    values = []
    for s in range(len(cand_scores)):
        value = sigmoid(cand_scores[s] - pos_score)
        if alpha_t > 0:
            window = [sigmoid(c - p) for c, p in zip(cand_history[s], pos_history)
                      if not (math.isnan(c) or math.isnan(p))]
            if window:
                mean = sum(window) / len(window)
                value += alpha_t * math.sqrt(sum((w - mean) ** 2 for w in window) / len(window))
        values.append(value)
    best = max(values)
    return next(s for s, v in enumerate(values) if v >= best - 1e-12)


class KernelTests(SimpleTestCase):
    def test_alpha_schedules(self):
        config = SamplerConfig(alpha=20.0, T0=100)
        self.assertEqual(alpha_at(config, 50), 10.0)
        self.assertEqual(alpha_at(config, 400), 20.0)
        self.assertEqual(alpha_at(SamplerConfig(alpha=20.0, schedule='flat'), 1), 20.0)
        decreased = SamplerConfig(alpha=20.0, T0=100, schedule='decreased')
        self.assertEqual(alpha_at(decreased, 50), 10.0)
        self.assertEqual(alpha_at(decreased, 150), 0.0)

    def test_window_std_ignores_padding(self):
        values = np.array([[np.nan, np.nan, 1.0, 3.0, np.nan], [np.nan] * 5])
        np.testing.assert_allclose(window_std(values), [1.0, 0.0])
        self.assertAlmostEqual(std_over_window([0.2, 0.4, 0.6, 0.8, 1.0]), 0.2828427, delta=1e-6)
        self.assertEqual(std_over_window([0.5]), 0.0)

    def test_push_history_shifts_columns_together(self):
        history = empty_history(2, 3)
        push_history(history, np.arange(6.0).reshape(2, 3))
        push_history(history, np.full((2, 3), 9.0))
        np.testing.assert_array_equal(history[1, 2, -2:], [5.0, 9.0])
        self.assertTrue(np.isnan(history[..., :-2]).all())

    def test_duplicate_mask_keeps_first(self):
        mask = duplicate_mask(np.array([[3, 1, 3, 2, 1]]))
        np.testing.assert_array_equal(mask, [[False, False, True, False, True]])

    def test_config_validation(self):
        with self.assertRaises(ConfigurationError):
            SamplerConfig(S1=0)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(tau=0)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(S1=20, S2=20, var_set_size=30)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(strategy='gan')


class SelectionOracleTests(SimpleTestCase):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        W = HISTORY_WINDOW
        for trial in range(1000):
            S1 = int(rng.integers(1, 65))
            cand_scores = rng.normal(0.0, 2.0, size=S1)
            pos_score = float(rng.normal())
            history = rng.normal(0.0, 2.0, size=(S1, W))
            for s in range(S1):
                history[s, :rng.integers(0, W + 1)] = np.nan
            pos_history = rng.normal(size=W)
            pos_history[:rng.integers(0, W + 1)] = np.nan
            if S1 > 1 and trial % 4 == 0:
                # Exact tie: a later slot copies an earlier one
                a, b = sorted(rng.choice(S1, size=2, replace=False))
                cand_scores[b], history[b] = cand_scores[a], history[a]
                cand_scores[a] = cand_scores[b] = cand_scores.max() + 1.0
            alpha_t = float(rng.choice([0.0, 0.5, 5.0, 20.0]))

            got = select_slots(cand_scores[None], np.array([pos_score]), history[None],
                               pos_history[None], alpha_t)[0]
            expected = brute_force_select(cand_scores.tolist(), pos_score, history.tolist(),
                                          pos_history.tolist(), alpha_t)
            self.assertEqual(int(got), expected, f'trial {trial}')

    def test_srns_select_example(self):
        # Slot 1 scores lower but has a volatile history; alpha decides
        state = fixed_score_state(np.array([0.0, 0.5, 0.4, 1.0]))
        history = np.array([[0.5] * 5, [-3.0, 3.0, -3.0, 3.0, -3.0]])
        mem = UserMemory(np.array([1, 2]), history, {3: np.ones(5)})
        self.assertEqual(srns_select(mem, 0, 3, state, alpha_t=0.0), 1)
        self.assertEqual(srns_select(mem, 0, 3, state, alpha_t=5.0), 2)
        mem = UserMemory(np.array([1, 2]), history[::-1].copy(), {3: np.ones(5)})
        self.assertEqual(srns_select(mem, 0, 3, state, alpha_t=5.0), 1)

    def test_raising_a_score_never_demotes_the_candidate(self):
        rng = np.random.default_rng(99)
        W = HISTORY_WINDOW
        for trial in range(300):
            S1 = int(rng.integers(2, 17))
            cand_scores = rng.normal(0.0, 2.0, size=S1)
            history = rng.normal(0.0, 2.0, size=(S1, W))
            pos_history = rng.normal(size=W)
            alpha_t = float(rng.choice([0.0, 1.0, 10.0]))
            pos = np.array([float(rng.normal())])

            def pick(scores):
                return int(select_slots(scores[None], pos, history[None], pos_history[None], alpha_t)[0])

            before = pick(cand_scores)
            s = int(rng.integers(0, S1))
            raised = cand_scores.copy()
            raised[s] += float(rng.uniform(0.01, 3.0))
            after = pick(raised)
            if before == s:
                self.assertEqual(after, s, f'trial {trial}')
            else:
                self.assertIn(after, (before, s), f'trial {trial}')

    def test_srns_select_tracks_a_rising_candidate(self):
        history = np.tile([0.0, 1.0, 0.0, 1.0, 0.0], (3, 1))
        mem = UserMemory(np.array([1, 2, 3]), history, {0: np.zeros(5)})
        winners = []
        for boost in (0.0, 1.0, 2.0, 4.0):
            state = fixed_score_state(np.array([0.0, 1.5, 1.0, 0.5 + boost]))
            winners.append(srns_select(mem, 0, 0, state, alpha_t=1.0))
        # Item 3 starts last and takes over once its score passes item 1
        self.assertEqual(winners, [1, 1, 3, 3])

    def test_empty_memory(self):
        state = fixed_score_state(np.zeros(3))
        with self.assertRaises(NoCandidateError):
            srns_select(UserMemory(np.empty(0, dtype=np.int64), empty_history(0)), 0, 0, state, 1.0)


class RefreshDistributionTests(SimpleTestCase):
    """Memory refresh keeps items with probability ∝ exp(score / tau)."""

    def test_gumbel_top_one_is_softmax(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(0.0, 1.5, size=8)
        draws = 100_000
        for tau in (0.5, 1.0, 2.0, 10.0):
            picks = gumbel_top_k(np.tile(scores, (draws, 1)), tau, 1, rng)[:, 0]
            counts = np.bincount(picks, minlength=scores.size)
            expected = softmax(scores / tau) * draws
            self.assertGreater(chisquare(counts, expected).pvalue, 0.01, f'tau={tau}')

    def test_refresh_of_single_slot_memories(self):
        # 10 candidate items; 150 expansion draws cover all of them
        item_scores = np.concatenate([[0.0], np.linspace(-2.0, 2.0, 10)])
        state = fixed_score_state(item_scores)
        ds = dataset_from_pairs(1, 11, [(0, 0)])
        excluded = PositiveIndex.from_dataset(ds)
        rng = np.random.default_rng(11)
        rows, blocks, S2 = 10_000, 10, 150
        users = np.zeros(rows, dtype=np.int64)

        def draw(r, rng, size=S2):
            return excluded.draw_negatives(users[r], rng, size=size), empty_history(r.size, size)

        for tau in (0.5, 1.0, 2.0, 10.0):
            counts = np.zeros(11, dtype=np.int64)
            for _ in range(blocks):
                candidates, _ = refresh_rows(
                    users, np.full((rows, 1), 1, dtype=np.int64), empty_history(rows, 1),
                    np.zeros((rows, 1), dtype=bool), draw, lambda r, rng: draw(r, rng, 1),
                    state, tau, np.ones(rows, dtype=np.int64), rng,
                )
                counts += np.bincount(candidates[:, 0], minlength=11)
            self.assertEqual(counts[0], 0)
            expected = softmax(item_scores[1:] / tau) * rows * blocks
            self.assertGreater(chisquare(counts[1:], expected).pvalue, 0.01, f'tau={tau}')

    def test_memory_update_keeps_histories_with_items(self):
        state = fixed_score_state(np.arange(8, dtype=np.float64))
        ds = dataset_from_pairs(1, 8, [(0, 0)])
        excluded = PositiveIndex.from_dataset(ds)
        history = np.arange(15, dtype=np.float64).reshape(3, 5)
        mem = UserMemory(np.array([5, 2, 7]), history)
        updated = memory_update(mem, 0, state, excluded, S2=0, tau=1.0, rng=np.random.default_rng(0))
        self.assertEqual(sorted(updated.candidates.tolist()), [2, 5, 7])
        for item, row in zip([5, 2, 7], history):
            slot = updated.candidates.tolist().index(item)
            np.testing.assert_array_equal(updated.score_history[slot], row)

    def test_memory_update_places_noise_in_last_slot(self):
        state = fixed_score_state(np.zeros(12))
        ds = dataset_from_pairs(1, 12, [(0, 0)])
        excluded = PositiveIndex.from_dataset(ds, extra={0: {9}})
        mem = UserMemory(np.array([1, 2, 9]), empty_history(3), noise_slot=9)
        noise_window = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        updated = memory_update(mem, 0, state, excluded, S2=5, tau=1.0, rng=np.random.default_rng(3),
                                active_noise=[9], noise_history={9: noise_window})
        self.assertEqual(updated.noise_slot, 9)
        self.assertEqual(int(updated.candidates[-1]), 9)
        np.testing.assert_array_equal(updated.score_history[-1], noise_window)
        self.assertNotIn(9, updated.candidates[:-1].tolist())
        self.assertNotIn(0, updated.candidates.tolist())
        self.assertEqual(len(set(updated.candidates.tolist())), 3)


class BaselineSamplerTests(SimpleTestCase):
    def setUp(self):
        self.ds = dataset_from_pairs(3, 8, [(0, 0), (0, 1), (1, 1), (1, 2), (1, 3), (2, 1)])
        self.positives = PositiveIndex.from_dataset(self.ds)

    def test_uniform_avoids_positives(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            self.assertNotIn(sample_uniform(0, self.positives, rng), (0, 1))

    def test_popularity_distribution(self):
        weights = self.ds.item_popularity().astype(np.float64) ** 0.75
        weights[4:] = [1.0, 2.0, 3.0, 4.0]
        rng = np.random.default_rng(1)
        drawn = draw_popularity(np.zeros(50_000, dtype=np.int64), self.positives, weights, rng)
        counts = np.bincount(drawn, minlength=8)
        self.assertEqual(counts[0] + counts[1], 0)
        allowed = np.arange(2, 8)
        expected = weights[allowed] / weights[allowed].sum() * drawn.size
        keep = expected > 0
        self.assertEqual(counts[allowed][~keep].sum(), 0)
        self.assertGreater(chisquare(counts[allowed][keep], expected[keep]).pvalue, 0.01)

    def test_single_draw_helpers(self):
        rng = np.random.default_rng(4)
        # Only items 2 and 3 have train interactions among user 0's candidates
        drawn = {sample_popularity(0, self.positives, self.ds.item_popularity(), rng) for _ in range(200)}
        self.assertEqual(drawn, {2, 3})
        state = fixed_score_state(np.array([9.0, 9.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), num_users=3)
        self.assertEqual(sample_rank_based(0, state, self.positives, 0.05, rng), 2)

    def test_rank_based_distribution(self):
        state = fixed_score_state(np.array([9.0, 9.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), num_users=3)
        rng = np.random.default_rng(2)
        drawn = draw_rank_based(np.zeros(20_000, dtype=np.int64), state, self.positives, 2.0, rng,
                                pool_size=0)
        counts = np.bincount(drawn, minlength=8)[2:]
        weights = np.exp(-np.arange(1, 7) / 2.0)
        expected = weights / weights.sum() * drawn.size
        self.assertGreater(chisquare(counts, expected).pvalue, 0.01)

    def test_hard_sampler(self):
        state = fixed_score_state(np.array([1.0, 9.0, 5.0, 4.0, 8.0, 2.0, 1.0, 0.0]), num_users=3)
        rng = np.random.default_rng(3)
        # D covering the whole candidate set picks the global argmax
        self.assertEqual(sample_hard_D(1, state, self.positives, 10, rng), 4)
        drawn = draw_hard(np.zeros(2000, dtype=np.int64), state, self.positives, 1, rng)
        self.assertEqual(set(drawn.tolist()), set(range(2, 8)))
        with self.assertRaises(ConfigurationError):
            sample_hard_D(0, state, self.positives, 0, rng)

    def test_build_sampler_checks_candidates(self):
        ds = dataset_from_pairs(1, 2, [(0, 0), (0, 1)])
        with self.assertRaises(NoCandidateError):
            build_sampler(SamplerConfig(strategy='uniform'), ds, np.random.default_rng(0))


class SRNSSamplerTests(SimpleTestCase):
    def setUp(self):
        self.ds = toy_dataset(num_users=8, num_items=40, per_user=10, test_fraction=0.3)
        self.hyper = TrainHyper(embedding_dim=4)
        self.state = init(self.ds.num_users, self.ds.num_items, self.hyper, seed=0)
        self.pairs = self.ds.train_pairs
        self.idx = np.arange(self.ds.num_train)

    def build(self, noise=None, **kwargs):
        config = SamplerConfig(**{'S1': 4, 'S2': 4, **kwargs})
        return build_sampler(config, self.ds, np.random.default_rng(5), noise=noise)

    def run_epoch(self, sampler, epoch, rng):
        negatives = sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, epoch, rng)
        sampler.on_epoch_end(self.state, epoch)
        return negatives

    def test_negatives_and_memories_are_valid(self):
        sampler = self.build()
        self.assertIsInstance(sampler, SRNSSampler)
        rng = np.random.default_rng(0)
        before = metrics.memory_refreshes_total._value.get()
        for epoch in range(1, 4):
            negatives = self.run_epoch(sampler, epoch, rng)
            self.assertFalse(sampler.positives.contains(self.pairs[:, 0], negatives).any())
            self.assertFalse(duplicate_mask(sampler.candidates).any())
        self.assertEqual(metrics.memory_refreshes_total._value.get() - before, 3 * self.ds.num_users)
        # Three snapshots: the two oldest window columns are still padding
        self.assertTrue(np.isnan(sampler.history[..., :2]).all())
        self.assertFalse(np.isnan(sampler.positive_history[:, 2:]).any())

    def test_lazy_update_skips_refresh(self):
        sampler = self.build(E=2, stale_pick='uniform')
        rng = np.random.default_rng(1)
        self.run_epoch(sampler, 1, rng)
        memory = sampler.candidates.copy()
        negatives = self.run_epoch(sampler, 2, rng)
        np.testing.assert_array_equal(sampler.candidates, memory)
        rows = memory[self.pairs[:, 0]]
        self.assertTrue((rows == negatives[:, None]).any(axis=1).all())
        self.assertTrue(sampler.is_refresh_epoch(3))

    def test_noise_slot(self):
        fns = build_false_negative_set(self.ds, 0.5, 1.0, seed=2)
        sampler = self.build(noise=fns)
        rng = np.random.default_rng(2)
        self.run_epoch(sampler, 1, rng)
        for u in range(self.ds.num_users):
            memory = sampler.memory_of(u)
            if fns.active_per_user.get(u):
                self.assertIn(memory.noise_slot, fns.active_per_user[u])
                self.assertNotIn(memory.noise_slot, memory.candidates[:-1].tolist())
            else:
                self.assertIsNone(memory.noise_slot)
            self.assertFalse(set(memory.candidates.tolist()) & self.ds.per_user_positives[u])

    def test_var_set_pruning(self):
        sampler = self.build(var_set_size=12)
        rng = np.random.default_rng(3)
        first = sampler.var_set.items.copy()
        for u in range(self.ds.num_users):
            items = sampler.var_set.per_user(u)
            self.assertEqual(len(set(items.tolist())), 12)
            self.assertFalse(set(items.tolist()) & self.ds.per_user_positives[u])
        old_memory = sampler.candidates.copy()
        sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, 1, rng)
        for u in range(self.ds.num_users):
            allowed = set(old_memory[u].tolist()) | set(first[u].tolist())
            self.assertTrue(set(sampler.candidates[u].tolist()) <= allowed)

    def test_var_set_draws_carry_full_window(self):
        sampler = self.build(var_set_size=12)
        rng = np.random.default_rng(3)
        first = sampler.var_set
        self.assertIs(sampler.pending_var_set, first)
        for epoch in range(1, 6):
            self.run_epoch(sampler, epoch, rng)
        # The set drawn at start has five logged epochs when it feeds epoch 6
        self.assertIs(sampler.var_set, first)
        self.assertFalse(np.isnan(first.history).any())
        self.assertTrue(np.isnan(sampler.pending_var_set.history).all())
        sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, 6, rng)
        self.assertFalse(np.isnan(sampler.history).any())

        second = sampler.pending_var_set
        sampler.on_epoch_end(self.state, 6)
        for epoch in range(7, 11):
            self.run_epoch(sampler, epoch, rng)
        self.assertIs(sampler.var_set, second)
        self.assertFalse(np.isnan(second.history).any())
        self.assertIsNot(sampler.pending_var_set, second)
        sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, 11, rng)
        self.assertFalse(np.isnan(sampler.history).any())

    def test_epoch_snapshot_matches_an_independent_log(self):
        train = [(0, 0), (0, 1), (1, 2), (1, 3), (1, 4)]
        ds = dataset_from_pairs(2, 12, train)
        sampler = build_sampler(SamplerConfig(S1=3, S2=3), ds, np.random.default_rng(0))
        rng = np.random.default_rng(8)
        cand_log = {(u, s): [] for u in range(2) for s in range(3)}
        pos_log = {r: [] for r in range(len(train))}
        for epoch in range(1, 8):
            state = fixed_score_state(rng.normal(size=12), num_users=2)
            state.user_embeddings[1] = 2.0
            sampler.on_epoch_end(state, epoch)
            for (u, s), log in cand_log.items():
                log.append(score(state, u, int(sampler.candidates[u, s])))
            for r, (u, i) in enumerate(train):
                pos_log[r].append(score(state, u, i))
            if epoch == 3:
                self.assertTrue(np.isnan(sampler.history[..., :2]).all())
                np.testing.assert_allclose(sampler.history[0, 0, 2:], cand_log[0, 0])
        # Seven snapshots: the first two fell out of the window
        for (u, s), log in cand_log.items():
            np.testing.assert_allclose(sampler.history[u, s], log[-HISTORY_WINDOW:])
        for r, log in pos_log.items():
            np.testing.assert_allclose(sampler.positive_history[r], log[-HISTORY_WINDOW:])
            self.assertNotAlmostEqual(sampler.positive_history[r, 0], log[1])

    def test_stale_selection_ignores_batch_composition(self):
        sampler = self.build(E=3)
        rng = np.random.default_rng(4)
        self.run_epoch(sampler, 1, rng)
        full = sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, 2, rng)
        for _ in range(5):
            batch = rng.permutation(self.idx)[:self.ds.num_train // 3]
            negatives = sampler.sample(batch, self.pairs[batch, 0], self.pairs[batch, 1], self.state, 2, rng)
            np.testing.assert_array_equal(negatives, full[batch])

    def test_dump_memory(self):
        sampler = self.build()
        with tempfile.TemporaryDirectory() as tmp:
            path = sampler.dump_memory(Path(tmp) / 'memory.jsonl')
            lines = path.read_text(encoding='utf-8').splitlines()
        self.assertEqual(len(lines), self.ds.num_users)
        first = json.loads(lines[0])
        self.assertEqual(first['user'], 0)
        self.assertEqual(len(first['candidates']), 4)

    def test_baseline_strategies_build(self):
        for strategy in SamplingStrategy:
            sampler = build_sampler(SamplerConfig(strategy=strategy, S1=4, S2=4, rank_pool=10),
                                    self.ds, np.random.default_rng(0))
            negatives = sampler.sample(self.idx, self.pairs[:, 0], self.pairs[:, 1], self.state, 1,
                                       np.random.default_rng(1))
            self.assertEqual(negatives.shape, (self.ds.num_train,))
            self.assertFalse(sampler.positives.contains(self.pairs[:, 0], negatives).any())
