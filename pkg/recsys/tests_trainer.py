import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from recsys.exceptions import ConfigurationError
from recsys.model import TrainHyper, init, load_checkpoint
from recsys.sampler import SamplerConfig
from recsys.testing import toy_dataset
from recsys.trainer import (
    METRIC_COLUMNS, NoiseConfig, RunConfig, fit_cost_model, lazy_ratio, metrics_equal, tail_average,
    timing_profile, train,
)

SMALL_SRNS = SamplerConfig(S1=4, S2=4, alpha=5.0, T0=3)


def small_run(**kwargs):
    defaults = dict(epochs=4, seed=1, hyper=TrainHyper(embedding_dim=4, batch_size=16, learning_rate=0.01),
                    sampler=SMALL_SRNS)
    defaults.update(kwargs)
    return RunConfig(**defaults)


class TrainTests(SimpleTestCase):
    def setUp(self):
        self.ds = toy_dataset(num_users=8, num_items=40, per_user=10, test_fraction=0.3)

    def test_same_seed_same_metrics(self):
        run = small_run(noise=NoiseConfig(0.5, 1.0))
        first, state_a = train(self.ds, run)
        second, state_b = train(self.ds, run)
        self.assertTrue(metrics_equal(first.to_frame(), second.to_frame()))
        np.testing.assert_array_equal(state_a.item_embeddings, state_b.item_embeddings)
        other, _ = train(self.ds, run.with_seed(2))
        self.assertFalse(metrics_equal(first.to_frame(), other.to_frame()))

    def test_zero_learning_rate_keeps_initial_weights(self):
        for sampler in (SMALL_SRNS, SamplerConfig(strategy='uniform'), SamplerConfig(strategy='hard')):
            hyper = TrainHyper(embedding_dim=4, batch_size=16, learning_rate=0.0)
            state = init(self.ds.num_users, self.ds.num_items, hyper, seed=0)
            before = state.copy()
            _, after = train(self.ds, small_run(epochs=1, hyper=hyper, sampler=sampler), state=state)
            for name, value in before.parameters().items():
                np.testing.assert_array_equal(after.parameters()[name], value)

    def test_random_split_uses_tail_average(self):
        log, _ = train(self.ds, small_run(epochs=3, early_stop_patience=1))
        frame = log.to_frame()
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(frame['epoch'].tolist(), [1, 2, 3])
        self.assertIsNone(log.best_validation)
        self.assertFalse(log.stopped_early)
        self.assertTrue(frame['val_ndcg1'].isna().all())
        summary = log.summary_metrics(tail_window=2)
        self.assertEqual(summary['aggregation'], 'tail_2')
        self.assertAlmostEqual(summary['test_ndcg3'], frame['test_ndcg3'].iloc[-2:].mean())

    def test_early_stop_bound(self):
        ds = toy_dataset(num_users=10, num_items=40, per_user=10, split='leave_one_out')
        log, _ = train(ds, small_run(epochs=25, early_stop_patience=2))
        best_epoch, best_value = log.best_validation
        self.assertLessEqual(len(log.epochs), best_epoch + 2)
        self.assertEqual(best_value, max(m.val_ndcg1 for m in log.epochs))
        if log.stopped_early:
            self.assertEqual(len(log.epochs), best_epoch + 2)
        summary = log.summary_metrics()
        self.assertEqual(summary['aggregation'], 'best_validation')
        self.assertEqual(summary['epoch'], best_epoch)

    def test_loss_goes_down_with_uniform_sampling(self):
        run = small_run(epochs=10, sampler=SamplerConfig(strategy='uniform'),
                        hyper=TrainHyper(embedding_dim=4, batch_size=16, learning_rate=0.05))
        losses = [m.loss for m in train(self.ds, run)[0].epochs]
        self.assertLess(np.mean(losses[-3:]), losses[0])

    def test_label_error_ratio_column(self):
        noisy, _ = train(self.ds, small_run(epochs=2, noise=NoiseConfig(0.5, 1.0)))
        for m in noisy.epochs:
            self.assertTrue(0.0 <= m.ler <= 1.0)
        clean, _ = train(self.ds, small_run(epochs=2, sampler=SamplerConfig(strategy='uniform')))
        self.assertTrue(all(np.isnan(m.ler) for m in clean.epochs))

    def test_eval_every(self):
        log, _ = train(self.ds, small_run(epochs=5, eval_every=2))
        evaluated = [m.epoch for m in log.epochs if not np.isnan(m.test_ndcg3)]
        self.assertEqual(evaluated, [2, 4, 5])
        self.assertEqual(len(log.wall_clock_per_epoch), 5)
        self.assertTrue(all(s >= 0.0 for s in log.wall_clock_per_epoch))
        for m in log.epochs:
            self.assertLessEqual(m.sampling_seconds + m.snapshot_seconds, m.epoch_seconds)

    def test_checkpoint_and_memory_hook(self):
        seen = []
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.npz'
            log, state = train(self.ds, small_run(epochs=2, checkpoint_path=str(path)),
                               on_epoch=lambda row, sampler: seen.append((row.epoch, sampler.strategy)))
            self.assertEqual(log.checkpoint, str(path))
            np.testing.assert_array_equal(load_checkpoint(path).user_embeddings, state.user_embeddings)
        self.assertEqual([epoch for epoch, _ in seen], [1, 2])

    def test_unsplit_dataset(self):
        ds = toy_dataset()
        ds.split = 'none'
        with self.assertRaises(ConfigurationError):
            train(ds, small_run(epochs=1))


class RunConfigTests(SimpleTestCase):
    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            RunConfig(epochs=0)
        with self.assertRaises(ConfigurationError):
            RunConfig(epochs=5, early_stop_patience=6)
        with self.assertRaises(ConfigurationError):
            RunConfig(cutoffs=(1, 5))
        self.assertEqual(RunConfig(seed=3).with_seed(4).seed, 4)

    def test_tail_average_skips_unevaluated_epochs(self):
        frame = pd.DataFrame({'test_ndcg3': [0.1, np.nan, 0.3, np.nan, 0.5]})
        self.assertAlmostEqual(tail_average(frame, 'test_ndcg3', 2), 0.4)
        self.assertTrue(np.isnan(tail_average(pd.DataFrame({'x': [np.nan]}), 'x')))


class ProfileTests(SimpleTestCase):
    def frame(self):
        pools = [8, 16, 32, 64]
        rows = [{'strategy': 'srns', 'S1': p // 2, 'S2': p // 2, 'pool': p, 'E': 1, 'epochs': 3,
                 'epoch_seconds': 1.0, 'sampling_seconds': 0.5 + 0.01 * p} for p in pools]
        rows.append({'strategy': 'srns', 'S1': 16, 'S2': 16, 'pool': 32, 'E': 4, 'epochs': 4,
                     'epoch_seconds': 1.0, 'sampling_seconds': 0.205})
        rows.append({'strategy': 'uniform', 'S1': 1, 'S2': 0, 'pool': 1, 'E': 1, 'epochs': 3,
                     'epoch_seconds': 1.0, 'sampling_seconds': 9.0})
        return pd.DataFrame(rows)

    def test_fit_cost_model(self):
        fit = fit_cost_model(self.frame())
        self.assertAlmostEqual(fit['slope'], 0.01)
        self.assertAlmostEqual(fit['intercept'], 0.5)
        self.assertAlmostEqual(fit['r2'], 1.0)
        self.assertEqual(fit['points'], 4)
        with self.assertRaises(ConfigurationError):
            fit_cost_model(self.frame().iloc[:1])

    def test_lazy_ratio(self):
        self.assertAlmostEqual(lazy_ratio(self.frame(), 32, 4), 0.25)
        self.assertIsNone(lazy_ratio(self.frame(), 8, 4))

    def test_timing_profile_covers_whole_periods(self):
        ds = toy_dataset()
        variants = [SamplerConfig(S1=2, S2=2), SamplerConfig(S1=2, S2=2, E=2)]
        profile = timing_profile(ds, small_run(), variants, epochs=3)
        self.assertEqual(profile['epochs'].tolist(), [3, 4])
        self.assertEqual(profile['pool'].tolist(), [4, 4])
        self.assertTrue((profile['sampling_seconds'] > 0).all())
        self.assertTrue((profile['snapshot_seconds'] > 0).all())
