"""
Desk-scale reproduction runs on the real MovieLens files.

Skipped unless the raw files are available:
    SRNS_ML100K_PATH=/data/ml-100k/u.data
    SRNS_ML1M_PATH=/data/ml-1m/ratings.dat

Run with: pytest recsys/tests/test_reproduction.py
The full ML-100k noise runs take about half an hour on a desktop CPU; the
ML-1m comparison takes a few hours.
"""
import os
from dataclasses import replace
from unittest import skipUnless

import numpy as np
from django.test import SimpleTestCase, override_settings

from recsys.config import load_config
from recsys.data import build_false_negative_set
from recsys.diagnostics import run_diagnostics
from recsys.experiments import aggregate, noise_sweep, prepare_dataset, run_repeats
from recsys.sampler import SamplingStrategy
from recsys.trainer import fit_cost_model, lazy_ratio, timing_profile, train

ML100K = os.environ.get('SRNS_ML100K_PATH')
ML1M = os.environ.get('SRNS_ML1M_PATH')


def ml100k_config(*overrides):
    return load_config(preset='ml100k', overrides=list(overrides), flags={'dataset': {'path': ML100K}},
                       environ={})


@skipUnless(ML100K, 'SRNS_ML100K_PATH not set')
@override_settings(SRNS_CAPTURE_ENVIRONMENT=False)
class ML100KTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = ml100k_config()
        cls.ds, _ = prepare_dataset(cls.config)

    def tail_ndcg3(self, config, seeds=5):
        results = run_repeats(self.ds, config, repeat=seeds, n_jobs=seeds)
        return aggregate(results)['test_ndcg3']['mean']

    def test_uniform_loss_decreases(self):
        config = ml100k_config('sampler.strategy=uniform', 'train.epochs=10', 'noise.enabled=false')
        log, _ = train(self.ds, config.to_run_config())
        losses = [m.loss for m in log.epochs]
        self.assertLess(np.mean(losses[5:]), np.mean(losses[:5]))

    def test_variance_based_with_full_noise(self):
        mean = self.tail_ndcg3(ml100k_config('noise.sigma=1.0'))
        self.assertAlmostEqual(mean, 0.406, delta=0.02)

    def test_variance_beats_difficulty_only(self):
        frame = noise_sweep(self.ds, self.config, [0.0, 0.5, 1.0], seeds=5, n_jobs=5)
        for sigma, group in frame.groupby('sigma'):
            by_strategy = group.set_index('strategy')['ndcg3_mean']
            self.assertLess(by_strategy['difficulty_only'], by_strategy['variance_based'], f'sigma={sigma}')

    def test_schedule_ordering(self):
        means = {schedule: self.tail_ndcg3(ml100k_config(f'sampler.schedule={schedule}'))
                 for schedule in ('increased', 'flat', 'decreased')}
        self.assertGreaterEqual(means['increased'], means['flat'])
        self.assertGreaterEqual(means['flat'], means['decreased'])
        self.assertGreaterEqual(means['increased'] - means['decreased'], 0.02)

    def test_diagnostic_trends(self):
        config = ml100k_config('sampler.strategy=uniform', 'noise.enabled=false')
        _, state = train(self.ds, config.to_run_config())
        fns = build_false_negative_set(self.ds, 0.5, 1.0, seed=0)
        report = run_diagnostics(state, self.ds, fns, config.hyper, seed=0)
        lers = [report.ler_by_difficulty[D] for D in (1, 4, 16, 64)]
        self.assertEqual(lers, sorted(lers))
        self.assertLess(report.std_mean_by_class['FN'], report.std_mean_by_class['HN_64'])

    def test_sampling_cost_is_linear_in_memory(self):
        config = ml100k_config('noise.enabled=false')
        base = replace(config.sampler, strategy=SamplingStrategy.SRNS)
        variants = [replace(base, S1=pool // 2, S2=pool // 2) for pool in (8, 16, 32, 64, 128)]
        variants.append(replace(base, S1=32, S2=32, E=2))
        frame = timing_profile(self.ds, config.to_run_config(), variants, epochs=5)
        self.assertGreaterEqual(fit_cost_model(frame)['r2'], 0.9)
        self.assertAlmostEqual(lazy_ratio(frame, 64, 2), 0.5, delta=0.2)


@skipUnless(ML1M, 'SRNS_ML1M_PATH not set')
@override_settings(SRNS_CAPTURE_ENVIRONMENT=False)
class ML1MTests(SimpleTestCase):
    def test_srns_beats_uniform(self):
        config = load_config(preset='ml1m', flags={'dataset': {'path': ML1M}}, environ={})
        ds, _ = prepare_dataset(config)
        scores = {}
        for strategy in ('uniform', 'srns'):
            run = config.to_run_config(sampler=replace(config.sampler, strategy=strategy))
            log, _ = train(ds, run)
            summary = log.summary_metrics(run.tail_window)
            scores[strategy] = summary['test_ndcg1']
        self.assertGreaterEqual(scores['srns'], 1.05 * scores['uniform'])
