import json
import tempfile
from io import StringIO
from pathlib import Path

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from recsys.management.commands.profile import split_pool
from recsys.reproducibility import ReproducibilityCapture
from recsys.testing import write_toy_ratings
from recsys.trainer import TIMING_COLUMNS

SMALL = ['sampler.S1=4', 'sampler.S2=4', 'train.batch_size=32', 'model.embedding_dim=4']


@override_settings(SRNS_CAPTURE_ENVIRONMENT=False)
class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.ratings = write_toy_ratings(self.dir / 'u.data', num_users=10, num_items=50, per_user=12)
        self.out = self.dir / 'runs'

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, name, *args, overrides=SMALL):
        stdout = StringIO()
        options = list(args)
        for item in overrides:
            options += ['--set', item]
        call_command(name, *options, stdout=stdout)
        return stdout.getvalue()

    def test_prepare_then_train_from_snapshot(self):
        output = self.call('prepare', '--data', str(self.ratings), '--output-dir', str(self.out))
        self.assertIn('Users: 10', output)
        self.assertIn('✓ Snapshot written', output)
        snapshot = self.out / 'dataset'
        meta = json.loads((snapshot / 'meta.json').read_text())
        self.assertEqual(meta['params']['split'], 'random')

        output = self.call('train', '--snapshot', str(snapshot), '--epochs', '2', '--output-dir', str(self.out))
        self.assertIn('NDCG@3:', output)
        frame = pd.read_csv(self.out / 'metrics.csv')
        self.assertEqual(frame['epoch'].tolist(), [1, 2])
        summary = json.loads((self.out / 'summary.json').read_text())
        self.assertEqual(summary['config']['sampler']['S1'], 4)
        self.assertEqual(summary['epochs_run'], 2)
        self.assertTrue((self.out / 'checkpoint.npz').exists())
        self.assertIn('srns_epochs_total', (self.out / 'prometheus.prom').read_text())

    def test_identical_runs_write_identical_metrics(self):
        first, second = self.dir / 'a', self.dir / 'b'
        for target in (first, second):
            self.call('train', '--data', str(self.ratings), '--epochs', '2', '--seed', '5',
                      '--output-dir', str(target), '--skip-environment')
        a = pd.read_csv(first / 'metrics.csv').drop(columns=list(TIMING_COLUMNS))
        b = pd.read_csv(second / 'metrics.csv').drop(columns=list(TIMING_COLUMNS))
        pd.testing.assert_frame_equal(a, b)
        run_a = json.loads((first / 'summary.json').read_text())['run_id']
        run_b = json.loads((second / 'summary.json').read_text())['run_id']
        self.assertNotEqual(run_a, '')
        # Output directory is part of the config echo
        self.assertNotEqual(run_a, run_b)

    def test_rerun_from_summary(self):
        self.call('train', '--data', str(self.ratings), '--epochs', '2', '--output-dir', str(self.out))
        first = pd.read_csv(self.out / 'metrics.csv').drop(columns=list(TIMING_COLUMNS))
        summary = self.dir / 'summary.json'
        summary.write_text((self.out / 'summary.json').read_text())
        self.call('train', '--config', str(summary), overrides=[])
        again = pd.read_csv(self.out / 'metrics.csv').drop(columns=list(TIMING_COLUMNS))
        pd.testing.assert_frame_equal(first, again)

    def test_repeat_writes_seed_directories(self):
        output = self.call('train', '--data', str(self.ratings), '--epochs', '1', '--repeat', '2',
                           '--n-jobs', '2', '--output-dir', str(self.out))
        self.assertIn('Seed 0:', output)
        self.assertIn('Seed 1:', output)
        for seed in (0, 1):
            self.assertTrue((self.out / f'seed_{seed}' / 'metrics.csv').exists())
        report = json.loads((self.out / 'aggregate.json').read_text())
        self.assertEqual(report['seeds'], [0, 1])
        self.assertEqual(len(report['test_ndcg3']['values']), 2)

    def test_memory_dump(self):
        self.call('train', '--data', str(self.ratings), '--epochs', '1', '--output-dir', str(self.out),
                  overrides=SMALL + ['output.memory_dump=memory.jsonl'])
        lines = (self.out / 'memory.jsonl').read_text().splitlines()
        self.assertEqual(len(lines), 10)

    def test_noise_sweep(self):
        self.call('noise_sweep', '--data', str(self.ratings), '--epochs', '1', '--sigmas', '0,1',
                  '--seeds', '2', '--output-dir', str(self.out))
        frame = pd.read_csv(self.out / 'noise_sweep.csv')
        self.assertEqual(len(frame), 4)
        self.assertEqual(set(frame['strategy']), {'difficulty_only', 'variance_based'})
        self.assertTrue((frame['seeds'] == 2).all())

    def test_profile(self):
        self.call('profile', '--data', str(self.ratings), '--pools', '4,8', '--lazy-periods', '2',
                  '--profile-epochs', '2', '--output-dir', str(self.out))
        frame = pd.read_csv(self.out / 'profile.csv')
        self.assertEqual(frame['pool'].tolist(), [4, 4, 8, 8])
        self.assertEqual(frame['E'].tolist(), [1, 2, 1, 2])
        fit = json.loads((self.out / 'profile_fit.json').read_text())
        self.assertEqual(fit['fit']['points'], 2)
        self.assertIn('pool=4,E=2', fit['lazy_ratio'])

    def test_analyze_after_train(self):
        self.call('train', '--data', str(self.ratings), '--epochs', '2', '--output-dir', str(self.out))
        output = self.call('analyze', '--data', str(self.ratings), '--difficulties', '1,4',
                           '--probes', '50', '--output-dir', str(self.out))
        self.assertIn('D=4: LER', output)
        ler = pd.read_csv(self.out / 'ler_by_difficulty.csv')
        self.assertEqual(ler['difficulty'].tolist(), [1, 4])
        self.assertEqual(list(pd.read_csv(self.out / 'ccdf.csv').columns), ['x', 'ccdf'])
        self.assertTrue((self.out / 'diagnostics.csv').exists())

    def test_missing_input_exits_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('train', '--data', str(self.dir / 'absent.data'), '--output-dir', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)
        with self.assertRaises(CommandError) as ctx:
            self.call('train', '--data', str(self.ratings), '--output-dir', str(self.out),
                      overrides=['sampler.tau=-1'])
        self.assertEqual(ctx.exception.returncode, 2)
        garbled = self.dir / 'garbled.data'
        garbled.write_bytes(b'1\t\xff\xfe\t5\t2\n')
        with self.assertRaises(CommandError) as ctx:
            self.call('prepare', '--data', str(garbled), '--output-dir', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_analyze_without_checkpoint(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('analyze', '--data', str(self.ratings), '--output-dir', str(self.out))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_split_pool(self):
        self.assertEqual(split_pool(8, 20, 20), (4, 4))
        self.assertEqual(split_pool(1, 20, 20), (1, 0))
        self.assertEqual(split_pool(9, 8, 64), (1, 8))


class ReproducibilityTests(SimpleTestCase):
    def test_metadata_binds_seed_to_run(self):
        metadata = ReproducibilityCapture.capture_full_metadata('abc123', 7, include_dependencies=False)
        self.assertEqual(metadata['dependency_hash'], 'skipped')
        self.assertEqual(metadata['seed'], 7)
        self.assertEqual(metadata['seed_binding'], ReproducibilityCapture.bind_seed_to_run('abc123', 7))
        self.assertIn('numpy', metadata['libraries'])
