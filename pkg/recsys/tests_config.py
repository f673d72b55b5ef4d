import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from recsys.config import coerce, env_overrides, load_config, parse_overrides, read_config_file
from recsys.evaluation import Protocol
from recsys.exceptions import ConfigurationError, MissingArtifactError
from recsys.sampler import SamplingStrategy, Schedule

INI = """
[dataset]
path = data/u.data

[train]
epochs = 50
seed = 7

[sampler]
S1 = 10
schedule = flat
"""


class LoadConfigTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.ini = self.dir / 'experiment.ini'
        self.ini.write_text(INI, encoding='utf-8')

    def tearDown(self):
        self.tmp.cleanup()

    def test_defaults(self):
        config = load_config(environ={})
        self.assertEqual(config.dataset.preset, 'ml100k')
        self.assertEqual(config.model.embedding_dim, 8)
        self.assertEqual(config.train.batch_size, 1024)
        self.assertEqual(config.sampler.strategy, SamplingStrategy.SRNS)
        self.assertEqual((config.sampler.S1, config.sampler.S2), (20, 20))
        self.assertEqual(config.sampler.schedule, Schedule.INCREASED)
        self.assertTrue(config.noise.enabled)
        self.assertEqual(config.noise.sigmas, (0.0, 0.2, 0.4, 0.6, 0.8, 1.0))

    def test_ml1m_preset(self):
        config = load_config(preset='ml1m', environ={})
        self.assertEqual(config.dataset.split, 'leave_one_out')
        self.assertEqual(config.dataset.min_user_records, 5)
        self.assertEqual(config.model.embedding_dim, 32)
        self.assertEqual((config.sampler.S1, config.sampler.S2, config.sampler.tau), (8, 64, 10.0))
        self.assertEqual(config.train.protocol, 'sampled100')
        self.assertIsNone(config.noise_config())
        run = config.to_run_config()
        self.assertEqual(run.protocol, Protocol.SAMPLED100)
        self.assertEqual(run.early_stop_patience, 100)

    def test_precedence(self):
        environ = {'SRNS_TRAIN_EPOCHS': '60', 'SRNS_SAMPLER_S1': '12', 'SRNS_TRAIN_SEED': '3'}
        config = load_config(self.ini, overrides=['train.epochs=70'], flags={'train': {'seed': 9, 'epochs': None}},
                             environ=environ)
        self.assertEqual(config.dataset.path, 'data/u.data')
        self.assertEqual(config.sampler.schedule, Schedule.FLAT)
        self.assertEqual(config.sampler.S1, 12)
        self.assertEqual(config.train.epochs, 70)
        self.assertEqual(config.train.seed, 9)

    def test_preset_named_in_file(self):
        self.ini.write_text('[dataset]\npreset = ml1m\n', encoding='utf-8')
        self.assertEqual(load_config(self.ini, environ={}).model.embedding_dim, 32)
        self.assertEqual(load_config(self.ini, preset='ml100k', environ={}).model.embedding_dim, 8)

    @override_settings(SRNS_PRESET='ml1m', SRNS_N_JOBS=3)
    def test_settings_defaults(self):
        config = load_config(environ={})
        self.assertEqual(config.dataset.preset, 'ml1m')
        self.assertEqual(config.train.n_jobs, 3)

    def test_summary_echo_round_trips(self):
        config = load_config(self.ini, overrides=['noise.sigmas=0,0.5,1', 'train.early_stop_patience=5'],
                             environ={})
        summary = self.dir / 'summary.json'
        summary.write_text(json.dumps({'run_id': 'abc', 'config': config.to_dict()}), encoding='utf-8')
        self.assertEqual(load_config(summary, environ={}), config)

    def test_invalid_values(self):
        for override in ('sampler.tau=0', 'sampler.strategy=gan', 'noise.sigma=1.5', 'train.epochs=ten',
                         'dataset.test_fraction=1'):
            with self.assertRaises(ConfigurationError, msg=override):
                load_config(overrides=[override], environ={})

    def test_patience_above_epochs(self):
        with self.assertRaises(ConfigurationError):
            load_config(overrides=['train.epochs=5', 'train.early_stop_patience=6'], environ={})

    def test_unknown_keys(self):
        with self.assertRaises(ConfigurationError):
            load_config(overrides=['sampler.S3=1'], environ={})
        self.ini.write_text('[optimizer]\nlr = 1\n', encoding='utf-8')
        with self.assertRaises(ConfigurationError):
            load_config(self.ini, environ={})
        with self.assertRaises(ConfigurationError):
            load_config(preset='netflix', environ={})

    def test_missing_file(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            load_config(self.dir / 'absent.ini', environ={})
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_run_config(self):
        config = load_config(overrides=['noise.sigma=0.4', 'model.scorer=mlp', 'model.mlp_hidden_layers=1'],
                             environ={})
        run = config.to_run_config(seed=11, sigma=0.8)
        self.assertEqual(run.seed, 11)
        self.assertEqual(run.noise.sigma, 0.8)
        self.assertEqual(run.hyper.mlp_hidden_layers, 1)
        self.assertEqual(config.noise_config().sigma, 0.4)


class ParsingTests(SimpleTestCase):
    def test_coerce(self):
        self.assertIsNone(coerce('train', 'early_stop_patience', 'none'))
        self.assertIs(coerce('sampler', 'inject_noise', 'off'), False)
        self.assertEqual(coerce('noise', 'sigmas', '0, 0.5,1'), [0.0, 0.5, 1.0])
        self.assertEqual(coerce('sampler', 'tau', '2'), 2.0)
        self.assertEqual(coerce('train', 'epochs', 5), 5)
        with self.assertRaises(ConfigurationError):
            coerce('train', 'epochs', '1.5')
        with self.assertRaises(ConfigurationError):
            coerce('train', 'nope', '1')

    def test_env_overrides(self):
        found = env_overrides({'SRNS_SAMPLER_TAU': '2', 'SRNS_SAMPLER_BOGUS': '1', 'OTHER': 'x'})
        self.assertEqual(found, {'sampler': {'tau': '2'}})

    def test_parse_overrides(self):
        self.assertEqual(parse_overrides(['sampler.S1=4', 'train.seed = 2']),
                         {'sampler': {'S1': '4'}, 'train': {'seed': ' 2'}})
        with self.assertRaises(ConfigurationError):
            parse_overrides(['S1=4'])

    def test_read_ini_keeps_key_case(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'c.ini'
            path.write_text('[sampler]\nS1 = 3\n', encoding='utf-8')
            self.assertEqual(read_config_file(path), {'sampler': {'S1': '3'}})
