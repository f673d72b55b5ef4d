"""
Experiment configuration.

Values are merged from, lowest precedence first:

1. a dataset preset (``ml100k`` or ``ml1m``),
2. an INI file with sections dataset, model, train, sampler, noise, output
   (or the ``config`` object of a run summary JSON),
3. environment variables ``SRNS_<SECTION>_<KEY>``,
4. ``section.key=value`` overrides and dedicated command-line flags.

The merged mapping is validated against ``CONFIG_SCHEMA`` and turned into
typed sections.
"""
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union
import copy
import json
import os

import jsonschema
from django.conf import settings

from .evaluation import Protocol
from .exceptions import ConfigurationError, MissingArtifactError
from .model import ScorerKind, TrainHyper
from .sampler import SamplerConfig
from .trainer import NoiseConfig, RunConfig

_NULLABLE_INT = {'type': ['integer', 'null']}
_NULLABLE_NUMBER = {'type': ['number', 'null']}
_PROBABILITY = {'type': 'number', 'minimum': 0, 'maximum': 1}

CONFIG_SCHEMA = {
    'type': 'object',
    'additionalProperties': False,
    'properties': {
        'dataset': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'preset': {'type': 'string', 'enum': ['ml100k', 'ml1m']},
                'path': {'type': ['string', 'null']},
                'snapshot': {'type': ['string', 'null']},
                'format': {'type': 'string', 'enum': ['delimited', 'movielens_double_colon']},
                'header': {'type': 'boolean'},
                'positive_threshold': _NULLABLE_NUMBER,
                'min_user_records': {'type': 'integer', 'minimum': 0},
                'split': {'type': 'string', 'enum': ['random', 'leave_one_out']},
                'test_fraction': {'type': 'number', 'exclusiveMinimum': 0, 'exclusiveMaximum': 1},
                'split_seed': {'type': 'integer', 'minimum': 0},
            },
        },
        'model': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'scorer': {'type': 'string', 'enum': ['gmf', 'mlp']},
                'embedding_dim': {'type': 'integer', 'minimum': 1},
                'mlp_hidden_layers': {'type': 'integer', 'minimum': 0},
            },
        },
        'train': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'epochs': {'type': 'integer', 'minimum': 1},
                'early_stop_patience': _NULLABLE_INT,
                'seed': {'type': 'integer', 'minimum': 0},
                'eval_every': {'type': 'integer', 'minimum': 1},
                'learning_rate': {'type': 'number', 'minimum': 0},
                'l2_reg': {'type': 'number', 'minimum': 0},
                'batch_size': {'type': 'integer', 'minimum': 1},
                'adam_beta1': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
                'adam_beta2': {'type': 'number', 'minimum': 0, 'exclusiveMaximum': 1},
                'adam_eps': {'type': 'number', 'exclusiveMinimum': 0},
                'protocol': {'type': 'string', 'enum': ['full', 'sampled100']},
                'tail_window': {'type': 'integer', 'minimum': 1},
                'repeat': {'type': 'integer', 'minimum': 1},
                'n_jobs': {'type': 'integer', 'minimum': 1},
            },
        },
        'sampler': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'strategy': {'type': 'string',
                             'enum': ['uniform', 'popularity', 'rank_based', 'srns', 'hard']},
                'S1': {'type': 'integer', 'minimum': 1},
                'S2': {'type': 'integer', 'minimum': 0},
                'tau': {'type': 'number', 'exclusiveMinimum': 0},
                'alpha': {'type': 'number', 'minimum': 0},
                'T0': {'type': 'integer', 'minimum': 1},
                'schedule': {'type': 'string', 'enum': ['increased', 'flat', 'decreased']},
                'E': {'type': 'integer', 'minimum': 1},
                'lambda_rank': {'type': 'number', 'exclusiveMinimum': 0},
                'difficulty_D': {'type': 'integer', 'minimum': 1},
                'rank_pool': {'type': 'integer', 'minimum': 0},
                'var_set_size': {'type': 'integer', 'minimum': 0},
                'stale_pick': {'type': 'string', 'enum': ['variance', 'uniform']},
                'inject_noise': {'type': 'boolean'},
            },
        },
        'noise': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'enabled': {'type': 'boolean'},
                'flip_fraction': _PROBABILITY,
                'sigma': _PROBABILITY,
                'sigmas': {'type': 'array', 'items': _PROBABILITY, 'minItems': 1},
                'seed': _NULLABLE_INT,
            },
        },
        'output': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'directory': {'type': 'string'},
                'metrics_csv': {'type': 'string'},
                'summary_json': {'type': 'string'},
                'checkpoint': {'type': ['string', 'null']},
                'memory_dump': {'type': ['string', 'null']},
            },
        },
    },
}

SECTIONS = ('dataset', 'model', 'train', 'sampler', 'noise', 'output')

_BASE = {
    'dataset': {
        'path': None,
        'snapshot': None,
        'format': 'delimited',
        'header': False,
        'positive_threshold': 4.0,
        'min_user_records': 0,
        'split': 'random',
        'test_fraction': 0.2,
        'split_seed': 0,
    },
    'model': {'scorer': 'gmf', 'embedding_dim': 8, 'mlp_hidden_layers': 0},
    'train': {
        'epochs': 400,
        'early_stop_patience': None,
        'seed': 0,
        'eval_every': 1,
        'learning_rate': 1e-3,
        'l2_reg': 1e-3,
        'batch_size': 1024,
        'adam_beta1': 0.9,
        'adam_beta2': 0.999,
        'adam_eps': 1e-8,
        'protocol': 'full',
        'tail_window': 50,
        'repeat': 1,
        'n_jobs': 1,
    },
    'sampler': {
        'strategy': 'srns',
        'S1': 20,
        'S2': 20,
        'tau': 1.0,
        'alpha': 20.0,
        'T0': 100,
        'schedule': 'increased',
        'E': 1,
        'lambda_rank': 10.0,
        'difficulty_D': 4,
        'rank_pool': 500,
        'var_set_size': 0,
        'stale_pick': 'variance',
        'inject_noise': True,
    },
    'noise': {
        'enabled': True,
        'flip_fraction': 0.5,
        'sigma': 1.0,
        'sigmas': [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        'seed': None,
    },
    'output': {
        'directory': 'runs',
        'metrics_csv': 'metrics.csv',
        'summary_json': 'summary.json',
        'checkpoint': 'checkpoint.npz',
        'memory_dump': None,
    },
}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'ml100k': {'dataset': {'preset': 'ml100k'}},
    'ml1m': {
        'dataset': {
            'preset': 'ml1m',
            'format': 'movielens_double_colon',
            'min_user_records': 5,
            'split': 'leave_one_out',
        },
        'model': {'embedding_dim': 32},
        'train': {'l2_reg': 1e-2, 'early_stop_patience': 100, 'protocol': 'sampled100'},
        'sampler': {'tau': 10.0, 'alpha': 5.0, 'T0': 50, 'S1': 8, 'S2': 64, 'var_set_size': 3000},
        'noise': {'enabled': False},
    },
}


@dataclass(frozen=True)
class DatasetSection:
    preset: str = 'ml100k'
    path: Optional[str] = None
    snapshot: Optional[str] = None
    format: str = 'delimited'
    header: bool = False
    positive_threshold: Optional[float] = 4.0
    min_user_records: int = 0
    split: str = 'random'
    test_fraction: float = 0.2
    split_seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    scorer: str = 'gmf'
    embedding_dim: int = 8
    mlp_hidden_layers: int = 0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 400
    early_stop_patience: Optional[int] = None
    seed: int = 0
    eval_every: int = 1
    learning_rate: float = 1e-3
    l2_reg: float = 1e-3
    batch_size: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    protocol: str = 'full'
    tail_window: int = 50
    repeat: int = 1
    n_jobs: int = 1


@dataclass(frozen=True)
class NoiseSection:
    enabled: bool = True
    flip_fraction: float = 0.5
    sigma: float = 1.0
    sigmas: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    seed: Optional[int] = None


@dataclass(frozen=True)
class OutputSection:
    directory: str = 'runs'
    metrics_csv: str = 'metrics.csv'
    summary_json: str = 'summary.json'
    checkpoint: Optional[str] = 'checkpoint.npz'
    memory_dump: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    noise: NoiseSection = field(default_factory=NoiseSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Plain JSON-friendly echo; feeding it back through ``load_config`` reproduces this config."""
        echo = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            echo[name] = {k: (v.value if hasattr(v, 'value') else list(v) if isinstance(v, tuple) else v)
                          for k, v in section.items()}
        return echo

    @property
    def hyper(self) -> TrainHyper:
        return TrainHyper(
            embedding_dim=self.model.embedding_dim,
            learning_rate=self.train.learning_rate,
            l2_reg=self.train.l2_reg,
            batch_size=self.train.batch_size,
            adam_beta1=self.train.adam_beta1,
            adam_beta2=self.train.adam_beta2,
            adam_eps=self.train.adam_eps,
            mlp_hidden_layers=self.model.mlp_hidden_layers,
        )

    def noise_config(self, sigma: Optional[float] = None) -> Optional[NoiseConfig]:
        if not self.noise.enabled:
            return None
        return NoiseConfig(
            flip_fraction=self.noise.flip_fraction,
            sigma=self.noise.sigma if sigma is None else sigma,
            seed=self.noise.seed,
        )

    def to_run_config(self, seed: Optional[int] = None, checkpoint_path: Optional[str] = None,
                      sampler: Optional[SamplerConfig] = None,
                      sigma: Optional[float] = None) -> RunConfig:
        return RunConfig(
            epochs=self.train.epochs,
            early_stop_patience=self.train.early_stop_patience,
            seed=self.train.seed if seed is None else seed,
            eval_every=self.train.eval_every,
            hyper=self.hyper,
            sampler=sampler or self.sampler,
            noise=self.noise_config(sigma),
            scorer=ScorerKind(self.model.scorer),
            protocol=Protocol(self.train.protocol),
            tail_window=self.train.tail_window,
            checkpoint_path=checkpoint_path,
        )


def _types(name: str, key: str) -> List[str]:
    entry = CONFIG_SCHEMA['properties'][name]['properties'].get(key)
    if entry is None:
        raise ConfigurationError(f'unknown setting {name}.{key}')
    kind = entry['type']
    return kind if isinstance(kind, list) else [kind]


def coerce(name: str, key: str, raw: Any) -> Any:
    """Turn a string from an INI file, env var or override into the schema type."""
    if not isinstance(raw, str):
        return raw
    types = _types(name, key)
    text = raw.strip()
    if 'null' in types and text.lower() in ('', 'none', 'null'):
        return None
    try:
        if 'boolean' in types:
            if text.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if text.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if 'integer' in types:
            return int(text)
        if 'number' in types:
            return float(text)
        if 'array' in types:
            return [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ConfigurationError(f'invalid value for {name}.{key}: {raw!r}')
    return text


def _merge(target: Dict[str, Dict[str, Any]], source: Mapping[str, Mapping[str, Any]],
           origin: str) -> None:
    for name, values in source.items():
        if name not in SECTIONS:
            raise ConfigurationError(f'{origin}: unknown section [{name}]')
        for key, value in values.items():
            target[name][key] = coerce(name, key, value)


def read_config_file(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    """Sections of an INI file, or the ``config`` echo of a summary JSON."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, 'config file')
    if path.suffix == '.json':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                document = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f'{path}: {exc}')
        config = document.get('config', document)
        if not isinstance(config, dict):
            raise ConfigurationError(f'{path}: config must be an object')
        return config
    parser = ConfigParser()
    parser.optionxform = str
    try:
        parser.read(path, encoding='utf-8')
    except ConfigParserError as exc:
        raise ConfigurationError(f'{path}: {exc}')
    return {name: dict(parser.items(name)) for name in parser.sections()}


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, str]]:
    """``SRNS_<SECTION>_<KEY>`` variables naming a known setting."""
    environ = os.environ if environ is None else environ
    prefix = getattr(settings, 'SRNS_ENV_PREFIX', 'SRNS_')
    found: Dict[str, Dict[str, str]] = {}
    for name in SECTIONS:
        for key in CONFIG_SCHEMA['properties'][name]['properties']:
            variable = f'{prefix}{name}_{key}'.upper()
            if variable in environ:
                found.setdefault(name, {})[key] = environ[variable]
    return found


def parse_overrides(items: Iterable[str]) -> Dict[str, Dict[str, str]]:
    parsed: Dict[str, Dict[str, str]] = {}
    for item in items or ():
        target, sep, value = item.partition('=')
        name, dot, key = target.strip().partition('.')
        if not sep or not dot:
            raise ConfigurationError(f'override must look like section.key=value, got {item!r}')
        parsed.setdefault(name, {})[key] = value
    return parsed


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                overrides: Iterable[str] = (), flags: Optional[Mapping[str, Mapping[str, Any]]] = None,
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Merge every configuration source and validate the result."""
    file_values = read_config_file(path) if path else {}
    env_values = env_overrides(environ)
    override_values = parse_overrides(overrides)

    chosen = (preset
              or override_values.get('dataset', {}).get('preset')
              or env_values.get('dataset', {}).get('preset')
              or file_values.get('dataset', {}).get('preset')
              or getattr(settings, 'SRNS_PRESET', 'ml100k'))
    if chosen not in PRESETS:
        raise ConfigurationError(f'unknown preset {chosen!r}; choose from {sorted(PRESETS)}')

    merged = copy.deepcopy(_BASE)
    merged['output']['directory'] = str(getattr(settings, 'SRNS_OUTPUT_DIR', 'runs'))
    merged['train']['n_jobs'] = int(getattr(settings, 'SRNS_N_JOBS', 1))
    _merge(merged, PRESETS[chosen], f'preset {chosen}')
    _merge(merged, file_values, str(path))
    _merge(merged, env_values, 'environment')
    _merge(merged, override_values, '--set')
    _merge(merged, {k: {kk: vv for kk, vv in v.items() if vv is not None} for k, v in (flags or {}).items()},
           'command line')
    merged['dataset']['preset'] = chosen

    try:
        jsonschema.validate(instance=merged, schema=CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = '.'.join(str(p) for p in exc.absolute_path) or 'config'
        raise ConfigurationError(f'{where}: {exc.message}')

    train = merged['train']
    if train['early_stop_patience'] is not None and train['early_stop_patience'] > train['epochs']:
        raise ConfigurationError('train.early_stop_patience must not exceed train.epochs')

    noise = dict(merged['noise'])
    noise['sigmas'] = tuple(noise['sigmas'])
    return ExperimentConfig(
        dataset=DatasetSection(**merged['dataset']),
        model=ModelSection(**merged['model']),
        train=TrainSection(**merged['train']),
        sampler=SamplerConfig(**merged['sampler']),
        noise=NoiseSection(**noise),
        output=OutputSection(**merged['output']),
    )
