"""
Experiment orchestration shared by the management commands.

Loads or prepares the dataset a config points at, runs one training run or
several seeds on worker threads, writes per-run artifacts and aggregates
repeated runs into mean and standard deviation.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import hashlib
import json
import math

import numpy as np
import pandas as pd
from django.conf import settings
from joblib import Parallel, delayed

from .config import ExperimentConfig
from .data import (
    InteractionDataset, build_index, ingest, load_snapshot, sha256_file, split_leave_one_out,
    split_random,
)
from .exceptions import ConfigurationError
from .reproducibility import ReproducibilityCapture
from .sampler import SamplingStrategy, SRNSSampler
from .structured_logging import get_training_logger, log_context
from .trainer import NoiseConfig, RunConfig, RunLog, tail_average, train

logger = get_training_logger()

SUMMARY_METRICS = ('test_ndcg1', 'test_ndcg3', 'test_recall1', 'test_recall3')
SWEEP_COLUMNS = ['sigma', 'strategy', 'ndcg3_mean', 'ndcg3_std', 'recall3_mean', 'recall3_std', 'seeds']


@dataclass
class RunResult:
    seed: int
    log: RunLog
    summary: Dict[str, Any]
    directory: Optional[Path] = None
    artifacts: Dict[str, str] = field(default_factory=dict)


def prepare_dataset(config: ExperimentConfig) -> Tuple[InteractionDataset, str]:
    """Build the split dataset described by the dataset section.

    Returns the dataset and the sha256 of the raw source file.
    """
    section = config.dataset
    if not section.path:
        raise ConfigurationError('dataset.path is required to prepare a dataset')
    records = ingest(section.path, section.format, section.positive_threshold, section.header)
    ds = build_index(records, section.min_user_records)
    if section.split == 'leave_one_out':
        ds = split_leave_one_out(ds)
    else:
        ds = split_random(ds, section.test_fraction, section.split_seed)
    return ds, sha256_file(section.path)


def split_params(config: ExperimentConfig) -> Dict[str, Any]:
    section = config.dataset
    return {
        'format': section.format,
        'positive_threshold': section.positive_threshold,
        'min_user_records': section.min_user_records,
        'split': section.split,
        'test_fraction': section.test_fraction if section.split == 'random' else None,
        'split_seed': section.split_seed,
    }


def load_dataset(config: ExperimentConfig) -> InteractionDataset:
    """The prepared snapshot if one is configured, else a fresh split of the raw file."""
    if config.dataset.snapshot:
        return load_snapshot(config.dataset.snapshot)
    ds, _ = prepare_dataset(config)
    return ds


def jsonable(value: Any) -> Any:
    """Recursively replace NaN and numpy scalars so the value serialises as strict JSON."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def config_digest(echo: Dict[str, Any]) -> str:
    """Stable run identifier: sha256 of the effective config."""
    return hashlib.sha256(json.dumps(jsonable(echo), sort_keys=True).encode('utf-8')).hexdigest()


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(jsonable(payload), f, indent=2, sort_keys=True, allow_nan=False)
        f.write('\n')
    return path


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator='\n')
    return path


def run_single(ds: InteractionDataset, config: ExperimentConfig, run: RunConfig,
               directory: Optional[Union[str, Path]] = None, run_id: Optional[str] = None,
               capture_environment: Optional[bool] = None) -> RunResult:
    """Train one seed and, when ``directory`` is given, write its artifacts there."""
    echo = config.to_dict()
    echo['train'].update(seed=run.seed, repeat=1)
    run_id = run_id or config_digest(echo)[:12]
    directory = Path(directory) if directory is not None else None
    if directory is not None and config.output.checkpoint:
        run = replace(run, checkpoint_path=str(directory / config.output.checkpoint))

    last_sampler = {}

    def keep_sampler(row, sampler):
        last_sampler['sampler'] = sampler

    with log_context(run_id=run_id, seed=run.seed, strategy=run.sampler.strategy.value):
        logger.info(f'Run {run_id} started with seed {run.seed}')
        log, _ = train(ds, run, on_epoch=keep_sampler if config.output.memory_dump else None)
        summary = log.summary_metrics(run.tail_window)
        result = RunResult(seed=run.seed, log=log, summary=summary, directory=directory)
        if directory is None:
            return result

        result.artifacts['metrics_csv'] = str(write_csv(directory / config.output.metrics_csv,
                                                        log.to_frame()))
        if log.checkpoint:
            result.artifacts['checkpoint'] = log.checkpoint
        sampler = last_sampler.get('sampler')
        if isinstance(sampler, SRNSSampler):
            result.artifacts['memory_dump'] = str(sampler.dump_memory(directory / config.output.memory_dump))

        if capture_environment is None:
            capture_environment = getattr(settings, 'SRNS_CAPTURE_ENVIRONMENT', True)
        document = {
            'run_id': run_id,
            'seed': run.seed,
            'config': echo,
            'dataset': ds.summary(),
            'epochs_run': len(log.epochs),
            'stopped_early': log.stopped_early,
            'best_validation': list(log.best_validation) if log.best_validation else None,
            'summary': summary,
            'artifacts': result.artifacts,
            'environment': ReproducibilityCapture.capture_full_metadata(
                run_id, run.seed, include_dependencies=capture_environment),
        }
        write_json(directory / config.output.summary_json, document)
        logger.info(f'Run {run_id} finished', **{k: v for k, v in summary.items() if k != 'aggregation'})
    return result


def run_repeats(ds: InteractionDataset, config: ExperimentConfig, repeat: Optional[int] = None,
                n_jobs: Optional[int] = None, directory: Optional[Union[str, Path]] = None,
                capture_environment: Optional[bool] = None) -> List[RunResult]:
    """Run seeds ``seed .. seed + repeat - 1`` on a thread pool.

    With more than one seed each run writes into ``seed_<s>/`` under
    ``directory``.
    """
    repeat = config.train.repeat if repeat is None else repeat
    n_jobs = config.train.n_jobs if n_jobs is None else n_jobs
    if repeat < 1:
        raise ConfigurationError('repeat must be >= 1')
    base = config.to_run_config()
    directory = Path(directory) if directory is not None else None

    def one(offset: int) -> RunResult:
        seed = base.seed + offset
        target = directory
        if directory is not None and repeat > 1:
            target = directory / f'seed_{seed}'
        with log_context(command='train'):
            return run_single(ds, config, base.with_seed(seed), target,
                              capture_environment=capture_environment)

    if repeat == 1 or n_jobs == 1:
        return [one(offset) for offset in range(repeat)]
    return Parallel(n_jobs=n_jobs, prefer='threads')(delayed(one)(offset) for offset in range(repeat))


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population standard deviation, NaN entries ignored."""
    values = np.asarray([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)
    if values.size == 0:
        return float('nan'), float('nan')
    return float(values.mean()), float(values.std())


def aggregate(results: Sequence[RunResult]) -> Dict[str, Any]:
    """Mean ± std of the headline metrics across seeds."""
    report = {
        'seeds': [r.seed for r in results],
        'aggregation': results[0].summary.get('aggregation') if results else None,
    }
    for name in SUMMARY_METRICS:
        values = [r.summary.get(name, float('nan')) for r in results]
        mean, std = mean_std(values)
        report[name] = {'mean': mean, 'std': std, 'values': values}
    return report


def noise_sweep(ds: InteractionDataset, config: ExperimentConfig, sigmas: Sequence[float],
                seeds: int = 5, n_jobs: Optional[int] = None) -> pd.DataFrame:
    """Tail-average NDCG@3 and Recall@3 for difficulty-only and variance-based SRNS at each sigma.

    Difficulty-only is SRNS with ``alpha = 0``. The false-negative set is
    fixed per seed across sigmas; only its active subset changes.
    """
    if not ds.test:
        raise ConfigurationError('noise sweep needs a dataset with a test split')
    n_jobs = config.train.n_jobs if n_jobs is None else n_jobs
    base = config.to_run_config()
    variance_based = replace(config.sampler, strategy=SamplingStrategy.SRNS)
    strategies = {
        'difficulty_only': replace(variance_based, alpha=0.0),
        'variance_based': variance_based,
    }

    def one(sigma: float, name: str, offset: int) -> Dict[str, Any]:
        seed = base.seed + offset
        noise = NoiseConfig(flip_fraction=config.noise.flip_fraction, sigma=float(sigma),
                            seed=config.noise.seed)
        run = replace(base, seed=seed, sampler=strategies[name], noise=noise, checkpoint_path=None)
        with log_context(command='noise_sweep', sigma=float(sigma), seed=seed, strategy=name):
            log, _ = train(ds, run)
        frame = log.to_frame()
        return {
            'sigma': float(sigma),
            'strategy': name,
            'seed': seed,
            'ndcg3': tail_average(frame, 'test_ndcg3', run.tail_window),
            'recall3': tail_average(frame, 'test_recall3', run.tail_window),
        }

    jobs = [(sigma, name, offset) for sigma in sigmas for name in strategies for offset in range(seeds)]
    if n_jobs == 1:
        outcomes = [one(*job) for job in jobs]
    else:
        outcomes = Parallel(n_jobs=n_jobs, prefer='threads')(delayed(one)(*job) for job in jobs)

    rows = []
    for sigma in sigmas:
        for name in strategies:
            group = [o for o in outcomes if o['sigma'] == float(sigma) and o['strategy'] == name]
            ndcg_mean, ndcg_std = mean_std([o['ndcg3'] for o in group])
            recall_mean, recall_std = mean_std([o['recall3'] for o in group])
            rows.append({
                'sigma': float(sigma),
                'strategy': name,
                'ndcg3_mean': ndcg_mean,
                'ndcg3_std': ndcg_std,
                'recall3_mean': recall_mean,
                'recall3_std': recall_std,
                'seeds': len(group),
            })
            logger.info(f'sigma={sigma} {name}: ndcg@3 {ndcg_mean:.4f} ± {ndcg_std:.4f}')
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)
