"""Mini-batch training loop, early stopping and sampling-cost profiling."""
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from . import metrics
from .data import FalseNegativeSet, InteractionDataset, PositiveIndex, build_false_negative_set
from .evaluation import DEFAULT_CUTOFFS, Protocol, RankingEvaluator
from .exceptions import ConfigurationError
from .metrics import TimedOperation
from .model import ModelState, ScorerKind, TrainHyper, grad_and_step, init, save_checkpoint
from .sampler import NegativeSampler, SamplerConfig, SamplingStrategy, build_sampler
from .structured_logging import get_training_logger, log_context

logger = get_training_logger()

METRIC_COLUMNS = [
    'epoch', 'loss', 'val_ndcg1', 'test_ndcg1', 'test_ndcg3', 'test_recall3', 'ler',
    'epoch_seconds', 'test_recall1', 'sampling_seconds', 'snapshot_seconds',
]
TIMING_COLUMNS = ('epoch_seconds', 'sampling_seconds', 'snapshot_seconds')


@dataclass(frozen=True)
class NoiseConfig:
    flip_fraction: float = 0.5
    sigma: float = 1.0
    # Defaults to the run seed
    seed: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 400
    early_stop_patience: Optional[int] = None
    seed: int = 0
    eval_every: int = 1
    hyper: TrainHyper = field(default_factory=TrainHyper)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    noise: Optional[NoiseConfig] = None
    scorer: ScorerKind = ScorerKind.GMF
    protocol: Protocol = Protocol.FULL
    cutoffs: Tuple[int, ...] = DEFAULT_CUTOFFS
    tail_window: int = 50
    checkpoint_path: Optional[str] = None
    evaluate: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'scorer', ScorerKind(self.scorer))
        object.__setattr__(self, 'protocol', Protocol(self.protocol))
        if self.epochs < 1:
            raise ConfigurationError(f'epochs must be >= 1, got {self.epochs}')
        if self.eval_every < 1:
            raise ConfigurationError('eval_every must be >= 1')
        if self.early_stop_patience is not None and not 1 <= self.early_stop_patience <= self.epochs:
            raise ConfigurationError('early_stop_patience must lie in [1, epochs]')
        if not {1, 3} <= set(self.cutoffs):
            raise ConfigurationError('cutoffs must include 1 and 3')
        if self.tail_window < 1:
            raise ConfigurationError('tail_window must be >= 1')

    def with_seed(self, seed: int) -> 'RunConfig':
        return replace(self, seed=seed)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    val_ndcg1: float = float('nan')
    test_ndcg1: float = float('nan')
    test_ndcg3: float = float('nan')
    test_recall3: float = float('nan')
    ler: float = float('nan')
    epoch_seconds: float = 0.0
    test_recall1: float = float('nan')
    # Negative draws only; the end-of-epoch score snapshot is timed apart
    sampling_seconds: float = 0.0
    snapshot_seconds: float = 0.0


@dataclass
class RunLog:
    seed: int
    epochs: List[EpochMetrics] = field(default_factory=list)
    best_validation: Optional[Tuple[int, float]] = None
    stopped_early: bool = False
    checkpoint: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in self.epochs], columns=METRIC_COLUMNS)

    @property
    def wall_clock_per_epoch(self) -> List[float]:
        return [m.epoch_seconds for m in self.epochs]

    def summary_metrics(self, tail_window: int = 50) -> Dict[str, Any]:
        """Headline test metrics.

        With a validation split: test metrics at the best validation epoch.
        Without: the mean over the last ``tail_window`` evaluated epochs.
        """
        frame = self.to_frame()
        if self.best_validation is not None:
            row = frame[frame['epoch'] == self.best_validation[0]].iloc[0]
            return {
                'aggregation': 'best_validation',
                'epoch': int(row['epoch']),
                'val_ndcg1': float(row['val_ndcg1']),
                'test_ndcg1': float(row['test_ndcg1']),
                'test_ndcg3': float(row['test_ndcg3']),
                'test_recall1': float(row['test_recall1']),
                'test_recall3': float(row['test_recall3']),
            }
        return {
            'aggregation': f'tail_{tail_window}',
            **{name: tail_average(frame, name, tail_window)
               for name in ('test_ndcg1', 'test_ndcg3', 'test_recall1', 'test_recall3')},
        }


def tail_average(frame: pd.DataFrame, column: str, window: int = 50) -> float:
    """Mean of ``column`` over the last ``window`` rows where it was evaluated."""
    values = frame[column].dropna()
    if values.empty:
        return float('nan')
    return float(values.iloc[-window:].mean())


def seed_streams(seed: int) -> Dict[str, np.random.Generator]:
    """Independent generators for initialisation, shuffling and sampling."""
    init_ss, shuffle_ss, sampler_ss = np.random.SeedSequence(seed).spawn(3)
    return {
        'init': np.random.default_rng(init_ss),
        'shuffle': np.random.default_rng(shuffle_ss),
        'sampler': np.random.default_rng(sampler_ss),
    }


def epoch_snapshot(sampler: NegativeSampler, state: ModelState, epoch: int) -> None:
    """Record epoch-end scores into the sampler's history windows."""
    sampler.on_epoch_end(state, epoch)


def train(ds: InteractionDataset, run: RunConfig, state: Optional[ModelState] = None,
          fns: Optional[FalseNegativeSet] = None,
          on_epoch: Optional[Callable[[EpochMetrics, NegativeSampler], None]] = None,
          ) -> Tuple[RunLog, ModelState]:
    """Train a model on ``ds`` and return its per-epoch log and final state.

    Each epoch shuffles the train pairs, draws one negative per positive with
    the configured sampler, applies one Adam step per batch, snapshots scores
    for the sampler's history, then evaluates. Early stopping watches
    validation NDCG@1 and is only active when the dataset has a validation
    split and a patience is configured.
    """
    if not ds.is_split:
        raise ConfigurationError('training needs a split dataset')
    if ds.num_train == 0:
        raise ConfigurationError('dataset has no train pairs')
    streams = seed_streams(run.seed)
    hyper = run.hyper
    strategy = run.sampler.strategy.value

    if state is None:
        state = init(ds.num_users, ds.num_items, hyper, run.scorer, seed=streams['init'])
    if fns is None and run.noise is not None and ds.test:
        noise_seed = run.seed if run.noise.seed is None else run.noise.seed
        fns = build_false_negative_set(ds, run.noise.flip_fraction, run.noise.sigma, noise_seed)

    positives = PositiveIndex.from_dataset(ds)
    sampler = build_sampler(run.sampler, ds, streams['sampler'], positives=positives, noise=fns)
    evaluator = RankingEvaluator(ds, run.protocol, seed=run.seed, cutoffs=run.cutoffs)
    has_validation = bool(ds.validation)
    early_stop = has_validation and run.early_stop_patience is not None
    fn_keys = fns.keys() if fns is not None and fns.total_size else None

    log = RunLog(seed=run.seed)
    pairs = ds.train_pairs
    n = pairs.shape[0]
    batch = hyper.batch_size
    best_epoch, best_value = 0, -np.inf

    for epoch in range(1, run.epochs + 1):
        with log_context(epoch=epoch, strategy=strategy, seed=run.seed):
            started = time.perf_counter()
            order = streams['shuffle'].permutation(n)
            sampling_seconds = 0.0
            loss_sum = 0.0
            fn_hits = 0
            for b, start in enumerate(range(0, n, batch)):
                idx = order[start:start + batch]
                users, pos_items = pairs[idx, 0], pairs[idx, 1]
                with TimedOperation() as timer:
                    negatives = sampler.sample(idx, users, pos_items, state, epoch, streams['sampler'])
                sampling_seconds += timer.elapsed
                state, loss = grad_and_step(state, users, pos_items, negatives, hyper,
                                            context={'epoch': epoch, 'batch': b})
                loss_sum += loss * idx.size
                if fn_keys is not None:
                    fn_hits += int(_contains(fn_keys, users * ds.num_items + negatives).sum())
                metrics.batches_total.labels(strategy=strategy).inc()
                if logger.isEnabledFor(logging.DEBUG):
                    logger.debug(f'Batch {b} loss {loss:.6f}', batch=b, loss=loss)

            with TimedOperation() as snapshot_timer:
                epoch_snapshot(sampler, state, epoch)
            epoch_seconds = time.perf_counter() - started

            row = EpochMetrics(
                epoch=epoch,
                loss=loss_sum / n,
                ler=fn_hits / n if fn_keys is not None else float('nan'),
                epoch_seconds=epoch_seconds,
                sampling_seconds=sampling_seconds,
                snapshot_seconds=snapshot_timer.elapsed,
            )
            if run.evaluate and (epoch % run.eval_every == 0 or epoch == run.epochs):
                _evaluate_into(row, evaluator, state, has_validation)
            log.epochs.append(row)
            metrics.record_epoch(
                strategy, epoch_seconds, sampling_seconds,
                ler=None if fn_keys is None else row.ler,
                val_ndcg1=None if np.isnan(row.val_ndcg1) else row.val_ndcg1,
            )
            logger.info(
                f'Epoch {epoch}: loss {row.loss:.5f} test ndcg@3 {row.test_ndcg3:.4f}',
                loss=row.loss, val_ndcg1=row.val_ndcg1, test_ndcg3=row.test_ndcg3,
                ler=row.ler, seconds=round(epoch_seconds, 3),
            )
            if on_epoch is not None:
                on_epoch(row, sampler)

            if has_validation and not np.isnan(row.val_ndcg1) and row.val_ndcg1 > best_value:
                best_epoch, best_value = epoch, row.val_ndcg1
                log.best_validation = (best_epoch, float(best_value))
            elif early_stop and best_epoch and epoch - best_epoch >= run.early_stop_patience:
                log.stopped_early = True
                logger.info(f'Early stop at epoch {epoch}; best validation epoch {best_epoch}')
                break

    if run.checkpoint_path:
        log.checkpoint = str(save_checkpoint(state, run.checkpoint_path, hyper))
    return log, state


def _contains(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    pos = np.minimum(np.searchsorted(sorted_keys, query), sorted_keys.size - 1)
    return sorted_keys[pos] == query


def _evaluate_into(row: EpochMetrics, evaluator: RankingEvaluator, state: ModelState,
                   has_validation: bool) -> None:
    test = evaluator.evaluate(state, 'test')
    row.test_ndcg1 = test.get('ndcg@1', float('nan'))
    row.test_ndcg3 = test.get('ndcg@3', float('nan'))
    row.test_recall1 = test.get('recall@1', float('nan'))
    row.test_recall3 = test.get('recall@3', float('nan'))
    if has_validation:
        row.val_ndcg1 = evaluator.evaluate(state, 'validation').get('ndcg@1', float('nan'))


def timing_profile(ds: InteractionDataset, run: RunConfig, variants: Sequence[SamplerConfig],
                   epochs: int = 3) -> pd.DataFrame:
    """Mean per-epoch wall-clock and sampling seconds for each sampler variant.

    Every variant trains from the same seed with evaluation switched off. Runs
    cover a whole number of lazy-update periods so E variants are comparable.
    """
    rows = []
    for variant in variants:
        length = -(-epochs // variant.E) * variant.E
        profile_run = replace(run, sampler=variant, epochs=length, evaluate=False,
                              early_stop_patience=None, checkpoint_path=None)
        with log_context(command='profile', strategy=variant.strategy.value):
            log, _ = train(ds, profile_run)
        frame = log.to_frame()
        rows.append({
            'strategy': variant.strategy.value,
            'S1': variant.S1,
            'S2': variant.S2,
            'pool': variant.S1 + variant.S2,
            'E': variant.E,
            'epochs': length,
            'epoch_seconds': float(frame['epoch_seconds'].mean()),
            'sampling_seconds': float(frame['sampling_seconds'].mean()),
            'snapshot_seconds': float(frame['snapshot_seconds'].mean()),
        })
        logger.info(f'Profiled {variant.strategy.value} S1+S2={variant.S1 + variant.S2} E={variant.E}')
    return pd.DataFrame(rows)


def fit_cost_model(profile: pd.DataFrame) -> Dict[str, float]:
    """Least-squares fit of sampling seconds against S1 + S2 over SRNS rows with E = 1."""
    rows = profile[(profile['strategy'] == SamplingStrategy.SRNS.value) & (profile['E'] == 1)]
    if len(rows) < 2:
        raise ConfigurationError('fitting the cost model needs at least two SRNS pool sizes with E = 1')
    X = rows[['pool']].to_numpy(dtype=np.float64)
    y = rows['sampling_seconds'].to_numpy(dtype=np.float64)
    model = LinearRegression().fit(X, y)
    return {
        'slope': float(model.coef_[0]),
        'intercept': float(model.intercept_),
        'r2': float(model.score(X, y)),
        'points': int(len(rows)),
    }


def lazy_ratio(profile: pd.DataFrame, pool: int, E: int) -> Optional[float]:
    """Sampling time of period ``E`` relative to ``E = 1`` at the same pool size."""
    rows = profile[(profile['strategy'] == SamplingStrategy.SRNS.value) & (profile['pool'] == pool)]
    base = rows[rows['E'] == 1]['sampling_seconds']
    lazy = rows[rows['E'] == E]['sampling_seconds']
    if base.empty or lazy.empty or base.iloc[0] == 0:
        return None
    return float(lazy.iloc[0] / base.iloc[0])


def metrics_equal(a: pd.DataFrame, b: pd.DataFrame) -> bool:
    """Compare two metrics tables ignoring the wall-clock columns."""
    columns = [c for c in a.columns if c not in TIMING_COLUMNS]
    return a[columns].equals(b[columns])
