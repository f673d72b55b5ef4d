"""False-negative diagnostics for a trained model.

Three views of how false negatives differ from ordinary negatives:

* CCDF of P_pos over uniformly drawn negatives;
* label error ratio of hard negatives as their difficulty D grows;
* prediction stability: probe pairs of each class (uniform negatives, hard
  negatives, false negatives) are tracked while training continues for a few
  epochs on a copy of the model, and their P_pos histories are summarised by
  median std/mean.
"""
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import FalseNegativeSet, InteractionDataset, PositiveIndex
from .evaluation import DEFAULT_THRESHOLDS, DiagnosticReport, ccdf_ppos, std_mean_report
from .exceptions import ConfigurationError
from .model import ModelState, TrainHyper, grad_and_step, score_pairs
from .sampler import HISTORY_WINDOW, draw_hard
from .structured_logging import get_evaluation_logger

logger = get_evaluation_logger()

DEFAULT_DIFFICULTIES = (1, 4, 16, 64)


def _probe_positives(ds: InteractionDataset, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One random train positive per probe user."""
    order = np.argsort(ds.train_pairs[:, 0], kind='stable')
    counts = np.bincount(ds.train_pairs[:, 0], minlength=ds.num_users)
    starts = np.concatenate([[0], np.cumsum(counts)])[users]
    offsets = np.floor(rng.random(users.size) * counts[users]).astype(np.int64)
    return ds.train_pairs[order[starts + offsets], 1]


def ler_by_difficulty(state: ModelState, ds: InteractionDataset, fns: FalseNegativeSet,
                      difficulties: Sequence[int], rng: np.random.Generator,
                      batch_size: int = 1024) -> Dict[int, list]:
    """Per-batch label error ratio of hard-D negatives over one pass of the train pairs."""
    positives = PositiveIndex.from_dataset(ds)
    users = ds.train_pairs[:, 0]
    per_batch: Dict[int, list] = {}
    for D in difficulties:
        ratios = []
        for start in range(0, users.size, batch_size):
            block = users[start:start + batch_size]
            selected = draw_hard(block, state, positives, D, rng)
            ratios.append(float(fns.contains(block, selected).mean()))
        per_batch[int(D)] = ratios
        logger.info(f'Hard negatives D={D}: LER {np.mean(ratios):.4f}')
    return per_batch


def run_diagnostics(state: ModelState, ds: InteractionDataset, fns: FalseNegativeSet,
                    hyper: TrainHyper, seed: int = 0,
                    difficulties: Sequence[int] = DEFAULT_DIFFICULTIES,
                    hard_difficulty: Optional[int] = None,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                    probes: int = 2000, window: int = HISTORY_WINDOW) -> DiagnosticReport:
    """Build a :class:`DiagnosticReport`; ``state`` itself is left untouched."""
    if fns.total_size == 0:
        raise ConfigurationError('diagnostics need a non-empty false-negative set')
    rng = np.random.default_rng(seed)
    positives = PositiveIndex.from_dataset(ds)
    report = DiagnosticReport()

    pair_rows = rng.integers(0, ds.num_train, size=probes)
    un_users = ds.train_pairs[pair_rows, 0]
    un_items = positives.draw_negatives(un_users, rng)
    report.ccdf = ccdf_ppos(state, ds, un_users, un_items, thresholds)

    report.ler_per_batch = ler_by_difficulty(state, ds, fns, difficulties, rng, hyper.batch_size)
    report.ler_by_difficulty = {D: float(np.mean(r)) for D, r in report.ler_per_batch.items()}

    D = hard_difficulty or max(difficulties)
    hn_users = ds.train_pairs[rng.integers(0, ds.num_train, size=probes), 0]
    hn_items = draw_hard(hn_users, state, positives, D, rng)
    fn_pairs = np.array([(u, i) for u, items in sorted(fns.per_user.items()) for i in sorted(items)],
                        dtype=np.int64).reshape(-1, 2)
    if fn_pairs.shape[0] > probes:
        fn_pairs = fn_pairs[np.sort(rng.choice(fn_pairs.shape[0], size=probes, replace=False))]
    # FN probes need a train positive to compare against
    fn_pairs = fn_pairs[positives.counts[fn_pairs[:, 0]] > 0]

    classes = {
        'UN': (un_users, un_items),
        f'HN_{D}': (hn_users, hn_items),
        'FN': (fn_pairs[:, 0], fn_pairs[:, 1]),
    }
    anchors = {name: _probe_positives(ds, users, rng) for name, (users, _) in classes.items()}
    histories = {name: np.empty((users.size, window)) for name, (users, _) in classes.items()}

    continued = state.copy()
    pairs = ds.train_pairs
    for epoch in range(window):
        order = rng.permutation(ds.num_train)
        for start in range(0, order.size, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            grad_and_step(continued, pairs[idx, 0], pairs[idx, 1],
                          positives.draw_negatives(pairs[idx, 0], rng), hyper,
                          context={'diagnostic_epoch': epoch + 1})
        for name, (users, items) in classes.items():
            r_ui = score_pairs(continued, users, anchors[name])
            histories[name][:, epoch] = expit(score_pairs(continued, users, items) - r_ui)

    report.std_mean_by_class = std_mean_report(histories)
    report.p50_ppos_by_class = {name: float(np.median(h[:, -1]))
                                for name, h in histories.items() if h.size}
    logger.info('Diagnostics complete')
    return report
