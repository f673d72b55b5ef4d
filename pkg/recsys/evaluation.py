"""Ranking metrics and diagnostic statistics.

Ranked lists order items by descending score, ties broken by ascending item
index. Under the ``full`` protocol a user's list holds every item outside
their train positives (and outside the other held-out split); under
``sampled100`` it holds the ground truth plus enough seeded uniform negatives
to reach 100 items.

NDCG follows the unnormalised sum ``sum 1 / log2(rank + 1)`` over hits, so
with several ground-truth items per user it can exceed 1.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import FalseNegativeSet, InteractionDataset
from .exceptions import ConfigurationError, ProtocolError
from .model import ModelState, score_matrix, score_pairs, score_user_items
from .structured_logging import get_evaluation_logger

logger = get_evaluation_logger()

SAMPLED_LIST_LENGTH = 100
DEFAULT_CUTOFFS = (1, 3)
DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 21), 2))


class Protocol(str, Enum):
    FULL = 'full'
    SAMPLED100 = 'sampled100'


@dataclass
class RankedList:
    user: int
    items: np.ndarray
    ground_truth: FrozenSet[int]

    def hits(self, k: int) -> List[int]:
        """1-based ranks of ground-truth items within the top ``k``."""
        return [rank for rank, item in enumerate(self.items[:k], start=1)
                if int(item) in self.ground_truth]


@dataclass
class DiagnosticReport:
    ccdf: List[Tuple[float, float]] = field(default_factory=list)
    ler_by_difficulty: Dict[int, float] = field(default_factory=dict)
    ler_per_batch: Dict[int, List[float]] = field(default_factory=dict)
    std_mean_by_class: Dict[str, float] = field(default_factory=dict)
    p50_ppos_by_class: Dict[str, float] = field(default_factory=dict)

    def ccdf_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.ccdf, columns=['x', 'ccdf'])

    def ler_frame(self) -> pd.DataFrame:
        return pd.DataFrame(sorted(self.ler_by_difficulty.items()), columns=['difficulty', 'ler'])

    def class_frame(self) -> pd.DataFrame:
        rows = [(name, 'median_std_mean', value) for name, value in self.std_mean_by_class.items()]
        rows += [(name, 'p50_ppos', value) for name, value in self.p50_ppos_by_class.items()]
        return pd.DataFrame(rows, columns=['class', 'statistic', 'value'])


def _order(items: np.ndarray, scores: np.ndarray) -> np.ndarray:
    return items[np.lexsort((items, -scores))]


def excluded_items(ds: InteractionDataset, u: int, split: str) -> FrozenSet[int]:
    """Items left out of a user's ranking: train positives and the other split."""
    other = 'validation' if split == 'test' else 'test'
    return ds.per_user_positives.get(u, frozenset()) | ds.held_out(other).get(u, frozenset())


def build_ranked_list(state: ModelState, ds: InteractionDataset, u: int,
                      protocol: Union[str, Protocol] = Protocol.FULL,
                      rng: Optional[np.random.Generator] = None, split: str = 'test',
                      negatives: Optional[np.ndarray] = None) -> RankedList:
    """Ranked list for one user; ``negatives`` overrides the sampled-100 draw."""
    protocol = Protocol(protocol)
    ground_truth = ds.held_out(split).get(u)
    if not ground_truth:
        raise ProtocolError(f'user {u} has no {split} items')
    excluded = excluded_items(ds, u, split)
    if protocol is Protocol.FULL:
        items = np.setdiff1d(np.arange(ds.num_items), np.fromiter(excluded, dtype=np.int64))
    else:
        if negatives is None:
            negatives = draw_sampled_negatives(ds.num_items, excluded | ground_truth,
                                               SAMPLED_LIST_LENGTH - len(ground_truth),
                                               rng or np.random.default_rng(), u)
        items = np.concatenate([np.array(sorted(ground_truth), dtype=np.int64), negatives])
    scores = score_user_items(state, u, items)
    return RankedList(user=u, items=_order(items, scores), ground_truth=ground_truth)


def draw_sampled_negatives(num_items: int, blocked: FrozenSet[int], size: int,
                           rng: np.random.Generator, u: int = -1) -> np.ndarray:
    candidates = np.setdiff1d(np.arange(num_items), np.fromiter(blocked, dtype=np.int64))
    if size < 0 or candidates.size < size:
        raise ProtocolError(
            f'user {u}: only {candidates.size} candidates for a {SAMPLED_LIST_LENGTH}-item list'
        )
    return np.sort(rng.choice(candidates, size=size, replace=False))


def recall_at_k(ranked: RankedList, k: int) -> float:
    if k < 1:
        raise ConfigurationError('k must be >= 1')
    return len(ranked.hits(k)) / len(ranked.ground_truth)


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    if k < 1:
        raise ConfigurationError('k must be >= 1')
    return float(sum(1.0 / np.log2(rank + 1) for rank in ranked.hits(k)))


def label_error_ratio(users: Sequence[int], items: Sequence[int], fns: FalseNegativeSet) -> float:
    """Fraction of selected (user, item) negatives that lie in F."""
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError('no selected negatives')
    return float(fns.contains(users, np.asarray(items, dtype=np.int64)).mean())


def ccdf(values: np.ndarray, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[Tuple[float, float]]:
    """Empirical ``P(value >= x)`` at each threshold."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError('no values')
    thresholds = np.asarray(thresholds, dtype=np.float64)
    above = values.size - np.searchsorted(values, thresholds, side='left')
    return [(float(x), float(f)) for x, f in zip(thresholds, above / values.size)]


def mean_positive_scores(state: ModelState, ds: InteractionDataset) -> np.ndarray:
    """Mean train-positive score per user (0 for users without positives)."""
    pairs = ds.train_pairs
    scores = score_pairs(state, pairs[:, 0], pairs[:, 1])
    total = np.bincount(pairs[:, 0], weights=scores, minlength=ds.num_users)
    count = np.bincount(pairs[:, 0], minlength=ds.num_users)
    return total / np.maximum(count, 1)


def ccdf_ppos(state: ModelState, ds: InteractionDataset, users: np.ndarray, items: np.ndarray,
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[Tuple[float, float]]:
    """CCDF of P_pos for negative pairs, against each user's mean positive score."""
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError('no pairs')
    reference = mean_positive_scores(state, ds)[users]
    ppos = expit(score_pairs(state, users, items) - reference)
    return ccdf(ppos, thresholds)


def std_mean_ratio(histories: np.ndarray) -> np.ndarray:
    """Population std over mean of each row; rows with zero mean give 0."""
    histories = np.asarray(histories, dtype=np.float64)
    mean = histories.mean(axis=-1)
    std = histories.std(axis=-1)
    safe = np.where(mean == 0, 1.0, mean)
    return np.where(mean == 0, 0.0, std / safe)


def std_mean_report(histories_by_class: Mapping[str, np.ndarray]) -> Dict[str, float]:
    """Median std/mean ratio per class."""
    report = {}
    for name, histories in histories_by_class.items():
        histories = np.asarray(histories, dtype=np.float64)
        if histories.size == 0:
            continue
        report[name] = float(np.median(std_mean_ratio(histories)))
    return report


def ranks_against(scores: np.ndarray, items: np.ndarray, target_scores: np.ndarray,
                  target_items: np.ndarray) -> np.ndarray:
    """1-based rank of each target within its row of ``(scores, items)``.

    Rows of ``scores`` hold -inf for excluded entries. A target's rank counts
    the entries scoring higher plus equal-scoring entries with a lower item
    index, which is its position in the list ordered by :func:`build_ranked_list`.
    """
    higher = (scores > target_scores[:, None]).sum(axis=1)
    tied = ((scores == target_scores[:, None]) & (items < target_items[:, None])).sum(axis=1)
    return higher + tied + 1


class RankingEvaluator:
    """Recall@k and NDCG@k over every evaluated user of a split.

    Sampled-100 negatives are drawn once per user and split from ``seed`` and
    reused at every epoch so successive evaluations stay comparable.
    """

    def __init__(self, ds: InteractionDataset, protocol: Union[str, Protocol] = Protocol.FULL,
                 seed: int = 0, cutoffs: Sequence[int] = DEFAULT_CUTOFFS, user_chunk: int = 256):
        self.ds = ds
        self.protocol = Protocol(protocol)
        self.cutoffs = tuple(sorted(set(cutoffs)))
        if not self.cutoffs or self.cutoffs[0] < 1:
            raise ConfigurationError('cutoffs must be positive')
        self.user_chunk = user_chunk
        self.seed = int(seed)
        self._negatives: Dict[str, Dict[int, np.ndarray]] = {}

    def users(self, split: str) -> np.ndarray:
        return np.array(sorted(u for u, g in self.ds.held_out(split).items() if g), dtype=np.int64)

    def negatives(self, split: str) -> Dict[int, np.ndarray]:
        if split not in self._negatives:
            rng = np.random.default_rng([self.seed, 0 if split == 'test' else 1])
            held_out = self.ds.held_out(split)
            self._negatives[split] = {
                int(u): draw_sampled_negatives(
                    self.ds.num_items, excluded_items(self.ds, int(u), split) | held_out[int(u)],
                    SAMPLED_LIST_LENGTH - len(held_out[int(u)]), rng, int(u),
                )
                for u in self.users(split)
            }
        return self._negatives[split]

    def ranked_list(self, state: ModelState, u: int, split: str = 'test') -> RankedList:
        negatives = self.negatives(split).get(u) if self.protocol is Protocol.SAMPLED100 else None
        return build_ranked_list(state, self.ds, u, self.protocol, split=split, negatives=negatives)

    def user_ranks(self, state: ModelState, split: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(users, target_users, ranks)``: the rank of every ground-truth item."""
        users = self.users(split)
        held_out = self.ds.held_out(split)
        target_users, ranks = [], []
        for start in range(0, users.size, self.user_chunk):
            block = users[start:start + self.user_chunk]
            rows = np.concatenate([np.full(len(held_out[int(u)]), r) for r, u in enumerate(block)])
            targets = np.concatenate([np.array(sorted(held_out[int(u)]), dtype=np.int64) for u in block])
            if self.protocol is Protocol.FULL:
                scores, items = self._full_scores(state, block, split)
                target_scores = scores[rows, targets]
                block_ranks = ranks_against(scores[rows], items[None, :], target_scores, targets)
            else:
                negatives = self.negatives(split)
                lists = np.stack([
                    np.concatenate([np.array(sorted(held_out[int(u)]), dtype=np.int64), negatives[int(u)]])
                    for u in block
                ])
                scores = score_pairs(state, block[:, None], lists)
                # Ground truth leads each list in the same sorted order as ``targets``
                columns = np.concatenate([np.arange(len(held_out[int(u)])) for u in block])
                target_scores = scores[rows, columns]
                block_ranks = ranks_against(scores[rows], lists[rows], target_scores, targets)
            target_users.append(block[rows])
            ranks.append(block_ranks)
        if not ranks:
            return users, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return users, np.concatenate(target_users), np.concatenate(ranks)

    def _full_scores(self, state: ModelState, block: np.ndarray, split: str):
        scores = score_matrix(state, block)
        for r, u in enumerate(block):
            excluded = excluded_items(self.ds, int(u), split)
            if excluded:
                scores[r, np.fromiter(excluded, dtype=np.int64)] = -np.inf
        return scores, np.arange(self.ds.num_items, dtype=np.int64)

    def evaluate(self, state: ModelState, split: str = 'test') -> Dict[str, float]:
        """Mean Recall@k and NDCG@k over the split's users, keyed ``recall@k`` / ``ndcg@k``."""
        users, target_users, ranks = self.user_ranks(state, split)
        if users.size == 0:
            return {}
        position = np.searchsorted(users, target_users)
        sizes = np.bincount(position, minlength=users.size)
        results = {}
        for k in self.cutoffs:
            hit = ranks <= k
            hits = np.bincount(position, weights=hit.astype(np.float64), minlength=users.size)
            gains = np.bincount(position, weights=np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0),
                                minlength=users.size)
            results[f'recall@{k}'] = float(np.mean(hits / sizes))
            results[f'ndcg@{k}'] = float(np.mean(gains))
        return results
