"""Negative sampling strategies.

Every strategy draws, for each (user, positive item) of a batch, one item the
user has not interacted with. Baselines:

* uniform over non-interacted items
* popularity, proportional to ``pop ** 0.75``
* rank-based, ``exp(-rank / lambda)`` over a scored candidate pool
* hard, the best-scored of D uniform draws

SRNS keeps a fixed-size memory of candidates per user. A negative is chosen
from memory by current positive-probability plus a bonus proportional to the
standard deviation of that probability over the last few epochs. The memory
is then refreshed: it is merged with S2 uniform draws and S1 items are kept,
sampled without replacement with probability proportional to
``exp(score / tau)``.

Histories store epoch-end raw scores in NaN-padded windows whose columns are
shifted together, so column ``c`` of every window refers to the same epoch.
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple, Union
import json

import numpy as np
from scipy.special import expit

from . import metrics
from .data import FalseNegativeSet, InteractionDataset, PositiveIndex
from .exceptions import ConfigurationError, NoCandidateError
from .model import ModelState, score, score_pairs, score_user_items
from .structured_logging import get_training_logger

logger = get_training_logger()

HISTORY_WINDOW = 5
VAR_SET_PERIOD = 5
POPULARITY_EXPONENT = 0.75


class SamplingStrategy(str, Enum):
    UNIFORM = 'uniform'
    POPULARITY = 'popularity'
    RANK_BASED = 'rank_based'
    SRNS = 'srns'
    HARD = 'hard'


class Schedule(str, Enum):
    INCREASED = 'increased'
    FLAT = 'flat'
    DECREASED = 'decreased'


class StalePick(str, Enum):
    VARIANCE = 'variance'
    UNIFORM = 'uniform'


@dataclass(frozen=True)
class SamplerConfig:
    strategy: SamplingStrategy = SamplingStrategy.SRNS
    S1: int = 20
    S2: int = 20
    tau: float = 1.0
    alpha: float = 20.0
    T0: int = 100
    schedule: Schedule = Schedule.INCREASED
    E: int = 1
    lambda_rank: float = 10.0
    difficulty_D: int = 4
    # 0 ranks every candidate
    rank_pool: int = 500
    # 0 disables item-space pruning
    var_set_size: int = 0
    stale_pick: StalePick = StalePick.VARIANCE
    inject_noise: bool = True

    def __post_init__(self):
        for name, enum in (('strategy', SamplingStrategy), ('schedule', Schedule),
                           ('stale_pick', StalePick)):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError:
                raise ConfigurationError(f'unknown {name}: {getattr(self, name)!r}')
        if self.S1 < 1:
            raise ConfigurationError(f'S1 must be >= 1, got {self.S1}')
        if self.S2 < 0:
            raise ConfigurationError(f'S2 must be >= 0, got {self.S2}')
        if self.tau <= 0:
            raise ConfigurationError(f'tau must be > 0, got {self.tau}')
        if self.alpha < 0:
            raise ConfigurationError(f'alpha must be >= 0, got {self.alpha}')
        if self.T0 < 1:
            raise ConfigurationError(f'T0 must be >= 1, got {self.T0}')
        if self.E < 1:
            raise ConfigurationError(f'E must be >= 1, got {self.E}')
        if self.lambda_rank <= 0:
            raise ConfigurationError('lambda_rank must be > 0')
        if self.difficulty_D < 1:
            raise ConfigurationError('difficulty_D must be >= 1')
        if self.rank_pool < 0:
            raise ConfigurationError('rank_pool must be >= 0')
        if self.var_set_size and self.var_set_size < self.S1 + self.S2:
            raise ConfigurationError(
                f'var_set_size {self.var_set_size} must be at least S1 + S2 = {self.S1 + self.S2}'
            )


@dataclass
class UserMemory:
    """One user's candidate memory.

    ``score_history`` rows are NaN-padded windows of epoch-end scores, oldest
    first. ``positive_score_history`` maps each train positive of the user to
    its own window. When ``noise_slot`` is set it is the item in the last slot.
    """

    candidates: np.ndarray
    score_history: np.ndarray
    positive_score_history: Dict[int, np.ndarray] = field(default_factory=dict)
    noise_slot: Optional[int] = None

    def to_json(self, user: int) -> str:
        return json.dumps({
            'user': user,
            'candidates': [int(i) for i in self.candidates],
            'histories': [[None if np.isnan(x) else float(x) for x in row]
                          for row in self.score_history],
            'noise_slot': self.noise_slot,
        })


@dataclass
class VarSet:
    """Pruned candidate space per user; rows are padded with -1 past ``sizes[u]``."""

    items: np.ndarray
    sizes: np.ndarray
    history: np.ndarray

    @property
    def size(self) -> int:
        return int(self.items.shape[1])

    def per_user(self, u: int) -> np.ndarray:
        return self.items[u, :self.sizes[u]]


def empty_history(*shape: int, dtype=np.float64) -> np.ndarray:
    return np.full(shape + (HISTORY_WINDOW,), np.nan, dtype=dtype)


def push_history(history: np.ndarray, values: np.ndarray) -> None:
    """Shift windows one epoch to the left and append ``values``, in place."""
    history[..., :-1] = history[..., 1:]
    history[..., -1] = values


def alpha_at(config: SamplerConfig, t: float) -> float:
    """Variance weight at epoch ``t`` under the configured schedule."""
    if config.schedule is Schedule.INCREASED:
        return config.alpha * min(t / config.T0, 1.0)
    if config.schedule is Schedule.DECREASED:
        return config.alpha * max(1.0 - t / config.T0, 0.0)
    return config.alpha


def window_std(values: np.ndarray) -> np.ndarray:
    """Population std over the non-NaN entries of the last axis; 0 when none."""
    valid = ~np.isnan(values)
    count = valid.sum(axis=-1)
    filled = np.where(valid, values, 0.0)
    denom = np.maximum(count, 1)
    mean = filled.sum(axis=-1) / denom
    dev = np.where(valid, values - mean[..., None], 0.0)
    std = np.sqrt((dev ** 2).sum(axis=-1) / denom)
    return np.where(count > 0, std, 0.0)


def std_over_window(history: Sequence[float]) -> float:
    return float(window_std(np.asarray(history, dtype=np.float64)))


def select_slots(cand_scores: np.ndarray, pos_scores: np.ndarray, cand_history: np.ndarray,
                 pos_history: np.ndarray, alpha_t: float) -> np.ndarray:
    """Memory slot maximising ``P_pos + alpha_t * std(P_pos history)`` per row.

    Shapes: ``(B, S1)``, ``(B,)``, ``(B, S1, W)``, ``(B, W)``. Ties go to the
    lowest slot.
    """
    criterion = expit(cand_scores - pos_scores[:, None])
    if alpha_t > 0:
        history = expit(cand_history - pos_history[:, None, :])
        criterion = criterion + alpha_t * window_std(history)
    return np.argmax(criterion, axis=1)


def duplicate_mask(pool: np.ndarray) -> np.ndarray:
    """True on every repeat of an item already seen earlier in its row."""
    order = np.argsort(pool, axis=1, kind='stable')
    ordered = np.take_along_axis(pool, order, axis=1)
    repeat = np.zeros(pool.shape, dtype=bool)
    repeat[:, 1:] = ordered[:, 1:] == ordered[:, :-1]
    mask = np.zeros(pool.shape, dtype=bool)
    np.put_along_axis(mask, order, repeat, axis=1)
    return mask


def gumbel_top_k(scores: np.ndarray, tau: float, k: int, rng: np.random.Generator,
                 invalid: Optional[np.ndarray] = None) -> np.ndarray:
    """Positions of ``k`` draws without replacement, P ∝ exp(score / tau), per row."""
    keys = scores / tau + rng.gumbel(size=scores.shape)
    if invalid is not None:
        keys = np.where(invalid, -np.inf, keys)
    return np.argsort(-keys, axis=1, kind='stable')[:, :k]


DrawFn = Callable[[np.ndarray, np.random.Generator], Tuple[np.ndarray, np.ndarray]]


def refresh_rows(users: np.ndarray, candidates: np.ndarray, history: np.ndarray,
                 blocked: np.ndarray, draw: DrawFn, pad: DrawFn, state: ModelState, tau: float,
                 need: np.ndarray, rng: np.random.Generator,
                 max_rounds: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Score-weighted memory refresh for a block of users.

    The pool is the current memory (minus ``blocked`` slots) followed by the
    expansion from ``draw``. Repeats keep their first occurrence; rows with
    fewer than ``need`` distinct items are padded with ``pad`` draws. S1
    items are then kept in sampling order, with their histories.
    """
    n, slots = candidates.shape
    rows = np.arange(n)
    pool_parts, hist_parts = [candidates], [history]
    fixed_parts = [blocked]
    drawn, drawn_hist = draw(rows, rng)
    pool_parts.append(drawn)
    hist_parts.append(drawn_hist)
    fixed_parts.append(np.zeros(drawn.shape, dtype=bool))

    for rounds in range(max_rounds + 1):
        pool = np.concatenate(pool_parts, axis=1)
        fixed = np.concatenate(fixed_parts, axis=1)
        invalid = fixed | duplicate_mask(pool)
        short = (~invalid).sum(axis=1) < need
        if not short.any():
            break
        if rounds == max_rounds:
            raise NoCandidateError(int(users[short][0]),
                                   f'user {int(users[short][0])}: cannot fill memory with distinct items')
        extra, extra_hist = pad(rows, rng)
        pool_parts.append(extra)
        hist_parts.append(extra_hist)
        fixed_parts.append(np.repeat(~short[:, None], extra.shape[1], axis=1))

    pool_hist = np.concatenate(hist_parts, axis=1)
    scores = score_pairs(state, users[:, None], pool)
    picked = gumbel_top_k(scores, tau, slots, rng, invalid)
    return (np.take_along_axis(pool, picked, axis=1),
            np.take_along_axis(pool_hist, picked[..., None], axis=1))


def _uniform_draw(excluded: PositiveIndex, users: np.ndarray, size: int) -> DrawFn:
    def draw(rows, rng):
        items = excluded.draw_negatives(users[rows], rng, size=size) if size else \
            np.empty((rows.size, 0), dtype=np.int64)
        return items, empty_history(rows.size, size)
    return draw


def _var_set_draw(var_set: VarSet, users: np.ndarray, size: int) -> DrawFn:
    def draw(rows, rng):
        owners = users[rows]
        picks = np.floor(rng.random((rows.size, size)) * var_set.sizes[owners][:, None]).astype(np.int64)
        items = var_set.items[owners[:, None], picks]
        hist = var_set.history[owners[:, None], picks].astype(np.float64)
        return items, hist
    return draw


def distinct_draws(users: np.ndarray, k: int, excluded: PositiveIndex, rng: np.random.Generator,
                   max_rounds: int = 64) -> np.ndarray:
    """``k`` distinct non-excluded items per user."""
    excluded.check_sampleable(users, need=k)
    items = excluded.draw_negatives(users, rng, size=k)
    for _ in range(max_rounds):
        repeat = duplicate_mask(items)
        if not repeat.any():
            return items
        where = np.nonzero(repeat)
        items[where] = excluded.draw_negatives(users[where[0]], rng)
    for row in np.flatnonzero(duplicate_mask(items).any(axis=1)):
        items[row] = rng.choice(excluded.candidates_of(int(users[row])), size=k, replace=False)
    return items


def sample_uniform(u: int, positives: PositiveIndex, rng: np.random.Generator) -> int:
    return int(positives.draw_negatives(np.array([u]), rng)[0])


def draw_popularity(users: np.ndarray, positives: PositiveIndex, weights: np.ndarray,
                    rng: np.random.Generator, mass: Optional[np.ndarray] = None,
                    max_rounds: int = 64) -> np.ndarray:
    """Items drawn ∝ ``weights`` among each user's non-interacted items.

    Users whose candidates all have zero weight fall back to uniform.
    """
    users = np.asarray(users, dtype=np.int64)
    positives.check_sampleable(users)
    if mass is None:
        mass = _complement_mass(positives, weights)
    total = weights.sum()
    out = np.empty(users.shape[0], dtype=np.int64)
    flat = mass[users] <= 0
    if flat.any():
        out[flat] = positives.draw_negatives(users[flat], rng)
    rows = np.flatnonzero(~flat)
    if rows.size:
        p = weights / total
        out[rows] = rng.choice(weights.shape[0], size=rows.size, p=p)
        rejected = rows[positives.contains(users[rows], out[rows])]
        for _ in range(max_rounds):
            if not rejected.size:
                break
            out[rejected] = rng.choice(weights.shape[0], size=rejected.size, p=p)
            rejected = rejected[positives.contains(users[rejected], out[rejected])]
        for row in rejected:
            candidates = positives.candidates_of(int(users[row]))
            w = weights[candidates]
            out[row] = rng.choice(candidates, p=w / w.sum())
    return out


def _complement_mass(positives: PositiveIndex, weights: np.ndarray) -> np.ndarray:
    inside = np.bincount(positives.keys // positives.num_items,
                         weights=weights[positives.keys % positives.num_items],
                         minlength=positives.num_users)
    return weights.sum() - inside


def popularity_weights(ds: InteractionDataset, exponent: float = POPULARITY_EXPONENT) -> np.ndarray:
    return ds.item_popularity().astype(np.float64) ** exponent


def sample_popularity(u: int, positives: PositiveIndex, pop_counts: np.ndarray,
                      rng: np.random.Generator) -> int:
    weights = np.asarray(pop_counts, dtype=np.float64) ** POPULARITY_EXPONENT
    return int(draw_popularity(np.array([u]), positives, weights, rng)[0])


def _rank_weights(n: int, lambda_rank: float) -> np.ndarray:
    w = np.exp(-np.arange(1, n + 1) / lambda_rank)
    return w / w.sum()


def draw_rank_based(users: np.ndarray, state: ModelState, positives: PositiveIndex,
                    lambda_rank: float, rng: np.random.Generator, pool_size: int = 500) -> np.ndarray:
    """Rank-weighted draw within a scored pool of ``min(pool_size, candidates)`` items.

    Pool items are ranked by descending score then ascending item index and
    rank ``n`` (1-based) is chosen with weight ``exp(-n / lambda_rank)``.
    ``pool_size`` 0 ranks every candidate.
    """
    users = np.asarray(users, dtype=np.int64)
    positives.check_sampleable(users)
    out = np.empty(users.shape[0], dtype=np.int64)
    n_cand = positives.num_candidates(users)
    pooled = (n_cand > pool_size) if pool_size else np.zeros(users.shape[0], dtype=bool)

    rows = np.flatnonzero(pooled)
    if rows.size:
        pool = distinct_draws(users[rows], pool_size, positives, rng)
        scores = score_pairs(state, users[rows][:, None], pool)
        order = np.lexsort((pool, -scores))
        rank = rng.choice(pool_size, size=rows.size, p=_rank_weights(pool_size, lambda_rank))
        out[rows] = pool[np.arange(rows.size), order[np.arange(rows.size), rank]]
    for row in np.flatnonzero(~pooled):
        u = int(users[row])
        pool = positives.candidates_of(u)
        scores = score_user_items(state, u, pool)
        order = np.lexsort((pool, -scores))
        out[row] = pool[order[rng.choice(pool.size, p=_rank_weights(pool.size, lambda_rank))]]
    return out


def sample_rank_based(u: int, state: ModelState, positives: PositiveIndex, lambda_rank: float,
                      rng: np.random.Generator, pool_size: int = 500) -> int:
    return int(draw_rank_based(np.array([u]), state, positives, lambda_rank, rng, pool_size)[0])


def draw_hard(users: np.ndarray, state: ModelState, positives: PositiveIndex, D: int,
              rng: np.random.Generator) -> np.ndarray:
    """Best-scored of ``D`` uniform draws (with replacement) per user.

    When ``D`` reaches the number of candidates the whole candidate set is
    scored instead, which makes the result the global argmax.
    """
    users = np.asarray(users, dtype=np.int64)
    positives.check_sampleable(users)
    out = np.empty(users.shape[0], dtype=np.int64)
    full = D >= positives.num_candidates(users)
    rows = np.flatnonzero(~full)
    if rows.size:
        drawn = positives.draw_negatives(users[rows], rng, size=D)
        scores = score_pairs(state, users[rows][:, None], drawn)
        out[rows] = drawn[np.arange(rows.size), np.argmax(scores, axis=1)]
    for row in np.flatnonzero(full):
        u = int(users[row])
        candidates = positives.candidates_of(u)
        out[row] = candidates[np.argmax(score_user_items(state, u, candidates))]
    return out


def sample_hard_D(u: int, state: ModelState, positives: PositiveIndex, D: int,
                  rng: np.random.Generator) -> int:
    if D < 1:
        raise ConfigurationError('D must be >= 1')
    return int(draw_hard(np.array([u]), state, positives, D, rng)[0])


def memory_update(mem: UserMemory, u: int, state: ModelState, excluded: PositiveIndex, S2: int,
                  tau: float, rng: np.random.Generator,
                  active_noise: Optional[Sequence[int]] = None,
                  noise_history: Optional[Dict[int, np.ndarray]] = None,
                  var_items: Optional[np.ndarray] = None,
                  var_history: Optional[np.ndarray] = None) -> UserMemory:
    """Refresh one user's memory.

    ``excluded`` must already contain the user's active false negatives when
    noise injection is on; the last slot is then redrawn from
    ``active_noise``. With ``var_items`` the expansion draws come from that
    pruned set and inherit ``var_history``.
    """
    users = np.array([u], dtype=np.int64)
    slots = mem.candidates.shape[0]
    noisy = bool(active_noise)
    blocked = np.zeros((1, slots), dtype=bool)
    blocked[0, -1] = noisy

    if var_items is not None:
        history = empty_history(1, len(var_items)) if var_history is None else var_history[None]
        var_set = VarSet(np.asarray(var_items, dtype=np.int64)[None],
                         np.array([len(var_items)]), history)
        draw = _var_set_draw(var_set, np.zeros(1, dtype=np.int64), S2)
    else:
        draw = _uniform_draw(excluded, users, S2)
    candidates, history = refresh_rows(
        users, mem.candidates[None].astype(np.int64), mem.score_history[None].astype(np.float64),
        blocked, draw, _uniform_draw(excluded, users, slots), state, tau,
        np.array([slots - int(noisy)]), rng,
    )
    candidates, history = candidates[0], history[0]
    noise_slot = None
    if noisy:
        noise_slot = int(rng.choice(np.array(sorted(active_noise), dtype=np.int64)))
        candidates[-1] = noise_slot
        history[-1] = (noise_history or {}).get(noise_slot, empty_history(1)[0])
    return UserMemory(candidates, history, dict(mem.positive_score_history), noise_slot)


def srns_select(mem: UserMemory, u: int, i: int, state: ModelState, alpha_t: float) -> int:
    """Negative chosen from ``mem`` for the positive pair (u, i)."""
    if mem.candidates.size == 0:
        raise NoCandidateError(u, f'user {u} has an empty memory')
    cand_scores = score_user_items(state, u, mem.candidates)[None]
    pos_scores = np.array([score(state, u, i)])
    pos_history = mem.positive_score_history.get(i, empty_history(1)[0])[None]
    slot = select_slots(cand_scores, pos_scores, mem.score_history[None], pos_history, alpha_t)[0]
    return int(mem.candidates[slot])


class NegativeSampler:
    """Common interface of the batch samplers."""

    strategy: SamplingStrategy

    def __init__(self, config: SamplerConfig, ds: InteractionDataset, positives: PositiveIndex,
                 rng: np.random.Generator):
        self.config = config
        self.ds = ds
        self.positives = positives
        self.rng = rng

    def sample(self, pair_idx: np.ndarray, users: np.ndarray, pos_items: np.ndarray,
               state: ModelState, epoch: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def on_epoch_end(self, state: ModelState, epoch: int) -> None:
        """Hook run once per epoch after the last parameter update."""


class UniformSampler(NegativeSampler):
    strategy = SamplingStrategy.UNIFORM

    def sample(self, pair_idx, users, pos_items, state, epoch, rng):
        return self.positives.draw_negatives(users, rng)


class PopularitySampler(NegativeSampler):
    strategy = SamplingStrategy.POPULARITY

    def __init__(self, config, ds, positives, rng):
        super().__init__(config, ds, positives, rng)
        self.weights = popularity_weights(ds)
        self.mass = _complement_mass(positives, self.weights)

    def sample(self, pair_idx, users, pos_items, state, epoch, rng):
        return draw_popularity(users, self.positives, self.weights, rng, mass=self.mass)


class RankBasedSampler(NegativeSampler):
    strategy = SamplingStrategy.RANK_BASED

    def sample(self, pair_idx, users, pos_items, state, epoch, rng):
        return draw_rank_based(users, state, self.positives, self.config.lambda_rank, rng,
                               self.config.rank_pool)


class HardSampler(NegativeSampler):
    strategy = SamplingStrategy.HARD

    def sample(self, pair_idx, users, pos_items, state, epoch, rng):
        return draw_hard(users, state, self.positives, self.config.difficulty_D, rng)


class SRNSSampler(NegativeSampler):
    """Memory-based sampler with variance-aware selection.

    Per-user state lives in dense arrays: ``candidates`` ``(U, S1)``,
    ``history`` ``(U, S1, W)`` and ``positive_history`` ``(n_train, W)``
    aligned with ``ds.train_pairs``. With noise injection, active false
    negatives keep their own windows so a resampled noise slot carries a
    real history.
    """

    strategy = SamplingStrategy.SRNS

    def __init__(self, config, ds, positives, rng, noise: Optional[FalseNegativeSet] = None):
        super().__init__(config, ds, positives, rng)
        U = ds.num_users
        self._inject = bool(noise is not None and config.inject_noise and noise.active_size)
        if self._inject:
            self.excluded = PositiveIndex.from_dataset(ds, extra=noise.active_per_user)
            self.noise = PositiveIndex(U, ds.num_items, noise.active_per_user)
        else:
            self.excluded = positives
            self.noise = None
        self.has_noise = (self.noise.counts > 0) if self.noise is not None else np.zeros(U, dtype=bool)
        self.noise_history = empty_history(self.noise.keys.size) if self.noise is not None else None

        users = np.arange(U, dtype=np.int64)
        self._regular = config.S1 - self.has_noise.astype(np.int64)
        self.excluded.check_sampleable(users, need=config.S1)
        self.candidates = distinct_draws(users, config.S1, self.excluded, rng)
        self.history = empty_history(U, config.S1)
        if self._inject:
            noisy = np.flatnonzero(self.has_noise)
            self.candidates[noisy, -1] = self._draw_noise(noisy, rng)[0]
        self.positive_history = empty_history(ds.num_train)

        order = np.argsort(ds.train_pairs[:, 0], kind='stable')
        self._pair_order = order
        self._pair_ptr = np.concatenate([[0], np.cumsum(np.bincount(ds.train_pairs[:, 0], minlength=U))])
        # Expansion draws come from ``var_set``; ``pending_var_set`` logs scores
        # for VAR_SET_PERIOD epochs before it takes over.
        self.var_set: Optional[VarSet] = None
        self.pending_var_set: Optional[VarSet] = None
        if config.var_set_size:
            self.var_set = self.pending_var_set = self.draw_var_set()
        logger.info(
            f'SRNS memory initialised: {U} users x {config.S1} slots',
            strategy=self.strategy.value,
        )

    def _draw_noise(self, users: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        counts = self.noise.counts[users]
        idx = self.noise.indptr[users] + np.floor(rng.random(users.size) * counts).astype(np.int64)
        return self.noise.keys[idx] % self.noise.num_items, idx

    def draw_var_set(self) -> VarSet:
        """A fresh pruned item space per user with empty histories."""
        U, V = self.ds.num_users, self.config.var_set_size
        items = np.full((U, V), -1, dtype=np.int64)
        sizes = np.zeros(U, dtype=np.int64)
        for u in range(U):
            candidates = self.excluded.candidates_of(u)
            size = min(V, candidates.size)
            items[u, :size] = self.rng.choice(candidates, size=size, replace=False)
            sizes[u] = size
        small = int((sizes < self.config.S1 + self.config.S2).sum())
        if small:
            logger.warning(f'{small} users have a pruned item space smaller than S1 + S2')
        return VarSet(items, sizes, empty_history(U, V, dtype=np.float32))

    def alpha(self, epoch: int) -> float:
        return alpha_at(self.config, epoch)

    def is_refresh_epoch(self, epoch: int) -> bool:
        return (epoch - 1) % self.config.E == 0

    def sample(self, pair_idx, users, pos_items, state, epoch, rng):
        users = np.asarray(users, dtype=np.int64)
        memory = self.candidates[users]
        refresh = self.is_refresh_epoch(epoch)
        if refresh or self.config.stale_pick is StalePick.VARIANCE:
            cand_scores = score_pairs(state, users[:, None], memory)
            pos_scores = score_pairs(state, users, pos_items)
            slots = select_slots(cand_scores, pos_scores, self.history[users],
                                 self.positive_history[pair_idx], self.alpha(epoch))
        else:
            slots = rng.integers(0, self.config.S1, size=users.size)
        negatives = memory[np.arange(users.size), slots]
        if refresh:
            self.refresh(np.unique(users), state, rng)
        return negatives

    def refresh(self, users: np.ndarray, state: ModelState, rng: np.random.Generator) -> None:
        """Score-weighted refresh of the memories of ``users``."""
        S1, S2 = self.config.S1, self.config.S2
        noisy = self.has_noise[users]
        blocked = np.zeros((users.size, S1), dtype=bool)
        blocked[:, -1] = noisy
        if self.var_set is not None:
            draw = _var_set_draw(self.var_set, users, S2)
        else:
            draw = _uniform_draw(self.excluded, users, S2)
        candidates, history = refresh_rows(
            users, self.candidates[users], self.history[users], blocked, draw,
            _uniform_draw(self.excluded, users, S1), state, self.config.tau,
            self._regular[users], rng,
        )
        if noisy.any():
            rows = np.flatnonzero(noisy)
            items, idx = self._draw_noise(users[rows], rng)
            candidates[rows, -1] = items
            history[rows, -1] = self.noise_history[idx]
        self.candidates[users] = candidates
        self.history[users] = history
        metrics.memory_refreshes_total.inc(users.size)

    def on_epoch_end(self, state: ModelState, epoch: int) -> None:
        U = self.ds.num_users
        users = np.arange(U, dtype=np.int64)
        push_history(self.history, score_pairs(state, users[:, None], self.candidates))
        pairs = self.ds.train_pairs
        push_history(self.positive_history, score_pairs(state, pairs[:, 0], pairs[:, 1]))
        if self.noise is not None:
            keys = self.noise.keys
            push_history(self.noise_history,
                         score_pairs(state, keys // self.noise.num_items, keys % self.noise.num_items))
        if self.var_set is not None:
            self._log_var_set(self.var_set, state)
            if self.pending_var_set is not self.var_set:
                self._log_var_set(self.pending_var_set, state)
            if epoch % VAR_SET_PERIOD == 0:
                self.var_set = self.pending_var_set
                self.pending_var_set = self.draw_var_set()

    def _log_var_set(self, var_set: VarSet, state: ModelState) -> None:
        U = self.ds.num_users
        users = np.arange(U, dtype=np.int64)
        chunk = max(1, (1 << 20) // var_set.size)
        for start in range(0, U, chunk):
            window = slice(start, min(start + chunk, U))
            values = score_pairs(state, users[window, None], np.maximum(var_set.items[window], 0))
            push_history(var_set.history[window], values.astype(np.float32))

    def memory_of(self, u: int) -> UserMemory:
        rows = self._pair_order[self._pair_ptr[u]:self._pair_ptr[u + 1]]
        positives = {int(self.ds.train_pairs[r, 1]): self.positive_history[r].copy() for r in rows}
        return UserMemory(
            candidates=self.candidates[u].copy(),
            score_history=self.history[u].copy(),
            positive_score_history=positives,
            noise_slot=int(self.candidates[u, -1]) if self.has_noise[u] else None,
        )

    def dump_memory(self, path: Union[str, Path]) -> Path:
        """Write every user's memory as JSON lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for u in range(self.ds.num_users):
                f.write(self.memory_of(u).to_json(u) + '\n')
        logger.info('Memory dump written', path=str(path))
        return path


_SAMPLERS = {
    SamplingStrategy.UNIFORM: UniformSampler,
    SamplingStrategy.POPULARITY: PopularitySampler,
    SamplingStrategy.RANK_BASED: RankBasedSampler,
    SamplingStrategy.HARD: HardSampler,
}


def build_sampler(config: SamplerConfig, ds: InteractionDataset, rng: np.random.Generator,
                  positives: Optional[PositiveIndex] = None,
                  noise: Optional[FalseNegativeSet] = None) -> NegativeSampler:
    if positives is None:
        positives = PositiveIndex.from_dataset(ds)
    positives.check_sampleable(np.unique(ds.train_pairs[:, 0]))
    if config.strategy is SamplingStrategy.SRNS:
        return SRNSSampler(config, ds, positives, rng, noise=noise)
    return _SAMPLERS[config.strategy](config, ds, positives, rng)
