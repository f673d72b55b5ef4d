"""Interaction ingestion, indexing, train/validation/test splits and synthetic noise.

Raw files carry one record per line: ``user item [rating [timestamp]]``
separated by ``::`` (MovieLens-1m) or by a tab/comma (MovieLens-100k and most
CSV exports). Records are turned into contiguous user/item indices, split
either randomly per user or leave-one-out by timestamp, and optionally paired
with a set of flipped test labels that act as known false negatives during
training.

All functions are pure: they never mutate their inputs and every random
choice flows from an explicit seed.
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union
import hashlib
import json
import re

import numpy as np
import pandas as pd

from .exceptions import (
    ConfigurationError,
    DataFormatError,
    EmptyDatasetError,
    MissingArtifactError,
    NoCandidateError,
)
from .structured_logging import get_data_logger

logger = get_data_logger()

SNAPSHOT_FILES = ('train.tsv', 'valid.tsv', 'test.tsv')


class InputFormat(str, Enum):
    DELIMITED = 'delimited'
    MOVIELENS = 'movielens_double_colon'


@dataclass(frozen=True)
class RawInteraction:
    """One raw record before implicit conversion."""

    user_id: str
    item_id: str
    rating: Optional[float] = None
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError('user_id and item_id must be non-empty')


@dataclass
class InteractionDataset:
    """Indexed positive pairs with per-user positive sets and held-out splits.

    ``train_pairs`` is an ``(n, 2)`` int64 array of ``(user_index, item_index)``
    rows. ``per_user_positives`` holds R_u for every user (possibly empty),
    ``test`` holds G_u for evaluated users and ``validation`` the single
    held-out item of leave-one-out splits.
    """

    num_users: int
    num_items: int
    train_pairs: np.ndarray
    per_user_positives: Dict[int, FrozenSet[int]]
    test: Dict[int, FrozenSet[int]] = field(default_factory=dict)
    validation: Optional[Dict[int, int]] = None
    train_timestamps: Optional[np.ndarray] = None
    user_ids: Tuple[str, ...] = ()
    item_ids: Tuple[str, ...] = ()
    split: str = 'none'
    seed: Optional[int] = None

    @property
    def num_train(self) -> int:
        return int(self.train_pairs.shape[0])

    @property
    def is_split(self) -> bool:
        return self.split != 'none'

    def item_popularity(self) -> np.ndarray:
        """Train interaction count per item."""
        return np.bincount(self.train_pairs[:, 1], minlength=self.num_items).astype(np.int64)

    def held_out(self, split: str) -> Dict[int, FrozenSet[int]]:
        """Ground truth per user for ``'test'`` or ``'validation'``."""
        if split == 'test':
            return self.test
        if split == 'validation':
            if not self.validation:
                return {}
            return {u: frozenset([i]) for u, i in self.validation.items()}
        raise ConfigurationError(f'unknown split: {split}')

    def summary(self) -> Dict[str, int]:
        return {
            'num_users': self.num_users,
            'num_items': self.num_items,
            'train': self.num_train,
            'validation': len(self.validation or {}),
            'test': sum(len(items) for items in self.test.values()),
        }


@dataclass
class FalseNegativeSet:
    """Flipped test labels F_u and their σ-subsample used for noise injection."""

    num_items: int
    per_user: Dict[int, FrozenSet[int]]
    active_per_user: Dict[int, FrozenSet[int]]
    sigma: float
    flip_fraction: float

    @property
    def total_size(self) -> int:
        return sum(len(items) for items in self.per_user.values())

    @property
    def active_size(self) -> int:
        return sum(len(items) for items in self.active_per_user.values())

    def keys(self, active: bool = False) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys of F (or of its active part)."""
        source = self.active_per_user if active else self.per_user
        keys = [u * self.num_items + i for u, items in source.items() for i in items]
        return np.array(sorted(keys), dtype=np.int64)

    def contains(self, users: np.ndarray, items: np.ndarray, active: bool = False) -> np.ndarray:
        keys = self.keys(active)
        query = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        return _isin_sorted(query, keys)


class PositiveIndex:
    """Vectorised membership lookup over per-user item sets.

    Keys ``user * num_items + item`` are kept sorted, which doubles as a CSR
    layout: the items of user ``u`` are a contiguous slice.
    """

    def __init__(self, num_users: int, num_items: int, per_user: Mapping[int, Iterable[int]]):
        self.num_users = num_users
        self.num_items = num_items
        keys = [u * num_items + i for u, items in per_user.items() for i in items]
        self.keys = np.unique(np.asarray(keys, dtype=np.int64))
        self.counts = np.bincount(self.keys // num_items, minlength=num_users).astype(np.int64)
        self.indptr = np.concatenate([[0], np.cumsum(self.counts)])

    @classmethod
    def from_dataset(cls, ds: InteractionDataset,
                     extra: Optional[Mapping[int, Iterable[int]]] = None) -> 'PositiveIndex':
        """Index R_u of the train split, optionally merged with ``extra`` items."""
        merged: Dict[int, set] = {u: set(items) for u, items in ds.per_user_positives.items()}
        for u, items in (extra or {}).items():
            merged.setdefault(u, set()).update(items)
        return cls(ds.num_users, ds.num_items, merged)

    def contains(self, users, items) -> np.ndarray:
        query = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        return _isin_sorted(query, self.keys)

    def items_of(self, user: int) -> np.ndarray:
        start, stop = self.indptr[user], self.indptr[user + 1]
        return self.keys[start:stop] % self.num_items

    def candidates_of(self, user: int) -> np.ndarray:
        """Items outside the user's set, ascending."""
        return np.setdiff1d(np.arange(self.num_items, dtype=np.int64), self.items_of(user),
                            assume_unique=True)

    def num_candidates(self, users) -> np.ndarray:
        return self.num_items - self.counts[np.asarray(users, dtype=np.int64)]

    def check_sampleable(self, users, need: int = 1) -> None:
        users = np.unique(np.asarray(users, dtype=np.int64))
        short = users[self.num_candidates(users) < need]
        if short.size:
            raise NoCandidateError(
                int(short[0]),
                f'user {int(short[0])} has fewer than {need} non-interacted items',
            )

    def draw_negatives(self, users, rng: np.random.Generator, size: Optional[int] = None,
                       max_rounds: int = 64) -> np.ndarray:
        """Draw items uniformly from each user's complement (with replacement).

        Rejection sampling against the key array; rows still rejected after
        ``max_rounds`` fall back to an explicit draw from the complement.
        """
        users = np.asarray(users, dtype=np.int64)
        if size is not None:
            users = np.repeat(users[..., None], size, axis=-1)
        flat_users = users.ravel()
        self.check_sampleable(flat_users)
        items = rng.integers(0, self.num_items, size=flat_users.shape[0], dtype=np.int64)
        rejected = np.flatnonzero(self.contains(flat_users, items))
        rounds = 0
        while rejected.size and rounds < max_rounds:
            items[rejected] = rng.integers(0, self.num_items, size=rejected.size, dtype=np.int64)
            rejected = rejected[self.contains(flat_users[rejected], items[rejected])]
            rounds += 1
        for row in rejected:
            items[row] = rng.choice(self.candidates_of(int(flat_users[row])))
        return items.reshape(users.shape)


def _isin_sorted(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    if keys.size == 0:
        return np.zeros(np.shape(query), dtype=bool)
    pos = np.searchsorted(keys, query)
    pos = np.minimum(pos, keys.size - 1)
    return keys[pos] == query


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _detect_delimiter(path: Path, skip: int) -> str:
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if number <= skip or not line.strip():
                continue
            if '\t' in line:
                return '\t'
            if ',' in line:
                return ','
            raise DataFormatError(str(path), number, 'no tab or comma delimiter found')
    raise EmptyDatasetError(f'{path}: no records')


_PARSER_LINE = re.compile(r'line (\d+)')


def _check_encoding(path: Path) -> None:
    with open(path, 'rb') as f:
        for number, raw in enumerate(f, start=1):
            try:
                raw.decode('utf-8')
            except UnicodeDecodeError:
                raise DataFormatError(str(path), number, 'invalid UTF-8')


def ingest(path: Union[str, Path], fmt: Union[str, InputFormat] = InputFormat.DELIMITED,
           positive_threshold: Optional[float] = None, header: bool = False) -> List[RawInteraction]:
    """Read raw interactions, keeping records rated at least ``positive_threshold``.

    Columns are positional: user, item, then optional rating and timestamp.

    Raises:
        MissingArtifactError: the file does not exist.
        DataFormatError: a line cannot be parsed (1-based line number).
        ConfigurationError: a threshold is given but the file has no ratings.
        EmptyDatasetError: nothing survives parsing and filtering.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, 'interaction file')
    fmt = InputFormat(fmt)
    skip = 1 if header else 0
    _check_encoding(path)
    sep = '::' if fmt is InputFormat.MOVIELENS else _detect_delimiter(path, skip)

    try:
        frame = pd.read_csv(
            path, sep=sep, header=None, dtype=str, engine='python', skiprows=skip,
            skip_blank_lines=False, keep_default_na=False, encoding='utf-8',
        )
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f'{path}: no records')
    except pd.errors.ParserError as exc:
        match = _PARSER_LINE.search(str(exc))
        line = int(match.group(1)) + skip if match else 0
        raise DataFormatError(str(path), line, 'unexpected number of fields') from exc

    frame = frame.fillna('').apply(lambda col: col.str.strip())
    line_numbers = np.arange(len(frame)) + 1 + skip
    blank = (frame == '').all(axis=1).to_numpy()

    if frame.shape[1] < 2:
        first = int(line_numbers[~blank][0]) if (~blank).any() else 1
        raise DataFormatError(str(path), first, 'expected at least user and item columns')

    users = frame[0].to_numpy()
    items = frame[1].to_numpy()
    missing_id = ~blank & ((users == '') | (items == ''))
    if missing_id.any():
        raise DataFormatError(str(path), int(line_numbers[missing_id][0]), 'empty user or item id')

    ratings = None
    if frame.shape[1] >= 3:
        ratings = pd.to_numeric(frame[2], errors='coerce').to_numpy(dtype=np.float64)
        bad = ~blank & np.isnan(ratings)
        if bad.any():
            first = np.flatnonzero(bad)[0]
            raise DataFormatError(str(path), int(line_numbers[first]), f'invalid rating {frame[2].iloc[first]!r}')
    elif positive_threshold is not None:
        raise ConfigurationError(f'{path}: positive_threshold given but the file has no rating column')

    timestamps = None
    if frame.shape[1] >= 4:
        parsed = pd.to_numeric(frame[3], errors='coerce').to_numpy(dtype=np.float64)
        bad = ~blank & (np.isnan(parsed) | (parsed != np.floor(parsed)))
        if bad.any():
            raise DataFormatError(str(path), int(line_numbers[bad][0]), 'invalid timestamp')
        timestamps = parsed

    keep = ~blank
    if positive_threshold is not None:
        keep &= ratings >= positive_threshold

    rows = np.flatnonzero(keep)
    records = [
        RawInteraction(
            user_id=users[r],
            item_id=items[r],
            rating=None if ratings is None else float(ratings[r]),
            timestamp=None if timestamps is None else int(timestamps[r]),
        )
        for r in rows
    ]
    if not records:
        raise EmptyDatasetError(f'{path}: no records left after filtering')
    logger.info(f'Ingested {len(records)} of {int((~blank).sum())} records', path=str(path))
    return records


def build_index(records: List[RawInteraction], min_user_records: int = 0) -> InteractionDataset:
    """Filter sparse users and map raw ids to contiguous indices.

    Indices follow first appearance among the retained records. Duplicate
    (user, item) pairs collapse into one, keeping the latest timestamp.
    """
    if not records:
        raise EmptyDatasetError('no records to index')
    frame = pd.DataFrame({
        'user_id': [r.user_id for r in records],
        'item_id': [r.item_id for r in records],
        'timestamp': [np.nan if r.timestamp is None else r.timestamp for r in records],
    })
    has_timestamps = bool(frame['timestamp'].notna().all())

    counts = frame.groupby('user_id', sort=False)['item_id'].transform('size')
    frame = frame[counts >= min_user_records]
    if frame.empty:
        raise EmptyDatasetError(f'no user has at least {min_user_records} records')

    user_codes, user_uniques = pd.factorize(frame['user_id'], sort=False)
    item_codes, item_uniques = pd.factorize(frame['item_id'], sort=False)
    pairs = pd.DataFrame({'u': user_codes, 'i': item_codes, 't': frame['timestamp'].to_numpy()})
    pairs = pairs.groupby(['u', 'i'], sort=False).agg(t=('t', 'max')).reset_index()

    train_pairs = pairs[['u', 'i']].to_numpy(dtype=np.int64)
    num_users, num_items = len(user_uniques), len(item_uniques)
    ds = InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train_pairs=train_pairs,
        per_user_positives=_group_positives(train_pairs, num_users),
        train_timestamps=pairs['t'].to_numpy(dtype=np.int64) if has_timestamps else None,
        user_ids=tuple(str(u) for u in user_uniques),
        item_ids=tuple(str(i) for i in item_uniques),
    )
    logger.info(f'Indexed {num_users} users, {num_items} items, {ds.num_train} pairs')
    return ds


def _group_positives(pairs: np.ndarray, num_users: int) -> Dict[int, FrozenSet[int]]:
    grouped: Dict[int, set] = {u: set() for u in range(num_users)}
    for u, i in pairs.tolist():
        grouped[u].add(i)
    return {u: frozenset(items) for u, items in grouped.items()}


def _rows_by_user(users: np.ndarray) -> Iterable[Tuple[int, np.ndarray]]:
    """Yield ``(user, row positions)`` in ascending user order, rows in original order."""
    order = np.argsort(users, kind='stable')
    boundaries = np.flatnonzero(np.diff(users[order])) + 1
    for rows in np.split(order, boundaries):
        if rows.size:
            yield int(users[rows[0]]), rows


def split_random(ds: InteractionDataset, test_fraction: float, seed: int) -> InteractionDataset:
    """Per-user random split: ``round(test_fraction * n_u)`` items go to test.

    Every user keeps at least one train item.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f'test_fraction must be in (0, 1), got {test_fraction}')
    if ds.is_split:
        raise ConfigurationError('dataset is already split')
    rng = np.random.default_rng(seed)
    pairs = ds.train_pairs
    train_mask = np.ones(pairs.shape[0], dtype=bool)
    clamped = 0
    for _, rows in _rows_by_user(pairs[:, 0]):
        n_test = _round_half_up(test_fraction * rows.size)
        if n_test > rows.size - 1:
            n_test = rows.size - 1
            clamped += 1
        if n_test > 0:
            train_mask[rng.choice(rows, size=n_test, replace=False)] = False
    if clamped:
        logger.info(f'{clamped} users kept one train item despite the test fraction')

    train = pairs[train_mask]
    test: Dict[int, set] = {}
    for u, i in pairs[~train_mask].tolist():
        test.setdefault(u, set()).add(i)
    return InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        train_pairs=train,
        per_user_positives=_group_positives(train, ds.num_users),
        test={u: frozenset(items) for u, items in sorted(test.items())},
        validation=None,
        train_timestamps=None if ds.train_timestamps is None else ds.train_timestamps[train_mask],
        user_ids=ds.user_ids,
        item_ids=ds.item_ids,
        split='random',
        seed=seed,
    )


def split_leave_one_out(ds: InteractionDataset) -> InteractionDataset:
    """Latest record to test, second latest to validation, the rest to train.

    Timestamp ties are broken by ascending item index. Users with fewer than
    three records stay entirely in train and are not evaluated.
    """
    if ds.train_timestamps is None:
        raise ConfigurationError('leave-one-out split needs a timestamp on every record')
    if ds.is_split:
        raise ConfigurationError('dataset is already split')
    pairs, ts = ds.train_pairs, ds.train_timestamps
    order = np.lexsort((pairs[:, 1], ts, pairs[:, 0]))
    train_mask = np.ones(pairs.shape[0], dtype=bool)
    validation: Dict[int, int] = {}
    test: Dict[int, FrozenSet[int]] = {}

    sorted_users = pairs[order, 0]
    boundaries = np.flatnonzero(np.diff(sorted_users)) + 1
    for rows in np.split(order, boundaries):
        if rows.size < 3:
            continue
        u = int(pairs[rows[0], 0])
        test[u] = frozenset([int(pairs[rows[-1], 1])])
        validation[u] = int(pairs[rows[-2], 1])
        train_mask[rows[-2:]] = False

    train = pairs[train_mask]
    return InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        train_pairs=train,
        per_user_positives=_group_positives(train, ds.num_users),
        test=dict(sorted(test.items())),
        validation=dict(sorted(validation.items())),
        train_timestamps=ts[train_mask],
        user_ids=ds.user_ids,
        item_ids=ds.item_ids,
        split='leave_one_out',
        seed=None,
    )


def build_false_negative_set(ds: InteractionDataset, flip_fraction: float, sigma: float,
                             seed: int) -> FalseNegativeSet:
    """Flip a fraction of each user's test items into known false negatives.

    F_u and its σ-subsample come from independent seed streams, so sweeping
    σ under a fixed seed keeps F unchanged.
    """
    if not ds.test:
        raise ConfigurationError('false negatives are drawn from the test split; dataset has none')
    for name, value in (('flip_fraction', flip_fraction), ('sigma', sigma)):
        if not 0.0 <= value <= 1.0:
            raise ConfigurationError(f'{name} must be in [0, 1], got {value}')

    flip_rng = np.random.default_rng([seed, 1])
    sigma_rng = np.random.default_rng([seed, 2])
    per_user: Dict[int, FrozenSet[int]] = {}
    active: Dict[int, FrozenSet[int]] = {}
    for u in sorted(ds.test):
        ground_truth = np.array(sorted(ds.test[u]), dtype=np.int64)
        flipped = flip_rng.choice(ground_truth, size=_round_half_up(flip_fraction * ground_truth.size),
                                  replace=False)
        flipped.sort()
        chosen = sigma_rng.choice(flipped, size=_round_half_up(sigma * flipped.size), replace=False)
        per_user[u] = frozenset(int(i) for i in flipped)
        active[u] = frozenset(int(i) for i in chosen)

    fns = FalseNegativeSet(ds.num_items, per_user, active, sigma, flip_fraction)
    logger.info(f'False negatives: {fns.total_size} flipped, {fns.active_size} active', sigma=sigma)
    return fns


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def save_snapshot(ds: InteractionDataset, directory: Union[str, Path], source_hash: str,
                  params: Optional[Mapping[str, object]] = None) -> Path:
    """Write train/valid/test TSVs and ``meta.json`` into ``directory``."""
    if not ds.is_split:
        raise ConfigurationError('only split datasets can be snapshotted')
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    columns = ['user_index', 'item_index']
    valid_rows = sorted((ds.validation or {}).items())
    test_rows = sorted((u, i) for u, items in ds.test.items() for i in items)
    frames = {
        'train.tsv': pd.DataFrame(ds.train_pairs, columns=columns),
        'valid.tsv': pd.DataFrame(valid_rows, columns=columns, dtype=np.int64),
        'test.tsv': pd.DataFrame(test_rows, columns=columns, dtype=np.int64),
    }
    content = hashlib.sha256()
    for name in SNAPSHOT_FILES:
        frames[name].to_csv(directory / name, sep='\t', index=False, lineterminator='\n')
        content.update(sha256_file(directory / name).encode('ascii'))

    meta = {
        'num_users': ds.num_users,
        'num_items': ds.num_items,
        'seed': ds.seed,
        'source_hash': source_hash,
        'split': ds.split,
        'content_hash': content.hexdigest(),
        'params': dict(params or {}),
    }
    with open(directory / 'meta.json', 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('Dataset snapshot written', path=str(directory))
    return directory


def load_snapshot(directory: Union[str, Path]) -> InteractionDataset:
    """Read a snapshot written by :func:`save_snapshot`."""
    directory = Path(directory)
    meta_path = directory / 'meta.json'
    if not meta_path.exists():
        raise MissingArtifactError(meta_path, 'dataset snapshot')
    with open(meta_path, 'r', encoding='utf-8') as f:
        meta = json.load(f)

    def read(name: str) -> np.ndarray:
        path = directory / name
        if not path.exists():
            raise MissingArtifactError(path, 'snapshot file')
        frame = pd.read_csv(path, sep='\t', dtype=np.int64)
        return frame[['user_index', 'item_index']].to_numpy(dtype=np.int64).reshape(-1, 2)

    train, valid, test_pairs = (read(name) for name in SNAPSHOT_FILES)
    num_users, num_items = int(meta['num_users']), int(meta['num_items'])
    test: Dict[int, set] = {}
    for u, i in test_pairs.tolist():
        test.setdefault(u, set()).add(i)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train_pairs=train,
        per_user_positives=_group_positives(train, num_users),
        test={u: frozenset(items) for u, items in sorted(test.items())},
        validation={int(u): int(i) for u, i in valid.tolist()} if valid.size else None,
        split=meta.get('split', 'random'),
        seed=meta.get('seed'),
    )
