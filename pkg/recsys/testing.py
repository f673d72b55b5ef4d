"""Small fixtures shared by the test modules."""
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import InteractionDataset, RawInteraction, build_index, split_leave_one_out, split_random
from .model import ModelState, ScorerKind


def toy_records(num_users: int = 8, num_items: int = 40, per_user: int = 10,
                seed: int = 0) -> list:
    """``per_user`` distinct items per user, rated 5, with increasing timestamps."""
    rng = np.random.default_rng(seed)
    records = []
    clock = 1_000_000
    for u in range(num_users):
        for i in rng.choice(num_items, size=per_user, replace=False):
            clock += 1
            records.append(RawInteraction(f'u{u}', f'i{int(i)}', 5.0, clock))
    return records


def write_toy_ratings(path: Union[str, Path], num_users: int = 8, num_items: int = 40,
                      per_user: int = 10, seed: int = 0, low_rated: int = 2,
                      sep: str = '\t') -> Path:
    """Raw ``user item rating timestamp`` file; ``low_rated`` extra 2-star lines per user."""
    path = Path(path)
    rng = np.random.default_rng(seed + 1)
    lines = []
    for r in toy_records(num_users, num_items, per_user, seed):
        lines.append(sep.join([r.user_id, r.item_id, str(int(r.rating)), str(r.timestamp)]))
    for u in range(num_users):
        for i in rng.choice(num_items, size=low_rated, replace=False):
            lines.append(sep.join([f'u{u}', f'x{int(i)}', '2', '999']))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def toy_dataset(num_users: int = 8, num_items: int = 40, per_user: int = 10, seed: int = 0,
                split: str = 'random', test_fraction: float = 0.2) -> InteractionDataset:
    ds = build_index(toy_records(num_users, num_items, per_user, seed))
    if split == 'leave_one_out':
        return split_leave_one_out(ds)
    return split_random(ds, test_fraction, seed)


def dataset_from_pairs(num_users: int, num_items: int, train: Sequence[tuple],
                       test: Optional[dict] = None, validation: Optional[dict] = None,
                       split: str = 'random') -> InteractionDataset:
    pairs = np.array(train, dtype=np.int64).reshape(-1, 2)
    positives = {u: set() for u in range(num_users)}
    for u, i in pairs.tolist():
        positives[u].add(i)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train_pairs=pairs,
        per_user_positives={u: frozenset(items) for u, items in positives.items()},
        test={u: frozenset(items) for u, items in (test or {}).items()},
        validation=validation,
        split=split,
    )


def fixed_score_state(item_scores: np.ndarray, num_users: int = 1) -> ModelState:
    """GMF state with F = 1 whose score for every user and item ``i`` is ``item_scores[i]``."""
    item_scores = np.asarray(item_scores, dtype=np.float64)
    params = {'beta': np.ones(1)}
    users = np.ones((num_users, 1))
    items = item_scores[:, None].copy()
    zeros = {'user': np.zeros_like(users), 'item': np.zeros_like(items), 'beta': np.zeros(1)}
    return ModelState(
        user_embeddings=users,
        item_embeddings=items,
        scorer_params=params,
        adam_m={k: v.copy() for k, v in zeros.items()},
        adam_v={k: v.copy() for k, v in zeros.items()},
        scorer=ScorerKind.GMF,
    )
