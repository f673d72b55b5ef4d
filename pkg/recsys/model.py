"""Scoring functions, pairwise loss and Adam updates.

Two scorers share one interface:

* GMF: ``r = beta . (p_u * q_i)``
* MLP: ``z_0 = [p_u; q_i]``, sigmoid hidden layers halving the width,
  linear output layer. With zero hidden layers it is a linear model over the
  concatenation.

Training minimises, over a batch of triplets (u, i, j),
``mean(softplus(-(r_ui - r_uj)) + reg * (|p_u|^2 + |q_i|^2 + |q_j|^2))``
with Adam. Embedding tables use lazy row-sparse Adam: only rows touched by the
batch have their moments and values updated. Bias correction always uses the
global step count.
"""
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple, Union
import json

import numpy as np
from scipy.special import expit

from .data import sha256_file
from .exceptions import ConfigurationError, MissingArtifactError, NumericalError
from .structured_logging import get_training_logger

logger = get_training_logger()

INIT_STD = 0.01
# Rows scored per chunk by the batched scoring helpers
SCORE_CHUNK = 1 << 16


class ScorerKind(str, Enum):
    GMF = 'gmf'
    MLP = 'mlp'


@dataclass(frozen=True)
class TrainHyper:
    embedding_dim: int = 8
    learning_rate: float = 1e-3
    l2_reg: float = 1e-3
    batch_size: int = 1024
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mlp_hidden_layers: int = 0

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigurationError(f'embedding_dim must be >= 1, got {self.embedding_dim}')
        if self.learning_rate < 0:
            raise ConfigurationError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if self.l2_reg < 0:
            raise ConfigurationError(f'l2_reg must be >= 0, got {self.l2_reg}')
        if self.batch_size < 1:
            raise ConfigurationError(f'batch_size must be >= 1, got {self.batch_size}')
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError('Adam betas must lie in [0, 1)')
        if self.adam_eps <= 0:
            raise ConfigurationError('adam_eps must be > 0')
        if self.mlp_hidden_layers < 0:
            raise ConfigurationError('mlp_hidden_layers must be >= 0')


@dataclass
class ModelState:
    """Embedding tables, scorer parameters and Adam moments.

    ``adam_m`` and ``adam_v`` are keyed like :meth:`parameters`: ``user``,
    ``item`` and the scorer parameter names.
    """

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    scorer_params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    scorer: ScorerKind = ScorerKind.GMF
    step_count: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def hidden_layers(self) -> int:
        if self.scorer is ScorerKind.GMF:
            return 0
        return sum(1 for name in self.scorer_params if name.startswith('W')) - 1

    def parameters(self) -> Dict[str, np.ndarray]:
        return {'user': self.user_embeddings, 'item': self.item_embeddings, **self.scorer_params}

    def copy(self) -> 'ModelState':
        return ModelState(
            user_embeddings=self.user_embeddings.copy(),
            item_embeddings=self.item_embeddings.copy(),
            scorer_params={k: v.copy() for k, v in self.scorer_params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            scorer=self.scorer,
            step_count=self.step_count,
            meta=dict(self.meta),
        )


def mlp_widths(embedding_dim: int, hidden_layers: int) -> Tuple[int, ...]:
    """Layer widths ``d_0 = 2F, d_l = d_{l-1} / 2`` ending in the scalar output."""
    d0 = 2 * embedding_dim
    if d0 % (2 ** hidden_layers):
        raise ConfigurationError(
            f'MLP input width {d0} is not divisible by 2^{hidden_layers}; '
            'lower mlp_hidden_layers or raise embedding_dim'
        )
    return tuple(d0 // 2 ** level for level in range(hidden_layers + 1)) + (1,)


def init(num_users: int, num_items: int, hyper: TrainHyper,
         scorer: Union[str, ScorerKind] = ScorerKind.GMF, seed=0) -> ModelState:
    """Fresh model: weights ~ N(0, 0.01^2), biases and moments zero.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    if num_users < 1 or num_items < 1:
        raise ConfigurationError('num_users and num_items must be positive')
    scorer = ScorerKind(scorer)
    rng = np.random.default_rng(seed)
    dim = hyper.embedding_dim

    user_embeddings = rng.normal(0.0, INIT_STD, size=(num_users, dim))
    item_embeddings = rng.normal(0.0, INIT_STD, size=(num_items, dim))
    params: Dict[str, np.ndarray] = {}
    if scorer is ScorerKind.GMF:
        params['beta'] = rng.normal(0.0, INIT_STD, size=dim)
    else:
        widths = mlp_widths(dim, hyper.mlp_hidden_layers)
        last = len(widths) - 1
        for level in range(1, last):
            params[f'W{level}'] = rng.normal(0.0, INIT_STD, size=(widths[level], widths[level - 1]))
            params[f'b{level}'] = np.zeros(widths[level])
        params[f'W{last}'] = rng.normal(0.0, INIT_STD, size=widths[last - 1])
        params[f'b{last}'] = np.zeros(1)

    state = ModelState(
        user_embeddings=user_embeddings,
        item_embeddings=item_embeddings,
        scorer_params=params,
        adam_m={},
        adam_v={},
        scorer=scorer,
    )
    state.adam_m = {k: np.zeros_like(v) for k, v in state.parameters().items()}
    state.adam_v = {k: np.zeros_like(v) for k, v in state.parameters().items()}
    return state


class GMFScorer:
    """``r = beta . (p * q)``."""

    def forward(self, params, P, Q):
        r = (P * Q) @ params['beta']
        return r, (P, Q)

    def backward(self, params, cache, dr):
        P, Q = cache
        beta = params['beta']
        dP = dr[:, None] * Q * beta
        dQ = dr[:, None] * P * beta
        dbeta = (dr[:, None] * P * Q).sum(axis=0)
        return dP, dQ, {'beta': dbeta}

    def score_matrix(self, params, P, Q):
        return (P * params['beta']) @ Q.T


class MLPScorer:
    """Sigmoid tower over ``[p; q]`` with a linear output layer."""

    @staticmethod
    def _depth(params) -> int:
        return sum(1 for name in params if name.startswith('W'))

    def forward(self, params, P, Q):
        depth = self._depth(params)
        z = np.concatenate([P, Q], axis=1)
        activations = [z]
        for level in range(1, depth):
            z = expit(z @ params[f'W{level}'].T + params[f'b{level}'])
            activations.append(z)
        r = z @ params[f'W{depth}'] + params[f'b{depth}'][0]
        return r, activations

    def backward(self, params, activations, dr):
        depth = self._depth(params)
        grads = {
            f'W{depth}': activations[-1].T @ dr,
            f'b{depth}': np.array([dr.sum()]),
        }
        dz = dr[:, None] * params[f'W{depth}']
        for level in range(depth - 1, 0, -1):
            z = activations[level]
            da = dz * z * (1.0 - z)
            grads[f'W{level}'] = da.T @ activations[level - 1]
            grads[f'b{level}'] = da.sum(axis=0)
            dz = da @ params[f'W{level}']
        dim = dz.shape[1] // 2
        return dz[:, :dim], dz[:, dim:], grads

    def score_matrix(self, params, P, Q):
        # First layer splits over the concatenation: W [p; q] = W_p p + W_q q
        depth = self._depth(params)
        dim = P.shape[1]
        W1 = params['W1']
        if depth == 1:
            return (P @ W1[:dim])[:, None] + (Q @ W1[dim:])[None, :] + params['b1'][0]
        pre = (P @ W1[:, :dim].T)[:, None, :] + (Q @ W1[:, dim:].T)[None, :, :] + params['b1']
        z = expit(pre)
        for level in range(2, depth):
            z = expit(z @ params[f'W{level}'].T + params[f'b{level}'])
        return z @ params[f'W{depth}'] + params[f'b{depth}'][0]


_SCORERS = {ScorerKind.GMF: GMFScorer(), ScorerKind.MLP: MLPScorer()}


def get_scorer(kind: Union[str, ScorerKind]):
    return _SCORERS[ScorerKind(kind)]


def p_neg(r_ui, r_uj):
    """Probability that (u, j) is a true negative: ``sigmoid(r_ui - r_uj)``."""
    return expit(np.subtract(r_ui, r_uj))


def p_pos(r_ui, r_uj):
    return expit(np.subtract(r_uj, r_ui))


def pair_loss(r_ui, r_uj):
    """``-log sigmoid(r_ui - r_uj)`` in softplus form."""
    return np.logaddexp(0.0, -np.subtract(r_ui, r_uj))


def _chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def score_pairs(state: ModelState, users, items) -> np.ndarray:
    """Scores of broadcast ``(users, items)`` index arrays, same shape as the broadcast."""
    users, items = np.broadcast_arrays(np.asarray(users, dtype=np.int64),
                                       np.asarray(items, dtype=np.int64))
    shape = users.shape
    users, items = users.ravel(), items.ravel()
    scorer = get_scorer(state.scorer)
    out = np.empty(users.shape[0])
    for chunk in _chunks(users.shape[0], SCORE_CHUNK):
        out[chunk], _ = scorer.forward(state.scorer_params,
                                       state.user_embeddings[users[chunk]],
                                       state.item_embeddings[items[chunk]])
    return out.reshape(shape)


def score(state: ModelState, u: int, i: int) -> float:
    return float(score_pairs(state, [u], [i])[0])


def score_user_items(state: ModelState, u: int, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    return score_pairs(state, np.full(items.shape, u, dtype=np.int64), items)


def score_matrix(state: ModelState, users, items=None) -> np.ndarray:
    """Dense ``(len(users), len(items))`` score table; all items when ``items`` is None."""
    users = np.asarray(users, dtype=np.int64)
    Q = state.item_embeddings if items is None else state.item_embeddings[np.asarray(items, dtype=np.int64)]
    scorer = get_scorer(state.scorer)
    if state.scorer is ScorerKind.GMF:
        return scorer.score_matrix(state.scorer_params, state.user_embeddings[users], Q)
    width = state.scorer_params['W1'].shape[0] if state.hidden_layers else 1
    rows = max(1, SCORE_CHUNK * 16 // max(Q.shape[0] * width, 1))
    out = np.empty((users.shape[0], Q.shape[0]))
    for chunk in _chunks(users.shape[0], rows):
        out[chunk] = scorer.score_matrix(state.scorer_params, state.user_embeddings[users[chunk]], Q)
    return out


def batch_objective(state: ModelState, users, pos_items, neg_items, l2_reg: float) -> float:
    """Mean regularised pair loss of a batch; the function ``grad_and_step`` descends."""
    users = np.asarray(users, dtype=np.int64)
    r_ui = score_pairs(state, users, pos_items)
    r_uj = score_pairs(state, users, neg_items)
    P = state.user_embeddings[users]
    Qi = state.item_embeddings[np.asarray(pos_items, dtype=np.int64)]
    Qj = state.item_embeddings[np.asarray(neg_items, dtype=np.int64)]
    norms = (P ** 2).sum(axis=1) + (Qi ** 2).sum(axis=1) + (Qj ** 2).sum(axis=1)
    return float(np.mean(pair_loss(r_ui, r_uj) + l2_reg * norms))


@dataclass
class BatchGradients:
    """Gradients of one batch; row gradients are summed per distinct row."""

    losses: np.ndarray
    finite: np.ndarray
    user_rows: np.ndarray
    user_grad: np.ndarray
    item_rows: np.ndarray
    item_grad: np.ndarray
    scorer_grads: Dict[str, np.ndarray]

    def all_finite(self) -> bool:
        return (bool(self.finite.all())
                and all(np.isfinite(g).all() for g in self.scorer_grads.values()))


def compute_gradients(state: ModelState, users, pos_items, neg_items,
                      l2_reg: float) -> BatchGradients:
    """Analytic gradients of :func:`batch_objective`."""
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    batch = users.shape[0]
    scorer = get_scorer(state.scorer)
    params = state.scorer_params

    P = state.user_embeddings[users]
    Qi = state.item_embeddings[pos_items]
    Qj = state.item_embeddings[neg_items]
    r_ui, cache_i = scorer.forward(params, P, Qi)
    r_uj, cache_j = scorer.forward(params, P, Qj)
    x = r_ui - r_uj
    losses = np.logaddexp(0.0, -x)

    # d softplus(-x) / dx = -sigmoid(-x)
    dx = -expit(-x) / batch
    dP_i, dQi, grads_i = scorer.backward(params, cache_i, dx)
    dP_j, dQj, grads_j = scorer.backward(params, cache_j, -dx)
    scale = 2.0 * l2_reg / batch
    dP = dP_i + dP_j + scale * P
    dQi = dQi + scale * Qi
    dQj = dQj + scale * Qj
    scorer_grads = {k: grads_i[k] + grads_j[k] for k in grads_i}
    finite = (np.isfinite(losses) & np.isfinite(dP).all(axis=1)
              & np.isfinite(dQi).all(axis=1) & np.isfinite(dQj).all(axis=1))

    user_rows, user_inv = np.unique(users, return_inverse=True)
    user_grad = np.zeros((user_rows.shape[0], P.shape[1]))
    np.add.at(user_grad, user_inv, dP)

    item_idx = np.concatenate([pos_items, neg_items])
    item_rows, item_inv = np.unique(item_idx, return_inverse=True)
    item_grad = np.zeros((item_rows.shape[0], P.shape[1]))
    np.add.at(item_grad, item_inv, np.concatenate([dQi, dQj]))
    return BatchGradients(losses, finite, user_rows, user_grad, item_rows, item_grad, scorer_grads)


def _adam_update(param, m, v, grad, hyper: TrainHyper, step: int, rows=None):
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    if rows is None:
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad ** 2
        m_rows, v_rows = m, v
    else:
        m_rows = b1 * m[rows] + (1.0 - b1) * grad
        v_rows = b2 * v[rows] + (1.0 - b2) * grad ** 2
        m[rows] = m_rows
        v[rows] = v_rows
    m_hat = m_rows / (1.0 - b1 ** step)
    v_hat = v_rows / (1.0 - b2 ** step)
    delta = hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.adam_eps)
    if rows is None:
        param -= delta
    else:
        param[rows] -= delta


def grad_and_step(state: ModelState, users, pos_items, neg_items, hyper: TrainHyper,
                  context: Optional[Dict[str, Any]] = None) -> Tuple[ModelState, float]:
    """One Adam step on a batch of triplets, in place.

    Returns the same state object and the batch's mean pair loss (without the
    regularisation term).

    Raises:
        NumericalError: a loss or gradient is not finite; the message names
            the first offending triplet and carries ``context``.
    """
    users = np.asarray(users, dtype=np.int64)
    pos_items = np.asarray(pos_items, dtype=np.int64)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    grads = compute_gradients(state, users, pos_items, neg_items, hyper.l2_reg)

    if not grads.all_finite():
        bad = np.flatnonzero(~grads.finite)
        # Scorer gradients are batch sums; without a per-row culprit blame the first triplet
        k = int(bad[0]) if bad.size else 0
        raise NumericalError(
            'non-finite loss or gradient',
            {**(context or {}), 'triplet': (int(users[k]), int(pos_items[k]), int(neg_items[k]))},
        )

    state.step_count += 1
    step = state.step_count
    if hyper.learning_rate == 0:
        return state, float(grads.losses.mean())
    _adam_update(state.user_embeddings, state.adam_m['user'], state.adam_v['user'],
                 grads.user_grad, hyper, step, rows=grads.user_rows)
    _adam_update(state.item_embeddings, state.adam_m['item'], state.adam_v['item'],
                 grads.item_grad, hyper, step, rows=grads.item_rows)
    for name, grad in grads.scorer_grads.items():
        _adam_update(state.scorer_params[name], state.adam_m[name], state.adam_v[name],
                     grad, hyper, step)
    return state, float(grads.losses.mean())


def save_checkpoint(state: ModelState, path: Union[str, Path],
                    hyper: Optional[TrainHyper] = None) -> Path:
    """Write every parameter and moment array into a single ``.npz`` file."""
    path = Path(path)
    if path.suffix != '.npz':
        path = path.with_suffix('.npz')
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        'scorer': state.scorer.value,
        'num_users': state.num_users,
        'num_items': state.num_items,
        'embedding_dim': state.embedding_dim,
        'hidden_layers': state.hidden_layers,
        'step_count': state.step_count,
        'scorer_params': sorted(state.scorer_params),
        'hyper': None if hyper is None else asdict(hyper),
        **state.meta,
    }
    arrays = {'meta': np.array(json.dumps(meta, sort_keys=True, default=str))}
    for name, value in state.parameters().items():
        arrays[f'param__{name}'] = value
        arrays[f'm__{name}'] = state.adam_m[name]
        arrays[f'v__{name}'] = state.adam_v[name]
    np.savez(path, **arrays)
    logger.info('Checkpoint saved', path=str(path))
    logger.info(f'Checkpoint SHA256: {sha256_file(path)}')
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, 'checkpoint')
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive['meta']))
        names = ['user', 'item'] + list(meta['scorer_params'])
        params = {name: archive[f'param__{name}'].copy() for name in names}
        adam_m = {name: archive[f'm__{name}'].copy() for name in names}
        adam_v = {name: archive[f'v__{name}'].copy() for name in names}
    state = ModelState(
        user_embeddings=params.pop('user'),
        item_embeddings=params.pop('item'),
        scorer_params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        scorer=ScorerKind(meta['scorer']),
        step_count=int(meta['step_count']),
    )
    if state.num_users != meta['num_users'] or state.num_items != meta['num_items']:
        raise ConfigurationError(f'{path}: checkpoint shapes do not match its metadata')
    logger.info('Checkpoint loaded', path=str(path))
    return state


def checkpoint_meta(path: Union[str, Path]) -> Dict[str, Any]:
    with np.load(path, allow_pickle=False) as archive:
        return json.loads(str(archive['meta']))
