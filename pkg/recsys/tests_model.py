import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from recsys.exceptions import ConfigurationError, MissingArtifactError, NumericalError
from recsys.model import (
    ModelState, ScorerKind, TrainHyper, batch_objective, checkpoint_meta, compute_gradients,
    grad_and_step, init, load_checkpoint, mlp_widths, p_neg, p_pos, pair_loss, save_checkpoint,
    score, score_matrix, score_pairs,
)


def gmf_state(P, Q, beta):
    P, Q, beta = (np.array(x, dtype=np.float64) for x in (P, Q, beta))
    state = ModelState(P, Q, {'beta': beta}, {}, {}, ScorerKind.GMF)
    state.adam_m = {k: np.zeros_like(v) for k, v in state.parameters().items()}
    state.adam_v = {k: np.zeros_like(v) for k, v in state.parameters().items()}
    return state


class ScoreTests(SimpleTestCase):
    def test_gmf_examples(self):
        self.assertEqual(score(gmf_state([[1, 0]], [[1, 0]], [1, 1]), 0, 0), 1.0)
        self.assertEqual(score(gmf_state([[0, 0]], [[3, -2]], [5, 7]), 0, 0), 0.0)
        self.assertAlmostEqual(score(gmf_state([[0.5, 2]], [[2, 0.5]], [1, 2]), 0, 0), 3.0, places=12)

    def test_gmf_is_bilinear(self):
        rng = np.random.default_rng(0)
        state = gmf_state(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=4))
        before = score(state, 0, 0)
        state.user_embeddings *= 3.0
        self.assertAlmostEqual(score(state, 0, 0), 3.0 * before, places=12)

    def test_mlp_matches_layer_by_layer(self):
        hyper = TrainHyper(embedding_dim=4, mlp_hidden_layers=2)
        state = init(2, 3, hyper, ScorerKind.MLP, seed=1)
        rng = np.random.default_rng(2)
        for p in state.parameters().values():
            p[...] = rng.normal(0.0, 0.5, size=p.shape)
        params = state.scorer_params
        z = np.concatenate([state.user_embeddings[1], state.item_embeddings[2]])
        for level in (1, 2):
            z = 1.0 / (1.0 + np.exp(-(params[f'W{level}'] @ z + params[f'b{level}'])))
        expected = params['W3'] @ z + params['b3'][0]
        self.assertAlmostEqual(score(state, 1, 2), expected, places=12)

    def test_score_matrix_agrees_with_pairs(self):
        for scorer, layers in ((ScorerKind.GMF, 0), (ScorerKind.MLP, 0), (ScorerKind.MLP, 2)):
            hyper = TrainHyper(embedding_dim=4, mlp_hidden_layers=layers)
            state = init(3, 5, hyper, scorer, seed=3)
            rng = np.random.default_rng(4)
            for p in state.parameters().values():
                p[...] = rng.normal(0.0, 0.5, size=p.shape)
            users = np.arange(3)
            table = score_matrix(state, users)
            pairs = score_pairs(state, users[:, None], np.arange(5)[None, :])
            np.testing.assert_allclose(table, pairs, rtol=1e-12, atol=1e-12)


class ProbabilityTests(SimpleTestCase):
    def test_p_neg(self):
        self.assertEqual(p_neg(0.3, 0.3), 0.5)
        self.assertGreaterEqual(p_neg(20.0, 0.0), 1 - 1e-8)
        self.assertAlmostEqual(p_neg(1.0, 0.0), 0.7310586, delta=1e-6)
        for a, b in ((0.1, 2.0), (-5.0, 3.0), (40.0, -40.0)):
            self.assertAlmostEqual(p_neg(a, b) + p_neg(b, a), 1.0, delta=1e-12)
            self.assertAlmostEqual(p_pos(a, b), 1.0 - p_neg(a, b), delta=1e-12)

    def test_pair_loss(self):
        self.assertAlmostEqual(pair_loss(1.0, 1.0), math.log(2), places=12)
        self.assertAlmostEqual(pair_loss(20.0, 0.0), 2.06e-9, delta=1e-11)
        self.assertAlmostEqual(pair_loss(0.0, 20.0), 20.0, places=6)
        self.assertTrue(np.isfinite(pair_loss(0.0, 1000.0)))
        for x in (0.0, 0.5, -3.0, 12.0):
            self.assertGreaterEqual(pair_loss(x, 0.0) + pair_loss(-x, 0.0), 2 * math.log(2) - 1e-15)


class InitTests(SimpleTestCase):
    def test_deterministic(self):
        hyper = TrainHyper(embedding_dim=4)
        a, b = init(3, 5, hyper, seed=9), init(3, 5, hyper, seed=9)
        for name, value in a.parameters().items():
            np.testing.assert_array_equal(value, b.parameters()[name])

    def test_shapes(self):
        self.assertEqual(mlp_widths(8, 3), (16, 8, 4, 2, 1))
        state = init(2, 2, TrainHyper(embedding_dim=4), ScorerKind.GMF)
        self.assertEqual(state.scorer_params['beta'].shape, (4,))
        mlp = init(2, 2, TrainHyper(embedding_dim=8, mlp_hidden_layers=3), ScorerKind.MLP)
        self.assertEqual(mlp.scorer_params['W1'].shape, (8, 16))
        self.assertEqual(mlp.scorer_params['W4'].shape, (2,))
        self.assertEqual(mlp.hidden_layers, 3)
        self.assertFalse(mlp.scorer_params['b1'].any())

    def test_indivisible_width(self):
        with self.assertRaises(ConfigurationError):
            init(2, 3, TrainHyper(embedding_dim=3, mlp_hidden_layers=2), ScorerKind.MLP)


class GradientCheckTests(SimpleTestCase):
    """Analytic gradients against central differences of the batch objective."""

    h = 1e-5

    def dense_gradients(self, state, grads):
        dense = {name: np.zeros_like(value) for name, value in state.parameters().items()}
        dense['user'][grads.user_rows] = grads.user_grad
        dense['item'][grads.item_rows] = grads.item_grad
        dense.update(grads.scorer_grads)
        return dense

    def check(self, scorer, embedding_dim, layers, instances=100):
        rng = np.random.default_rng(embedding_dim * 10 + layers)
        hyper = TrainHyper(embedding_dim=embedding_dim, mlp_hidden_layers=layers)
        worst = 0.0
        for _ in range(instances):
            state = init(2, 3, hyper, scorer, seed=rng)
            for p in state.parameters().values():
                p[...] = rng.normal(0.0, 0.7, size=p.shape)
            users = rng.integers(0, 2, size=2)
            pos = rng.integers(0, 3, size=2)
            neg = (pos + rng.integers(1, 3, size=2)) % 3
            reg = float(rng.uniform(0.0, 0.1))
            analytic = self.dense_gradients(state, compute_gradients(state, users, pos, neg, reg))
            for name, param in state.parameters().items():
                for index in np.ndindex(param.shape):
                    original = param[index]
                    param[index] = original + self.h
                    up = batch_objective(state, users, pos, neg, reg)
                    param[index] = original - self.h
                    down = batch_objective(state, users, pos, neg, reg)
                    param[index] = original
                    numeric = (up - down) / (2 * self.h)
                    a = analytic[name][index]
                    worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
        self.assertLessEqual(worst, 1e-4)

    def test_gmf(self):
        self.check(ScorerKind.GMF, 3, 0)

    def test_mlp_one_hidden_layer(self):
        self.check(ScorerKind.MLP, 3, 1)

    def test_mlp_two_hidden_layers(self):
        self.check(ScorerKind.MLP, 4, 2)

    def test_mlp_linear(self):
        self.check(ScorerKind.MLP, 3, 0, instances=20)


class StepTests(SimpleTestCase):
    def test_difference_gradient_at_zero(self):
        state = gmf_state([[1, 1]], [[1, 0], [0, 1]], [1, 1])
        grads = compute_gradients(state, [0], [0], [1], l2_reg=0.0)
        np.testing.assert_allclose(grads.scorer_grads['beta'], [-0.5, 0.5])
        self.assertAlmostEqual(float(grads.losses[0]), math.log(2), places=12)

    def test_zero_learning_rate_leaves_parameters(self):
        hyper = TrainHyper(embedding_dim=4, learning_rate=0.0)
        state = init(3, 6, hyper, seed=0)
        before = state.copy()
        state, loss = grad_and_step(state, [0, 1], [2, 3], [4, 5], hyper)
        self.assertEqual(state.step_count, 1)
        self.assertTrue(np.isfinite(loss))
        for name, value in before.parameters().items():
            np.testing.assert_array_equal(state.parameters()[name], value)
        for name in before.adam_m:
            np.testing.assert_array_equal(state.adam_m[name], before.adam_m[name])
            np.testing.assert_array_equal(state.adam_v[name], before.adam_v[name])

    def test_lazy_rows_and_first_step_size(self):
        hyper = TrainHyper(embedding_dim=4, learning_rate=0.01, l2_reg=0.0)
        state = init(3, 6, hyper, seed=0)
        rng = np.random.default_rng(1)
        # Unit-scale weights keep every gradient far above adam_eps
        for p in state.parameters().values():
            p[...] = rng.normal(0.0, 1.0, size=p.shape)
        before = state.copy()
        grad_and_step(state, [0], [1], [2], hyper)
        np.testing.assert_array_equal(state.user_embeddings[1:], before.user_embeddings[1:])
        np.testing.assert_array_equal(state.item_embeddings[3:], before.item_embeddings[3:])
        np.testing.assert_array_equal(state.adam_m['item'][0], 0.0)
        # First Adam step moves every coordinate with a non-zero gradient by about lr
        moved = np.abs(state.user_embeddings[0] - before.user_embeddings[0])
        np.testing.assert_allclose(moved, 0.01, rtol=1e-3)

    def test_loss_decreases_on_repeated_batch(self):
        hyper = TrainHyper(embedding_dim=4, learning_rate=0.05, l2_reg=0.0)
        state = init(2, 4, hyper, seed=5)
        _, first = grad_and_step(state, [0, 1], [0, 1], [2, 3], hyper)
        for _ in range(50):
            _, last = grad_and_step(state, [0, 1], [0, 1], [2, 3], hyper)
        self.assertLess(last, first)

    def test_non_finite_names_triplet(self):
        hyper = TrainHyper(embedding_dim=2)
        state = gmf_state([[np.inf, 1.0]], [[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
        with self.assertRaises(NumericalError) as ctx:
            grad_and_step(state, [0], [0], [1], hyper, context={'epoch': 3, 'batch': 7})
        self.assertEqual(ctx.exception.context['triplet'], (0, 0, 1))
        self.assertEqual(ctx.exception.context['epoch'], 3)
        self.assertEqual(ctx.exception.exit_code, 3)


class CheckpointTests(SimpleTestCase):
    def test_round_trip(self):
        hyper = TrainHyper(embedding_dim=4, mlp_hidden_layers=1)
        state = init(3, 5, hyper, ScorerKind.MLP, seed=2)
        grad_and_step(state, [0, 1], [1, 2], [3, 4], hyper)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(state, Path(tmp) / 'model.npz', hyper)
            loaded = load_checkpoint(path)
            meta = checkpoint_meta(path)
        self.assertEqual(loaded.scorer, ScorerKind.MLP)
        self.assertEqual(loaded.step_count, 1)
        self.assertEqual(meta['hyper']['embedding_dim'], 4)
        for name, value in state.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name], value)
            np.testing.assert_array_equal(loaded.adam_v[name], state.adam_v[name])

    def test_missing(self):
        with self.assertRaises(MissingArtifactError):
            load_checkpoint('/nonexistent/checkpoint.npz')
