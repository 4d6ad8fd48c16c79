import numpy as np
import numpy.testing as npt
import pytest

from egckit.graph import add_self_loops
from egckit.kernels import AggregatorKind, aggregate_neighbors
from egckit.training import (
    TrainConfig,
    adam_step,
    init_adam,
    make_toy_task,
    train_loop,
)

A = AggregatorKind


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = init_adam(params)
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        npt.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_against_gradient_sign(self):
        params = {"w": np.array([0.0, 0.0])}
        state = init_adam(params)
        adam_step(params, {"w": np.array([3.0, -0.5])}, state, lr=1e-3)
        # bias-corrected ratio is g/|g| up to the epsilon term
        npt.assert_allclose(params["w"], [-1e-3, 1e-3], rtol=1e-4)

    def test_two_steps_match_hand_computation(self):
        # scalar, constant gradient g = 2, defaults beta1=0.9 beta2=0.999
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        g = 2.0
        theta = 0.5
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        params = {"w": np.array([0.5])}
        state = init_adam(params)
        for _ in range(2):
            adam_step(params, {"w": np.array([g])}, state, lr=lr)
        npt.assert_allclose(params["w"], [theta], rtol=1e-12)

    def test_rejects_non_finite_and_mismatched(self):
        params = {"w": np.zeros(2)}
        state = init_adam(params)
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.array([np.inf, 0.0])}, state)
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros(3)}, init_adam(params))


class TestToyTasks:
    def test_deterministic(self):
        a = make_toy_task("community_classification", 50, seed=3)
        b = make_toy_task("community_classification", 50, seed=3)
        npt.assert_array_equal(a.features, b.features)
        npt.assert_array_equal(a.graph.col_idx, b.graph.col_idx)
        npt.assert_array_equal(a.train_mask, b.train_mask)

    def test_too_small(self):
        with pytest.raises(ValueError):
            make_toy_task("community_classification", 9)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_toy_task("mystery", 50)

    def test_masks_disjoint(self):
        t = make_toy_task("homophily_regression", 40, seed=1)
        assert not (t.train_mask & t.val_mask).any()
        assert (t.train_mask | t.val_mask).all()

    def test_constant_hidden_signal_gives_constant_targets(self):
        t = make_toy_task("homophily_regression", 30, seed=2,
                          hidden_signal=np.full(30, 1.5))
        npt.assert_allclose(t.targets, 1.5, rtol=1e-12)

    def test_regression_targets_are_neighborhood_means(self):
        t = make_toy_task("homophily_regression", 25, seed=4)
        looped = add_self_loops(t.graph)
        h = t.features[:, 0]
        expected = aggregate_neighbors(looped, h[:, None], (A.MEAN,))[0][:, 0]
        npt.assert_allclose(t.targets, expected, atol=1e-12)


class TestTrainLoop:
    def test_lr_zero_keeps_loss_constant(self):
        task = make_toy_task("community_classification", 40, seed=0)
        res = train_loop(task, TrainConfig(hidden=8, heads=2, bases=2), steps=5, lr=0.0)
        losses = [m.loss for m in res.history]
        assert max(losses) - min(losses) < 1e-12

    def test_community_loss_halves(self):
        task = make_toy_task("community_classification", 100, seed=0)
        res = train_loop(task, TrainConfig(), steps=200, lr=1e-2)
        assert not res.diverged
        assert res.history[-1].loss <= 0.5 * res.history[0].loss

    def test_multi_aggregator_stack_stays_finite(self):
        task = make_toy_task("community_classification", 100, seed=1)
        cfg = TrainConfig(hidden=16, heads=4, bases=4, aggs=(A.SUM, A.MAX, A.MIN))
        res = train_loop(task, cfg, steps=500, lr=1e-2)
        assert not res.diverged
        assert len(res.history) == 500
        assert all(np.isfinite(m.loss) for m in res.history)

    def test_divergence_reported_not_raised(self):
        task = make_toy_task("homophily_regression", 30, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            res = train_loop(task, TrainConfig(hidden=8, heads=2, bases=2),
                             steps=200, lr=1e80)
        assert res.diverged
        assert len(res.history) < 200
        assert all(np.isfinite(m.loss) for m in res.history)

    def test_deterministic_given_seed(self):
        task = make_toy_task("community_classification", 60, seed=2)
        cfg = TrainConfig(hidden=8, heads=4, bases=2)
        r1 = train_loop(task, cfg, steps=20, lr=1e-2, seed=9)
        r2 = train_loop(task, cfg, steps=20, lr=1e-2, seed=9)
        assert [m.loss for m in r1.history] == [m.loss for m in r2.history]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(hidden=10, heads=8)
        with pytest.raises(ValueError):
            TrainConfig(num_layers=5)
