"""MAPE loss and Adam tests."""

import numpy as np
import pytest

from densiscope.exceptions import NumericsError
from densiscope.nn import Adam, mape_loss

from oracles import finite_diff_grad, rel_error


class TestMapeLoss:
    def test_zero_at_equality(self):
        v = np.array([0.2, 0.5, 0.9])
        loss, grad = mape_loss(v, v)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_basic_arithmetic(self):
        loss, _ = mape_loss(np.array([0.2]), np.array([0.1]))
        assert loss == pytest.approx(100.0)

    def test_floor_arithmetic(self):
        loss, _ = mape_loss(np.array([0.02]), np.array([0.0]), target_floor=0.01)
        assert loss == pytest.approx(200.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        target = rng.uniform(0.05, 0.6, 10)
        pred = target + rng.uniform(0.01, 0.1, 10)  # away from the |.| kink

        _, grad = mape_loss(pred, target)
        fd = finite_diff_grad(lambda p: mape_loss(p, target)[0], pred)
        assert rel_error(grad, fd) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mape_loss(np.zeros(3), np.zeros(4))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        opt = Adam(p)
        opt.step({"w": np.zeros(2, dtype=np.float32)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        p = {"w": np.array([0.0], dtype=np.float64)}
        opt = Adam(p, learning_rate=0.001)
        opt.step({"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(-0.001, abs=1e-6)
        assert opt.step_count == 1

    def test_quadratic_descent(self):
        """Frozen behavior of 10 steps on f(w) = w^2 from w = 1: the iterate
        strictly decreases toward 0 (scalar simulation oracle)."""
        p = {"w": np.array([1.0])}
        opt = Adam(p, learning_rate=0.05)
        trace = [1.0]
        for _ in range(10):
            opt.step({"w": 2.0 * p["w"]})
            trace.append(float(p["w"][0]))
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]
        assert trace[-1] > -0.5

    def test_nonfinite_gradient_aborts_with_diagnostics(self):
        p = {"conv1.weight": np.ones(2, dtype=np.float32)}
        opt = Adam(p)
        with pytest.raises(NumericsError, match="conv1.weight.*step 1"):
            opt.step({"conv1.weight": np.array([1.0, np.nan], dtype=np.float32)})

    def test_shape_mismatch(self):
        opt = Adam({"w": np.zeros(3)})
        with pytest.raises(ValueError):
            opt.step({"w": np.zeros(4)})

    def test_moments_mirror_param_shapes(self):
        p = {"a": np.zeros((2, 3)), "b": np.zeros(5)}
        opt = Adam(p)
        assert opt.m["a"].shape == (2, 3) and opt.v["b"].shape == (5,)
