from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mreq.errors import ConfigurationError, EmptyInputError, TrainingDivergenceError
from mreq.numerics import (
    FeatureMap, StridedLinearMap, TrainState, cosine_lr, finite_diff_check, mae_loss, sgd_step,
    strided_apply, strided_backward, transposed_apply, transposed_backward,
)


def naive_strided(W, b, s, x):
    """Loop-by-loop reference for the windowed dot product."""
    w, d_out, d_in = W.shape
    n = x.shape[1]
    n_out = -(-n // s)
    out = np.zeros((d_out, n_out))
    for j in range(n_out):
        out[:, j] = b
        for t in range(w):
            i = j * s + t
            if i < n:
                out[:, j] += W[t] @ x[:, i]
    return out


def naive_transposed(W, s, x):
    w, d_out, d_in = W.shape
    n = x.shape[1]
    out = np.zeros((d_in, n * s))
    for j in range(n):
        for t in range(w):
            i = j * s + t
            if i < n * s:
                out[:, i] += W[t].T @ x[:, j]
    return out


def fm(data, rate=48):
    return FeatureMap(np.atleast_2d(np.asarray(data, dtype=float)), rate)


class TestStridedApply:
    def test_identity(self):
        x = fm(np.random.default_rng(0).normal(size=(3, 7)))
        y = strided_apply(StridedLinearMap.identity(3), x)
        assert np.array_equal(y.data, x.data)
        assert y.frame_rate == x.frame_rate

    def test_stride6_geometry(self):
        m = StridedLinearMap.init(4, 4, 6, np.random.default_rng(1))
        y = strided_apply(m, FeatureMap.zeros(4, 720, 48))
        assert y.n == 120 and y.frame_rate == 8

    def test_hand_example(self):
        m = StridedLinearMap(np.array([[[0.5]], [[0.5]]]), 2, np.zeros(1))
        assert strided_apply(m, fm([1, 3, 5, 7])).data.tolist() == [[2.0, 6.0]]

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(2)
        for s in (1, 2, 3, 6):
            m = StridedLinearMap.init(3, 5, s, rng)
            m.bias[:] = rng.normal(size=5)
            x = rng.normal(size=(3, 23))
            got = strided_apply(m, fm(x)).data
            np.testing.assert_allclose(got, naive_strided(m.weights, m.bias, s, x), rtol=1e-12, atol=1e-12)

    def test_errors(self):
        m = StridedLinearMap.identity(2)
        with pytest.raises(ConfigurationError):
            strided_apply(m, FeatureMap.zeros(3, 4, 48))
        with pytest.raises(EmptyInputError):
            strided_apply(m, FeatureMap.zeros(2, 0, 48))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 40), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
    def test_linearity(self, s, n, a, b, seed):
        rng = np.random.default_rng(seed)
        m = StridedLinearMap.init(2, 3, s, rng)
        x, y = rng.normal(size=(2, 2, n))
        lhs = strided_apply(m, fm(a * x + b * y)).data
        rhs = a * strided_apply(m, fm(x)).data + b * strided_apply(m, fm(y)).data
        scale = max(1.0, np.abs(lhs).max())
        assert np.abs(lhs - rhs).max() <= 1e-10 * scale


class TestTransposedApply:
    def test_identity(self):
        x = fm(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(transposed_apply(StridedLinearMap.identity(2), x).data, x.data)

    def test_stride6_geometry(self):
        m = StridedLinearMap.init(4, 4, 6, np.random.default_rng(1))
        y = transposed_apply(m, FeatureMap.zeros(4, 120, 8))
        assert y.n == 720 and y.frame_rate == 48

    def test_hand_example(self):
        m = StridedLinearMap(np.array([[[1.0]], [[0.5]]]), 2, np.zeros(1))
        assert transposed_apply(m, fm([2], 8)).data.tolist() == [[2.0, 1.0]]

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(3)
        for s in (1, 2, 3, 6):
            m = StridedLinearMap.init(4, 3, s, rng)
            x = rng.normal(size=(3, 9))
            np.testing.assert_allclose(transposed_apply(m, fm(x, 8)).data, naive_transposed(m.weights, s, x),
                                       rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("s", [2, 3, 6])
    @given(n=st.integers(1, 60))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_shape(self, s, n):
        m = StridedLinearMap.init(2, 2, s, np.random.default_rng(s))
        x = FeatureMap(np.ones((2, n * s)), 48)
        y = transposed_apply(m, strided_apply(m, x))
        assert y.data.shape == x.data.shape and y.frame_rate == x.frame_rate


class TestMae:
    def test_zero(self):
        a = fm([[1.0, 2.0]])
        assert mae_loss(a, a)[0] == 0.0

    def test_hand_value_and_grad(self):
        v, g = mae_loss(fm([[1.0, 2.0]]), fm([[0.0, 4.0]]))
        assert v == 1.5
        assert g.tolist() == [[0.5, -0.5]]

    def test_tie_gradient_zero(self):
        _, g = mae_loss(fm([[1.0, 3.0]]), fm([[1.0, 0.0]]))
        assert g.tolist() == [[0.0, 0.5]]

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            mae_loss(fm([[1.0, 2.0]]), fm([[1.0]]))
        with pytest.raises(ConfigurationError):
            mae_loss(fm([[1.0]], 48), fm([[1.0]], 8))


class TestSgd:
    def test_arithmetic(self):
        p, g = np.array([1.0]), np.array([0.5])
        sgd_step([p], [g], 0.1)
        assert p[0] == pytest.approx(0.95, abs=1e-15)
        assert g[0] == 0.0

    @pytest.mark.parametrize("g0,lr", [(0.0, 0.3), (0.7, 0.0)])
    def test_no_move(self, g0, lr):
        p = np.array([1.25, -2.0])
        sgd_step([p], [np.full(2, g0)], lr)
        assert p.tolist() == [1.25, -2.0]

    def test_non_finite(self):
        with pytest.raises(TrainingDivergenceError):
            sgd_step([np.zeros(2)], [np.array([1.0, np.nan])], 0.1)

    def test_cosine_schedule(self):
        assert cosine_lr(1.0, 0, 100) == 1.0
        assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)
        assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0, abs=1e-15)


def test_train_state_determinism():
    def run(seed):
        state = TrainState(0.1, rng_seed=seed)
        p = state.rng.normal(size=5)
        for _ in range(10):
            g = state.rng.normal(size=5)
            sgd_step([p], [g], state.learning_rate)
            state.step_count += 1
        return p

    assert np.array_equal(run(7), run(7))
    assert not np.array_equal(run(7), run(8))


def test_feature_map_rejects_non_finite():
    with pytest.raises(TrainingDivergenceError):
        FeatureMap(np.array([[np.inf]]), 48)
    assert FeatureMap.zeros(1, 96, 48).duration == Fraction(2)


class TestGradients:
    def _linear_case(self, s, rng):
        m = StridedLinearMap.init(3, 2, s, rng)
        m.bias[:] = rng.normal(size=2)
        x = fm(rng.normal(size=(3, 4 * s)))
        target = rng.normal(size=(2, 4))

        def f():
            m.zero_grad()
            y = strided_apply(m, x).data
            strided_backward(m, x, target)
            return float((y * target).sum()), m.grads()

        return f, m.params()

    def test_linear_map(self):
        f, params = self._linear_case(3, np.random.default_rng(0))
        assert finite_diff_check(f, params, eps=1e-4) < 1e-6

    def test_mae_away_from_ties(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 5))
        b = a + rng.choice([-1, 1], size=a.shape) * rng.uniform(0.1, 1.0, size=a.shape)

        def f():
            v, g = mae_loss(fm(a), fm(b))
            return v, [g]

        assert finite_diff_check(f, [a], eps=1e-4) < 1e-4

    @pytest.mark.parametrize("s", [1, 2, 3, 6])
    def test_composed_down_up(self, s):
        rng = np.random.default_rng(s)
        enc = StridedLinearMap.init(3, 3, s, rng)
        dec = StridedLinearMap.init(3, 3, s, rng)
        x_arr = rng.normal(size=(3, 5 * s))
        target = rng.normal(size=(3, 5 * s))

        def f():
            enc.zero_grad()
            dec.zero_grad()
            x = fm(x_arr)
            e = strided_apply(enc, x)
            y = transposed_apply(dec, e)
            v, g = mae_loss(y, fm(target))
            ge = transposed_backward(dec, e, g)
            gx = strided_backward(enc, x, ge)
            return v, [enc.grad_weights, enc.grad_bias, dec.grad_weights, gx]

        params = [enc.weights, enc.bias, dec.weights, x_arr]
        assert finite_diff_check(f, params, eps=1e-6) < 1e-4
