import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from d2c.autodiff import Tensor, as_tensor, concat, gradcheck, logsumexp, no_grad
from d2c.nn import AdamW, Module, init_linear, linear


def _param(shape, rng, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


class TestElementwiseGradients:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda x: x.exp().sum(),
            lambda x: (x.square() + 1.0).log().sum(),
            lambda x: (x.square() + 0.5).sqrt().sum(),
            lambda x: x.tanh().sum(),
            lambda x: x.sigmoid().sum(),
            lambda x: x.silu().sum(),
            lambda x: (x**3).mean(),
            lambda x: (1.0 / (x.square() + 1.0)).sum(),
            lambda x: (2.0 - x * 3.0).square().sum(),
            lambda x: logsumexp(x, axis=1).sum(),
            lambda x: x.T.reshape(-1)[3:9].square().sum(),
            lambda x: x.sum(axis=0, keepdims=True).square().sum(),
        ],
    )
    def test_unary(self, fn, rng):
        x = _param((4, 5), rng)
        assert gradcheck(lambda: fn(x), [x], n_checks=20) < 1e-5

    def test_matmul_and_broadcast(self, rng):
        a, b, c = _param((3, 4), rng), _param((4, 2), rng), _param((2,), rng)
        assert gradcheck(lambda: ((a @ b + c).tanh()).sum(), [a, b, c], n_checks=22) < 1e-5

    def test_reflected_ops_with_arrays(self, rng):
        a = _param((3, 4), rng)
        m = rng.normal(size=(2, 3))
        assert gradcheck(lambda: (m @ a).square().sum() + (1.0 - a).sum() + (2.0 / (a.square() + 1)).sum(), [a]) < 1e-5

    def test_concat(self, rng):
        a, b = _param((2, 3), rng), _param((2, 1), rng)
        assert gradcheck(lambda: concat([a, b], axis=1).exp().sum(), [a, b], n_checks=8) < 1e-5

    def test_relu_and_clip_away_from_kinks(self):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
        (x.relu() + x.clip(-1.0, 1.0)).sum().backward()
        assert_allclose(x.grad, [0.0, 1.0, 2.0, 1.0])


class TestTape:
    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        (x * x + x).backward()
        assert x.grad == pytest.approx(7.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2).sum()
        assert y._backward is None and not y._parents

    def test_constants_get_no_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = as_tensor(np.ones(2))
        (x * c).sum().backward()
        assert c.grad is None

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_logsumexp_matches_direct_formula(self, v):
        out = logsumexp(Tensor(v), axis=1).value
        assert_allclose(out, np.log(np.exp(v - v.max()).sum(axis=1)) + v.max(), rtol=1e-12, atol=1e-12)


class TestModuleAndOptimizer:
    def _mlp(self):
        m = Module()
        init_linear(m, "a", 3, 4, np.random.default_rng(0))
        return m

    def test_state_dict_round_trip(self):
        m = self._mlp()
        state = m.state_dict()
        m.params["a.w"].value += 1
        m.load_state_dict(state)
        assert_allclose(m.params["a.w"].value, state["a.w"])

    def test_state_dict_mismatch(self):
        m = self._mlp()
        with pytest.raises(KeyError):
            m.load_state_dict({"a.w": np.zeros((3, 4))})
        with pytest.raises(ValueError):
            m.load_state_dict({"a.w": np.zeros((4, 3)), "a.b": np.zeros(4)})

    def test_adamw_first_step_is_signed_lr(self):
        # bias-corrected first step moves each coordinate by lr * sign(g)
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        opt = AdamW([p], lr=0.1, eps=0.0)
        (p * np.array([3.0, -1.0, 0.2])).sum().backward()
        opt.step()
        assert_allclose(p.value, [0.9, -1.9, 0.4])

    def test_adamw_decoupled_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
        assert_allclose(p.value, [2.0 - 0.1 * 0.5 * 2.0])

    def test_adamw_minimizes_quadratic(self):
        m = self._mlp()
        x = np.random.default_rng(1).normal(size=(16, 3))
        target = x @ np.ones((3, 4))
        opt = AdamW(m.parameters(), lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            (linear(m, "a", x) - target).square().mean().backward()
            opt.step()
        assert float((linear(m, "a", x) - target).square().mean().value) < 1e-3


def test_gradcheck_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def wrong_square():
        # derivative of x^2 deliberately off by a factor 1.5
        return Tensor._make(x.value**2, (x,), lambda g: (g * 3 * x.value,)).sum()

    assert gradcheck(wrong_square, [x]) > 0.1
