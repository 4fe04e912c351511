import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duplexthink import tensor as tz
from duplexthink.tensor import Tensor

from helpers import assert_grad_matches


def randn(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


class TestSoftmax:
    def test_uniform_logits(self):
        out = tz.softmax_vec([0.0, 0.0, 0.0, 0.0])
        assert np.allclose(out, 0.25)

    def test_hand_computed(self):
        out = tz.softmax_vec([0.0, np.log(3.0)])
        assert np.allclose(out, [0.25, 0.75], atol=1e-9)

    def test_overflow_guard(self):
        out = tz.softmax_vec([1000.0, 1000.0])
        assert np.allclose(out, [0.5, 0.5])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            tz.softmax(Tensor(np.array([np.nan, 0.0])))
        with pytest.raises(ValueError):
            tz.softmax(Tensor(np.array([np.inf, 0.0])))

    def test_rows_sum_to_one(self, rng):
        x = rng.normal(size=(5, 7)) * 10
        out = tz.softmax(Tensor(x)).data
        assert np.abs(out.sum(-1) - 1).max() < 1e-6
        assert (out >= 0).all()

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12),
           st.floats(-100, 100))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, logits, shift):
        a = tz.softmax_vec(logits)
        b = tz.softmax_vec([v + shift for v in logits])
        assert np.abs(a - b).max() <= 1e-6


class TestKLDivergence:
    def test_identical_distributions(self):
        assert tz.kl_divergence([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_computed(self):
        val = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
        assert tz.kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(val, abs=1e-3)
        assert val == pytest.approx(0.5108, abs=1e-3)

    def test_zero_mass_terms_vanish(self):
        assert tz.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tz.kl_divergence([0.5, 0.5], [1.0])

    @given(st.lists(st.floats(0.01, 10), min_size=2, max_size=10))
    @settings(max_examples=150, deadline=None)
    def test_nonnegative_on_simplex(self, raw):
        p = np.array(raw) / np.sum(raw)
        q = np.roll(p, 1)
        assert tz.kl_divergence(p, q) >= -1e-9


class TestBackward:
    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        tz.backward(tz.tsum(x * x))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_stop_gradient_blocks(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        y = Tensor(np.array([3.0, 4.0]), requires_grad=True, dtype=np.float64)
        tz.backward(tz.tsum(tz.stop_gradient(x) * y))
        assert x.grad is None
        assert np.allclose(y.grad, [1.0, 2.0])

    def test_rejects_nonscalar(self):
        with pytest.raises(ValueError):
            tz.backward(Tensor(np.zeros(3), requires_grad=True))

    def test_shared_subexpression(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        y = x * 2.0
        tz.backward(tz.tsum(y * y) + tz.tsum(y))
        assert np.allclose(x.grad, [10.0, 18.0])  # d/dx (4x^2 + 2x)

    def test_grad_gate_toggles(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        gate = tz.GradGate()
        loss = tz.tsum(tz.grad_gate(x, gate) * 3.0)
        gate.open = False
        tz.backward(loss)
        assert x.grad is None
        gate.open = True
        tz.backward(loss)
        assert np.allclose(x.grad, [3.0, 3.0])

    def test_two_layer_network_matches_finite_differences(self, rng):
        w1 = randn(rng, 5, 8)
        b1 = randn(rng, 8)
        w2 = randn(rng, 8, 3)
        x = rng.normal(size=(4, 5))
        labels = np.array([0, 2, 1, 2])

        def f():
            h = tz.tanh(Tensor(x) @ w1 + b1)
            logits = h @ w2
            return -tz.tmean(tz.take_along_last(tz.log_softmax(logits), labels))

        assert_grad_matches(f, [w1, b1, w2], h=1e-5, rtol=1e-4)


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul2d": lambda a, b: a @ b,
    "exp": lambda a, b: tz.exp(a * 0.5),
    "log": lambda a, b: tz.log(a * a + 1.0),
    "tanh": lambda a, b: tz.tanh(a),
    "sigmoid": lambda a, b: tz.sigmoid(a),
    "gelu": lambda a, b: tz.gelu(a),
    "softmax": lambda a, b: tz.softmax(a),
    "log_softmax": lambda a, b: tz.log_softmax(a),
    "layer_norm": lambda a, b: tz.layer_norm(a),
    "clip": lambda a, b: tz.clip(a, -0.5, 0.5),
    "mean": lambda a, b: tz.tmean(a, axis=-1, keepdims=True) + a,
    "sum_axis": lambda a, b: tz.tsum(a, axis=0) * 1.0,
    "reshape_transpose": lambda a, b: tz.transpose(tz.reshape(a, (8, 2)), (1, 0)),
    "concat_slice": lambda a, b: tz.concat([a[:, :2], a[:, 2:] * 2.0], axis=1),
    "broadcast": lambda a, b: tz.broadcast_to(tz.tsum(a, axis=0, keepdims=True), (4, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    a = randn(rng, 4, 4)
    b = randn(rng, 4, 4)
    op = OPS[name]

    def f():
        return tz.tsum(op(a, b) * 0.7)

    assert_grad_matches(f, [a, b] if name in ("add", "sub", "mul", "div", "matmul2d") else [a],
                        h=1e-5, rtol=1e-4)


def test_batched_matmul_gradients(rng):
    a = randn(rng, 2, 3, 4, 5)
    b = randn(rng, 2, 3, 5, 4)

    def f():
        return tz.tsum(tz.tanh(a @ b))

    assert_grad_matches(f, [a, b], h=1e-5, rtol=1e-4)


def test_rope_gradients(rng):
    x = randn(rng, 2, 6, 8)
    pos = np.arange(6)
    freq = 1.0 / (10000.0 ** (np.arange(4) / 4.0))
    ang = pos[:, None] * freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def f():
        return tz.tsum(tz.tanh(tz.rope(x, cos, sin)))

    assert_grad_matches(f, [x], h=1e-5, rtol=1e-4)


def test_take_rows_gradients_and_range_check(rng):
    table = randn(rng, 6, 4)
    ids = np.array([[0, 5], [2, 2]])

    def f():
        return tz.tsum(tz.tanh(tz.take_rows(table, ids)))

    assert_grad_matches(f, [table], h=1e-5, rtol=1e-4)
    with pytest.raises(IndexError):
        tz.take_rows(table, np.array([6]))


def test_no_grad_builds_no_graph(rng):
    w = randn(rng, 3, 3)
    with tz.no_grad():
        out = Tensor(rng.normal(size=(2, 3))) @ w
    assert not out.requires_grad
    assert out._parents == ()
