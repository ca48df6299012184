"""Autodiff engine: forward oracles, finite-difference gradients, graph semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aga import tensor as T
from aga.errors import ContractError, ParameterError, ShapeError
from aga.tensor import Tensor

from conftest import max_rel_error, numeric_grad

SEEDS = range(10)


def check_grads(build, inputs, tol=1e-4, seed=0):
    """Compare backward() with central differences for loss = sum(R * build(*inputs))."""
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(*leaves)
    r = np.random.default_rng(seed + 100).standard_normal(out.shape)
    T.backward(T.sum_(out * r))
    for leaf in leaves:

        def f():
            return float(np.sum(build(*[Tensor(l.data) for l in leaves]).data * r))

        num = numeric_grad(f, leaf.data)
        err = max_rel_error(leaf.grad, num)
        assert err < tol, f"relative error {err:.2e}"


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-12) + x, x)


UNARY = {
    "neg": lambda x: -x,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "gelu": T.gelu,
    "exp": T.exp,
    "softmax": lambda x: T.softmax(x, axis=-1),
    "log_softmax": lambda x: T.log_softmax(x, axis=-1),
    "sum_axis": lambda x: T.sum_(x, axis=1, keepdims=True),
    "mean": lambda x: T.mean(x, axis=0),
    "reshape": lambda x: x.reshape(4, 3),
    "transpose": lambda x: x.transpose(1, 0),
    "getitem": lambda x: x[np.array([0, 2, 2]), 1:],
    "scalar_mul": lambda x: 3.0 * x - 1.5 / (x * x + 1.0),
}

BINARY = {
    "add_broadcast": (lambda a, b: a + b, (3, 4), (4,)),
    "sub_broadcast": (lambda a, b: a - b, (3, 1), (1, 4)),
    "mul_broadcast": (lambda a, b: a * b, (2, 3, 4), (3, 1)),
    "div": (lambda a, b: a / b, (3, 4), (3, 4)),
    "matmul": (T.matmul, (3, 4), (4, 5)),
    "matmul_batched": (T.matmul, (2, 3, 4), (4, 2)),
    "matmul_vector": (T.matmul, (4,), (4, 3)),
    "concat": (lambda a, b: T.concat([a, b], axis=1), (3, 2), (3, 4)),
    "stack": (lambda a, b: T.stack([a, b], axis=0), (3, 4), (3, 4)),
}


class TestForwardOracles:
    def test_sigmoid_matches_logistic(self, rng):
        x = rng.standard_normal(50) * 5
        np.testing.assert_allclose(T.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-10, atol=1e-15)

    def test_gelu_tanh_form(self, rng):
        x = rng.standard_normal(20)
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        x = rng.standard_normal((6, 9)) * 30
        p = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_log_softmax_is_log_of_softmax(self, rng):
        x = rng.standard_normal((4, 7))
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)

    def test_rms_norm_formula(self, rng):
        x, g = rng.standard_normal((3, 8)), rng.standard_normal(8)
        ref = x / np.sqrt(np.mean(x**2, axis=-1, keepdims=True) + T.RMS_EPS) * g
        np.testing.assert_allclose(T.rms_norm(Tensor(x), Tensor(g)).data, ref, rtol=1e-12)

    def test_layer_norm_formula(self, rng):
        x, g, b = rng.standard_normal((3, 8)), rng.standard_normal(8), rng.standard_normal(8)
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        ref = (x - mu) / np.sqrt(var + T.LAYER_NORM_EPS) * g + b
        np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, ref, rtol=1e-10)

    def test_scale_norm_formula(self, rng):
        x = rng.standard_normal((3, 8))
        ref = 2.5 * x / np.linalg.norm(x, axis=-1, keepdims=True)
        np.testing.assert_allclose(T.scale_norm(Tensor(x), Tensor(np.array(2.5))).data, ref, rtol=1e-8)

    def test_cross_entropy_weighted(self, rng):
        logits = rng.standard_normal((5, 4))
        target = np.array([0, 3, 1, 1, 2])
        w = np.array([0.5, 1.0, 2.0, 0.0, 1.5])
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        ref = -w * lp[np.arange(5), target]
        np.testing.assert_allclose(T.cross_entropy(Tensor(logits), target, w).data, ref, rtol=1e-12)

    def test_dropout_eval_is_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        assert T.dropout(x, 0.5, training=False, rng=None) is x

    def test_dropout_training_is_inverted(self):
        x = Tensor(np.ones(200000))
        out = T.dropout(x, 0.25, training=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1 / 0.75}
        assert abs(out.mean() - 1.0) < 0.01

    def test_elementwise_dispatch(self, rng):
        a, b = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
        np.testing.assert_array_equal(T.elementwise("mul", a, b).data, a.data * b.data)
        with pytest.raises(ParameterError):
            T.elementwise("pow", a, b)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    @pytest.mark.parametrize("seed", SEEDS)
    def test_unary(self, name, seed):
        x = away_from_zero(np.random.default_rng(seed), (3, 4))
        check_grads(UNARY[name], [x], seed=seed)

    @pytest.mark.parametrize("name", sorted(BINARY))
    @pytest.mark.parametrize("seed", SEEDS)
    def test_binary(self, name, seed):
        fn, sa, sb = BINARY[name]
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        if name == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        check_grads(fn, [a, b], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log(self, seed):
        x = np.random.default_rng(seed).uniform(0.2, 3.0, (3, 4))
        check_grads(T.log, [x], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_rms_norm(self, seed):
        rng = np.random.default_rng(seed)
        check_grads(T.rms_norm, [rng.standard_normal((2, 3, 6)), rng.standard_normal(6)], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        check_grads(T.layer_norm, [rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6)], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_scale_norm(self, seed):
        rng = np.random.default_rng(seed)
        check_grads(T.scale_norm, [rng.standard_normal((4, 6)), np.array(1.7)], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        target = rng.integers(0, 5, size=4)
        w = rng.uniform(0.1, 2.0, size=4)
        check_grads(lambda z: T.cross_entropy(z, target, w), [rng.standard_normal((4, 5))], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dropout_fixed_mask(self, seed):
        def fn(x):
            return T.dropout(x, 0.3, training=True, rng=np.random.default_rng(seed))

        check_grads(fn, [np.random.default_rng(seed).standard_normal((5, 4))], seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_composite_attention_like(self, seed):
        rng = np.random.default_rng(seed)

        def fn(q, k, v):
            w = T.softmax(T.matmul(q, k.swapaxes(-1, -2)) * 0.5, axis=-1)
            return T.gelu(T.matmul(w, v))

        check_grads(fn, [rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 5))], seed=seed)


class TestGraph:
    def test_diamond_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        T.backward(y + y * x)  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(6 + 27)

    def test_only_leaves_keep_grads(self):
        x = Tensor(np.ones(3), requires_grad=True)
        mid = x * 2.0
        T.backward(T.sum_(mid))
        assert mid.grad is None
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_grads_accumulate_across_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.sum_(x * 3.0))
        T.backward(T.sum_(x * 3.0))
        np.testing.assert_array_equal(x.grad, 6.0)
        T.zero_grad([x])
        assert x.grad is None

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(20000):
            y = y * 1.0
        T.backward(y)
        assert x.grad == pytest.approx(1.0)

    def test_no_graph_without_requires_grad(self):
        y = Tensor(np.ones(3)) * 2.0
        assert y._parents == () and not y.requires_grad

    def test_topological_order_puts_inputs_first(self):
        x = Tensor(np.ones(2), requires_grad=True)
        a = x * 2.0
        b = a + x
        order = T.topological_order(T.sum_(b))
        pos = {id(n): i for i, n in enumerate(order)}
        assert pos[id(x)] < pos[id(a)] < pos[id(b)]


class TestErrors:
    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_item_requires_scalar(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_dropout_rate(self, rate):
        with pytest.raises(ParameterError):
            T.dropout(Tensor(np.ones(2)), rate, training=True, rng=np.random.default_rng(0))

    def test_cross_entropy_target_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_rms_norm_gain_shape(self):
        with pytest.raises(ShapeError):
            T.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


shapes = st.lists(st.integers(1, 3), min_size=0, max_size=3).map(tuple)


class TestBroadcastProperties:
    @settings(max_examples=60, deadline=None)
    @given(shapes, st.data())
    def test_grad_shapes_match_inputs(self, shape, data):
        # drop leading axes and set some axes to 1 to get a broadcast-compatible partner
        k = data.draw(st.integers(0, len(shape)))
        partner = tuple(1 if data.draw(st.booleans()) else n for n in shape[k:])
        a = Tensor(np.ones(shape), requires_grad=True)
        b = Tensor(np.ones(partner), requires_grad=True)
        T.backward(T.sum_(a * b))
        assert a.grad.shape == shape and b.grad.shape == partner
        copies = int(np.prod(np.broadcast_shapes(shape, partner))) // max(int(np.prod(partner)), 1)
        np.testing.assert_array_equal(b.grad, copies)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_softmax_is_shift_invariant(self, values):
        x = np.array(values)
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 7.0)).data, atol=1e-12)
