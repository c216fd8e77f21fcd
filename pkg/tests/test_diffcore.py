import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssnt import diffcore as D


def fd_check(build, params, step=1e-5):
    """Max relative error of reverse mode vs central differences over all coordinates."""
    loss = build()
    grads = D.backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        for idx in np.ndindex(p.shape):
            num = D.numerical_grad(lambda: float(build().value), p.value, idx, step)
            worst = max(worst, D.relative_error(float(grads[name][idx]), num))
    return worst


class TestLogSumExp:
    def test_two_halves(self):
        assert D.log_sum_exp([math.log(0.5), math.log(0.5)]).item() == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("x", [-3.7, 0.0, 12.5])
    def test_single_term_identity(self, x):
        assert D.log_sum_exp([x]).item() == x

    def test_neg_inf_absorbed(self):
        assert D.log_sum_exp([-np.inf, -2.0]).item() == -2.0

    def test_all_neg_inf(self):
        assert D.log_sum_exp([-np.inf, -np.inf]).item() == -np.inf

    def test_empty_is_contract_error(self):
        with pytest.raises(D.ContractError):
            D.log_sum_exp([])

    def test_gradient_is_softmax(self, rng):
        v = D.parameter(rng.normal(size=6), "v")
        g = D.backward(D.logsumexp(v, axis=0), {"v": v})["v"]
        expected = np.exp(v.value) / np.exp(v.value).sum()
        np.testing.assert_allclose(g, expected, rtol=1e-12)

    def test_gradient_ignores_neg_inf_terms(self):
        v = D.parameter(np.array([0.0, -np.inf, 0.0]), "v")
        g = D.backward(D.logsumexp(v, axis=0), {"v": v})["v"]
        np.testing.assert_allclose(g, [0.5, 0.0, 0.5])

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
    def test_max_shift_invariance(self, v):
        m = v.max()
        lhs = D.logsumexp(v, axis=0).item()
        rhs = m + D.logsumexp(v - m, axis=0).item()
        assert lhs == pytest.approx(rhs, rel=1e-14, abs=1e-13)


class TestBackward:
    def test_product_rule(self):
        x, y = D.parameter(2.0, "x"), D.parameter(3.0, "y")
        g = D.backward(x * y, {"x": x, "y": y})
        assert g["x"] == 3.0 and g["y"] == 2.0

    def test_unreachable_parameter_gets_zero(self):
        x, z = D.parameter(np.ones(3), "x"), D.parameter(np.ones((2, 2)), "z")
        g = D.backward(D.sum_(D.tanh(x)), {"x": x, "z": z})
        assert g["z"].shape == (2, 2) and not g["z"].any()

    def test_non_finite_loss_names_op(self):
        x = D.parameter(np.array([0.0, 1.0]), "x")
        loss = D.sum_(D.log(x))
        with pytest.raises(D.NumericalError, match="sum"):
            D.backward(loss, {"x": x})

    def test_non_scalar_loss_rejected(self):
        x = D.parameter(np.ones(3), "x")
        with pytest.raises(D.ContractError):
            D.backward(D.tanh(x), {"x": x})

    def test_random_five_parameter_graph(self, rng):
        params = {n: D.parameter(rng.normal(size=s), n)
                  for n, s in [("W", (3, 4)), ("b", (3,)), ("x", (4,)), ("u", (3,)), ("c", ())]}
        p = params

        def build():
            h = D.tanh(D.affine(p["W"], p["b"], p["x"]))
            z = D.log_softmax(D.concat([h * p["u"], D.reshape(p["c"], (1,))]))
            gate = D.concat([D.sigmoid(h), D.exp(D.reshape(p["c"], (1,)))])
            return D.logsumexp(z * gate, axis=0) + D.sum_(D.exp(z) * p["x"])
        assert fd_check(build, params) < 1e-6

    def test_no_grad_records_nothing(self):
        x = D.parameter(np.ones(2), "x")
        with D.no_grad():
            y = D.tanh(x)
        assert not y.requires_grad and y.parents == ()


class TestElementwise:
    def test_sigmoid_zero(self):
        assert D.sigmoid(0.0).item() == 0.5

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(D.softmax(np.zeros(2)).value, [0.5, 0.5])

    def test_softmax_with_mask(self):
        out = D.softmax(np.array([1.0, 2.0, 3.0]), mask=np.array([False, False, True])).value
        e1, e2 = math.exp(1.0), math.exp(2.0)
        np.testing.assert_allclose(out, [e1 / (e1 + e2), e2 / (e1 + e2), 0.0], rtol=1e-14)
        assert out[2] == 0.0

    def test_clamped_sigmoid_bounds(self):
        out = D.clamped_sigmoid(np.array([-1e4, 0.0, 1e4])).value
        assert out[0] == 1e-7 and out[2] == 1.0 - 1e-7

    def test_affine_shape_mismatch(self):
        with pytest.raises(D.ContractError):
            D.affine(np.ones((3, 4)), np.ones(3), np.ones(5))

    def test_concat_rank_mismatch(self):
        with pytest.raises(D.ContractError):
            D.concat([np.ones(3), np.ones((2, 2))])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(D.ContractError):
            D.matmul(np.ones((2, 3)), np.ones(4))

    def test_mask_shape_mismatch(self):
        with pytest.raises(D.ContractError):
            D.log_softmax(np.ones(3), mask=np.ones(2, dtype=bool))

    @given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-30, 30)), st.data())
    @settings(max_examples=50)
    def test_softmax_normalised(self, v, data):
        masked = data.draw(st.integers(0, len(v) - 1))
        mask = np.zeros(len(v), dtype=bool)
        mask[masked] = True
        p = D.softmax(v, mask=mask).value
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p[~mask] > 0) and p[masked] == 0.0

    def test_lstm_cell_matches_gate_equations(self, rng):
        pre, c = rng.normal(size=8), rng.normal(size=2)
        sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        i, f, o, g = sig(pre[0:2]), sig(pre[2:4]), sig(pre[4:6]), np.tanh(pre[6:8])
        c_new = f * c + i * g
        out = D.lstm_cell(pre, c).value
        np.testing.assert_allclose(out, np.concatenate([o * np.tanh(c_new), c_new]), rtol=1e-14)


OPS = {
    "sigmoid": lambda a: D.sigmoid(a),
    "tanh": lambda a: D.tanh(a),
    "exp": lambda a: D.exp(a),
    "log": lambda a: D.log(D.exp(a) + 1.0),
    "log_softmax_masked": lambda a: D.rows(D.transpose(
        D.log_softmax(a, mask=np.array([False, True, False, False]))), [0, 2, 3]),
    "logsumexp": lambda a: D.logsumexp(a, axis=-1),
    "logcumsumexp": lambda a: D.logcumsumexp(a[0]),
    "exclusive_cumsum": lambda a: D.exclusive_cumsum(a, axis=0),
    "affine": lambda a: D.affine(a[:, :3], a[:, 3], a[0, :3]),
    "concat": lambda a: D.concat([a[0], a[1] * 2.0]),
    "stack": lambda a: D.stack([a[1], a[0]], axis=1),
    "matmul": lambda a: D.matmul(a, D.transpose(a)),
    "pick_last": lambda a: D.pick_last(a, np.array([3, 0, 2])),
    "lstm_cell": lambda a: D.lstm_cell(D.reshape(a, (12,))[:8], a[2, :2]),
    "clip": lambda a: D.clip(a, -0.5, 0.5),
    "rows": lambda a: D.rows(a, [0, 2, 0]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_float64(name):
    rng = np.random.default_rng(7)
    a = D.parameter(rng.normal(size=(3, 4)), "a")
    weights = rng.normal(size=OPS[name](a).shape)

    def build():
        return D.sum_(OPS[name](a) * weights)
    assert fd_check(build, {"a": a}) < 1e-6


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_float32(name):
    rng = np.random.default_rng(7)
    base = rng.normal(size=(3, 4))
    a32 = D.parameter(base.astype(np.float32), "a")
    weights = rng.normal(size=OPS[name](a32).shape).astype(np.float32)
    grad = D.backward(D.sum_(OPS[name](a32) * weights), {"a": a32})["a"]
    a64 = D.parameter(base.copy(), "a")
    w64 = weights.astype(np.float64)
    worst = 0.0
    for idx in np.ndindex(base.shape):
        num = D.numerical_grad(lambda: D.sum_(OPS[name](a64) * w64).item(), a64.value, idx)
        worst = max(worst, D.relative_error(float(grad[idx]), num, floor=1e-3))
    assert worst < 1e-3
