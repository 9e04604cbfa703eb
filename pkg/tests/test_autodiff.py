import numpy as np
import pytest

from convcap import autodiff as ad
from convcap.autodiff import (Tensor, add, add_bias, bmm, causal_conv1d, conv2d, current_tape, gather_rows,
                              grad_check, leaky_relu, masked_nll, matmul, mul, no_grad, precision, reshape,
                              scale, sigmoid, softmax_lastdim, sum_squares, transpose, tsum)
from convcap.errors import DimensionError, NumericError, TokenIndexError

from oracles import conv1d_loop


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestTensor:
    def test_shape_and_grad_presence(self, f64):
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        assert t.shape == (2, 3) and t.data.size == 6
        assert t.grad.shape == t.shape
        assert Tensor([1.0]).grad is None

    def test_default_dtype_switch(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_backward_requires_scalar(self, f64, rng):
        x = param(rng, 2, 2)
        with pytest.raises(DimensionError):
            scale(x, 2.0).backward()


class TestTape:
    def test_reverse_order_and_cleared(self, f64, rng):
        x = param(rng, 3)
        y = sigmoid(x)
        z = mul(y, x)
        loss = tsum(z)
        tape = current_tape()
        assert len(tape) == 3
        loss.backward()
        assert tape.last_visit_order == [2, 1, 0]
        assert len(tape) == 0

    def test_unused_tensor_grad_is_zero(self, f64, rng):
        used, unused = param(rng, 4), param(rng, 4)
        _ = sigmoid(unused)                  # recorded but disconnected from the loss
        tsum(mul(used, used)).backward()
        assert np.array_equal(unused.grad, np.zeros(4))
        np.testing.assert_allclose(used.grad, 2 * used.data)

    def test_no_grad_records_nothing(self, f64, rng):
        x = param(rng, 3)
        with no_grad():
            y = sigmoid(x)
        assert len(current_tape()) == 0 and not y.requires_grad

    def test_gradients_accumulate_through_reuse(self, f64, rng):
        x = param(rng, 3)
        tsum(add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


class TestMatmul:
    def test_identity(self, f64, rng):
        x = rng.standard_normal((2, 5))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_hand_sum(self, f64):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient_vs_finite_differences(self, f64, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        report = grad_check(lambda: tsum(matmul(a, b)), [a, b], h=1e-5, tol=1e-6)
        assert report.passed, report

    def test_shape_error_names_both_shapes(self, f64, rng):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rows_do_not_depend_on_other_rows(self, rng):
        b = rng.standard_normal((64, 48)).astype(np.float32)
        a = rng.standard_normal((37, 64)).astype(np.float32)
        full = ad.stable_matmul(a, b)
        for i in range(a.shape[0]):
            assert np.array_equal(ad.stable_matmul(a[i:i + 1], b)[0], full[i])


class TestCausalConv:
    def test_width_one_is_per_position(self, f64, rng):
        x = rng.standard_normal((6, 3))
        kernel, bias = Tensor(rng.standard_normal((1, 3, 2))), Tensor(rng.standard_normal(2))
        base = causal_conv1d(Tensor(x), kernel, bias).data
        x2 = x.copy()
        x2[3] += 1.0
        changed = causal_conv1d(Tensor(x2), kernel, bias).data
        diff = np.any(base != changed, axis=1)
        assert diff.tolist() == [False, False, False, True, False, False]

    def test_zero_input_gives_bias(self, f64, rng):
        bias = rng.standard_normal(4)
        out = causal_conv1d(Tensor(np.zeros((5, 3))), Tensor(rng.standard_normal((3, 3, 4))), Tensor(bias))
        np.testing.assert_array_equal(out.data, np.tile(bias, (5, 1)))

    def test_matches_triple_loop_exactly(self, f64, rng):
        x = rng.integers(-3, 4, size=(4, 2)).astype(float)
        kernel = rng.integers(-2, 3, size=(3, 2, 3)).astype(float)
        bias = rng.integers(-2, 3, size=3).astype(float)
        out = causal_conv1d(Tensor(x), Tensor(kernel), Tensor(bias)).data
        np.testing.assert_array_equal(out, conv1d_loop(x, kernel, bias))

    def test_batched_equals_per_example(self, f64, rng):
        x = rng.standard_normal((3, 5, 2))
        kernel, bias = Tensor(rng.standard_normal((2, 2, 4))), Tensor(rng.standard_normal(4))
        out = causal_conv1d(Tensor(x), kernel, bias).data
        for b in range(3):
            assert np.array_equal(out[b], causal_conv1d(Tensor(x[b]), kernel, bias).data)

    @pytest.mark.parametrize("x_shape,k_shape", [((0, 2), (2, 2, 2)), ((3, 2), (0, 2, 2))])
    def test_empty_input_or_zero_width(self, f64, x_shape, k_shape):
        with pytest.raises(DimensionError):
            causal_conv1d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(k_shape)), Tensor(np.zeros(2)))

    def test_causality_any_edit(self, f64, rng):
        kernel, bias = Tensor(rng.standard_normal((3, 2, 2))), Tensor(rng.standard_normal(2))
        x = rng.standard_normal((8, 2))
        base = causal_conv1d(Tensor(x), kernel, bias).data
        for j in range(8):
            x2 = x.copy()
            x2[j] = rng.standard_normal(2)
            out = causal_conv1d(Tensor(x2), kernel, bias).data
            assert np.array_equal(out[:j], base[:j])


class TestElementwise:
    def test_sigmoid_zero(self, f64):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self, f64):
        out = sigmoid(Tensor([-1000.0, 1000.0])).data
        assert np.isfinite(out).all() and out[0] == 0.0 and out[1] == 1.0

    def test_leaky_relu(self, f64):
        np.testing.assert_allclose(leaky_relu(Tensor([2.0, -1.0])).data, [2.0, -0.1])

    def test_softmax_forced(self, f64):
        np.testing.assert_allclose(softmax_lastdim(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_softmax_large_inputs(self, f64, rng):
        x = rng.uniform(-1e3, 1e3, size=(20, 7))
        out = softmax_lastdim(Tensor(x)).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_shape_mismatch(self, f64):
        with pytest.raises(DimensionError):
            mul(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(DimensionError):
            add(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


class TestGather:
    def test_repeated_rows_and_scatter(self, f64, rng):
        table = param(rng, 3, 2)
        out = gather_rows(table, [0, 0])
        np.testing.assert_array_equal(out.data, table.data[[0, 0]])
        tsum(out).backward()
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [0, 0]])

    def test_identity_permutation(self, f64, rng):
        table = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(gather_rows(Tensor(table), [0, 1, 2, 3]).data, table)

    def test_out_of_range_names_id_and_v(self, f64):
        with pytest.raises(TokenIndexError, match="id 5.*V=3"):
            gather_rows(Tensor(np.zeros((3, 2))), [1, 5])

    def test_grad_check(self, f64, rng):
        table = param(rng, 5, 3)
        weights = Tensor(rng.standard_normal((4, 3)))
        report = grad_check(lambda: tsum(mul(gather_rows(table, [4, 1, 1, 0]), weights)), [table], tol=1e-6)
        assert report.passed, report


def _op_cases(rng):
    """(name, params, objective) for every differentiable op, including L=1 and C=1 edges."""
    w = lambda *s: Tensor(rng.standard_normal(s))     # fixed projection so outputs reach a scalar
    cases = []
    for length, ch in ((1, 1), (1, 3), (4, 1), (5, 3)):
        x, k, b = param(rng, length, ch), param(rng, 3, ch, 2), param(rng, 2)
        proj = w(length, 2)
        cases.append((f"causal_conv1d L={length} C={ch}", [x, k, b],
                      lambda x=x, k=k, b=b, proj=proj: tsum(mul(causal_conv1d(x, k, b), proj))))
    a, b3 = param(rng, 2, 3, 4), param(rng, 2, 4, 1)
    pb = w(2, 3, 1)
    cases.append(("bmm", [a, b3], lambda: tsum(mul(bmm(a, b3), pb))))
    x = param(rng, 3, 4)
    proj = w(3, 4)
    for name, op in (("sigmoid", sigmoid), ("leaky_relu", leaky_relu), ("softmax", softmax_lastdim)):
        cases.append((name, [x], lambda op=op: tsum(mul(op(x), proj))))
    y = param(rng, 3, 4)
    cases.append(("mul", [x, y], lambda: tsum(mul(mul(x, y), proj))))
    bias = param(rng, 4)
    cases.append(("add_bias", [x, bias], lambda: tsum(mul(add_bias(x, bias), proj))))
    cases.append(("transpose/reshape", [x], lambda: tsum(mul(reshape(transpose(x), (3, 4)), proj))))
    cases.append(("sum_squares", [x], lambda: sum_squares(x)))
    img, ker, cb = param(rng, 1, 5, 5, 2), param(rng, 3, 3, 2, 3), param(rng, 3)
    pc = w(1, 3, 3, 3)
    cases.append(("conv2d", [img, ker, cb], lambda: tsum(mul(conv2d(img, ker, cb, stride=2, padding=1), pc))))
    logits = param(rng, 2, 3, 5)
    targets = np.array([[1, 2, 0], [4, 0, 0]])
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    cases.append(("masked_nll", [logits], lambda: masked_nll(softmax_lastdim(logits), targets, mask)))
    return cases


class TestGradCheck:
    def test_sum_is_exact(self, f64, rng):
        x = param(rng, 3, 2)
        report = grad_check(lambda: tsum(x), [x])
        assert report.max_rel_error < 1e-9

    def test_every_op(self, f64):
        for name, params, f in _op_cases(np.random.default_rng(7)):
            report = grad_check(f, params, h=1e-5, tol=1e-4)
            assert report.passed, f"{name}: {report}"

    def test_corrupted_backward_is_reported(self, f64, rng, monkeypatch):
        original = ad.Sigmoid.backward
        monkeypatch.setattr(ad.Sigmoid, "backward", lambda self, g: (1.1 * original(self, g)[0],))
        x = param(rng, 4)
        report = grad_check(lambda: tsum(sigmoid(x)), [x])
        assert not report.passed
        assert "FAIL" in str(report)

    def test_non_finite_raises(self, f64):
        x = Tensor([np.inf], requires_grad=True)
        with pytest.raises(NumericError):
            grad_check(lambda: tsum(x), [x])
