"""Tensor engine: forward values against naive oracles, gradients against
central finite differences."""

import numpy as np
import pytest

from morphbench.autodiff import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    clamped_pow,
    conv2d,
    conv_bank,
    downsample2x,
    elementwise,
    grad_check,
    matmul,
    pad_reflect2d,
    reduce,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# elementwise


def test_add_values():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_abs_gradient_sign_rule():
    x = Tensor([-2.0], requires_grad=True)
    backward(elementwise("abs", x).sum())
    np.testing.assert_array_equal(x.grad, [-1.0])


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError, match="division by zero"):
        elementwise("div", Tensor([1.0, 2.0]), Tensor([1.0, 0.0]))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_scalar_operand_broadcasts():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    out = (x * 2.0 + 1.0).sum()
    backward(out)
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_scalar_tensor_times_array_gradient():
    s = Tensor(3.0, requires_grad=True)
    x = Tensor([1.0, 2.0, 3.0])
    backward((s * x).sum())
    np.testing.assert_allclose(s.grad, np.asarray(6.0))


# ---------------------------------------------------------------------------
# reductions


def test_mean_value_and_grad():
    x = Tensor([2.0, 4.0, 6.0], requires_grad=True)
    m = reduce("mean", x)
    assert m.item() == 4.0
    backward(m)
    np.testing.assert_allclose(x.grad, [1 / 3] * 3)


def test_mean_grad_quarter_for_four_elements():
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    backward(reduce("mean", x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_max_routes_gradient_to_argmax_only():
    x = Tensor([1.0, 5.0, 3.0], requires_grad=True)
    m = reduce("max", x)
    assert m.item() == 5.0
    backward(m)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reduce_empty_raises():
    with pytest.raises(ShapeError):
        reduce("sum", Tensor(np.zeros((0,))))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, b.data)


def test_matmul_1x1():
    np.testing.assert_array_equal(matmul(Tensor([[2.0]]), Tensor([[3.0]])).data, [[6.0]])


def test_matmul_matches_triple_loop_oracle():
    r = rng(1)
    a = r.uniform(-1, 1, (3, 4))
    b = r.uniform(-1, 1, (4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# conv2d / pooling / padding


def test_conv2d_identity_kernel():
    x = rng(2).uniform(0, 1, (1, 4, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1))), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_uniform_kernel_preserves_constants():
    x = np.full((1, 5, 5), 3.25)
    out = conv2d(Tensor(x), Tensor(np.full((1, 2, 2), 0.25)), stride=1)
    np.testing.assert_allclose(out.data, np.full((1, 4, 4), 3.25), atol=1e-12)


def test_conv2d_matches_sliding_window_oracle():
    r = rng(3)
    x = r.uniform(-1, 1, (1, 5, 5))
    k = r.uniform(-1, 1, (1, 3, 3))
    expected = np.zeros((3, 3))
    for oy in range(3):
        for ox in range(3):
            expected[oy, ox] = (x[0, oy : oy + 3, ox : ox + 3] * k[0]).sum()
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k)).data[0], expected, atol=1e-12)


def test_conv2d_strided_output_size():
    out = conv2d(Tensor(np.zeros((1, 7, 9))), Tensor(np.zeros((1, 3, 3))), stride=2)
    assert out.shape == (1, 3, 4)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError, match="larger than input"):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 3))))


def test_conv_bank_multichannel_matches_loop():
    r = rng(4)
    x = r.uniform(-1, 1, (2, 6, 6))
    k = r.uniform(-1, 1, (3, 2, 3, 3))
    out = conv_bank(Tensor(x), Tensor(k), stride=2).data
    expected = np.zeros((3, 2, 2))
    for o in range(3):
        for oy in range(2):
            for ox in range(2):
                expected[o, oy, ox] = (x[:, 2 * oy : 2 * oy + 3, 2 * ox : 2 * ox + 3] * k[o]).sum()
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_downsample2x_constant():
    np.testing.assert_array_equal(downsample2x(Tensor([[1.0, 1.0], [1.0, 1.0]])).data, [[1.0]])


def test_downsample2x_mean_of_four():
    np.testing.assert_array_equal(downsample2x(Tensor([[0.0, 2.0], [4.0, 6.0]])).data, [[3.0]])


def test_downsample2x_odd_matches_block_mean_oracle():
    x = rng(5).uniform(0, 1, (5, 5))
    out = downsample2x(Tensor(x)).data
    assert out.shape == (2, 2)
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            expected[i, j] = x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean()
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_downsample2x_too_small():
    with pytest.raises(ShapeError):
        downsample2x(Tensor(np.zeros((1, 1))))


def test_pad_reflect2d_matches_numpy():
    x = rng(6).uniform(0, 1, (2, 4, 5))
    out = pad_reflect2d(Tensor(x), 2).data
    np.testing.assert_array_equal(out, np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="reflect"))


# ---------------------------------------------------------------------------
# backward semantics


def test_sum_backward_all_ones():
    x = Tensor(np.zeros((3, 2)), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_square_grad_at_three():
    x = Tensor([3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [6.0])


def test_non_scalar_loss_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 1.0], requires_grad=True)
    loss = x.sum()
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_requires_grad_leaves_grad_absent():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0])
    backward((x * y).sum())
    assert y.grad is None
    assert x.grad is not None


def test_shared_subexpression_counted_once_per_use():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    backward((y + y).sum())
    np.testing.assert_array_equal(x.grad, [6.0])


def test_forward_is_deterministic():
    r = rng(7)
    x = r.uniform(-1, 1, (3, 8, 8))
    k = r.uniform(-1, 1, (2, 3, 3, 3))
    a = conv_bank(Tensor(x), Tensor(k), 2).data
    b = conv_bank(Tensor(x), Tensor(k), 2).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# grad_check and per-op gradient fidelity


def test_grad_check_quadratic_is_tight():
    x = Tensor(rng(8).uniform(-1, 1, (6,)))
    err = grad_check(lambda t: (t * t).sum(), x, eps=1e-5)
    assert err < 1e-6


def test_grad_check_constant_function():
    x = Tensor(rng(9).uniform(-1, 1, (4,)))
    err = grad_check(lambda t: (t * 0.0).sum(), x, eps=1e-5)
    assert err == 0.0


def test_grad_check_rejects_non_finite():
    # sqrt goes NaN when the negative perturbation crosses zero
    x = Tensor([1e-6])
    with pytest.raises(ValueError, match="non-finite"):
        grad_check(lambda t: t.sqrt().sum(), x, eps=1e-5)


@pytest.mark.parametrize(
    "name,fn",
    [
        ("add", lambda t: (t + Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).sum()),
        ("sub", lambda t: (Tensor(np.linspace(-1, 1, 12).reshape(3, 4)) - t).sum()),
        ("mul", lambda t: (t * Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).mean()),
        ("div", lambda t: (t / Tensor(np.linspace(2, 3, 12).reshape(3, 4))).sum()),
        ("pow", lambda t: ((t + 2.0) ** 2.5).sum()),
        ("abs", lambda t: ((t + 3.0).abs()).sum()),
        ("sqrt", lambda t: ((t + 2.0).sqrt()).sum()),
        ("exp", lambda t: (t.exp()).mean()),
        ("tanh", lambda t: (t.tanh()).sum()),
        ("mean", lambda t: t.mean()),
        ("reshape", lambda t: (t.reshape(4, 3) * 2.0).sum()),
        ("clamped_pow", lambda t: clamped_pow(t + 2.0, 0.7).sum()),
    ],
)
def test_primitive_gradients_match_finite_differences(name, fn):
    x = Tensor(rng(hash(name) % 2**32).uniform(-1, 1, (3, 4)))
    assert grad_check(fn, x, eps=1e-5) < 1e-4


def test_matmul_gradients_match_finite_differences():
    b = Tensor(rng(11).uniform(-1, 1, (4, 2)))
    x = Tensor(rng(12).uniform(-1, 1, (3, 4)))
    assert grad_check(lambda t: (matmul(t, b) ** 2.0).sum(), x, eps=1e-5) < 1e-4


def test_conv_bank_gradients_match_finite_differences():
    k = Tensor(rng(13).uniform(-1, 1, (2, 2, 3, 3)))
    x = Tensor(rng(14).uniform(-1, 1, (2, 6, 6)))
    assert grad_check(lambda t: (conv_bank(t, k, 2) ** 2.0).sum(), x, eps=1e-5) < 1e-4
    xf = Tensor(rng(15).uniform(-1, 1, (2, 6, 6)))
    assert grad_check(lambda t: (conv_bank(xf, t, 2) ** 2.0).sum(), k, eps=1e-5) < 1e-4


def test_downsample_and_pad_gradients_match_finite_differences():
    x = Tensor(rng(16).uniform(-1, 1, (2, 5, 5)))
    assert grad_check(lambda t: (downsample2x(t) ** 2.0).sum(), x, eps=1e-5) < 1e-4
    assert grad_check(lambda t: (pad_reflect2d(t, 2) ** 2.0).sum(), x, eps=1e-5) < 1e-4


def test_max_gradient_matches_finite_differences_off_ties():
    # keep a clear argmax so central differences see a smooth function
    x = Tensor(np.array([[0.1, 0.9], [-0.4, 0.2]]))
    assert grad_check(lambda t: t.max() * 3.0, x, eps=1e-5) < 1e-4
