import numpy as np
import pytest

from anoref.errors import ProtocolError, ShapeError
from anoref.tensor import (
    Graph,
    Tensor,
    backward,
    reset_grads,
    scalar,
    sgd_step,
    upsample_array,
)

from oracles import fd_relative_error


def rand_tensor(rng, dims, requires_grad=False, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=dims).astype(np.float32), requires_grad)


# -- conv2d ------------------------------------------------------------------


def test_conv2d_identity_kernel():
    g = Graph()
    x = Tensor(np.ones((3, 3, 1), dtype=np.float32))
    k = np.zeros((3, 3, 1, 1), dtype=np.float32)
    k[1, 1, 0, 0] = 1.0
    out = g.conv2d(x, Tensor(k), Tensor.zeros((1,)))
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("dims", [(1, 1, 1), (4, 7, 3), (8, 8, 2)])
def test_conv2d_identity_kernel_any_shape(dims):
    rng = np.random.default_rng(5)
    x = rand_tensor(rng, dims)
    c = dims[2]
    k = np.zeros((3, 3, c, c), dtype=np.float32)
    for ch in range(c):
        k[1, 1, ch, ch] = 1.0
    out = Graph().conv2d(x, Tensor(k), Tensor.zeros((c,)))
    assert np.array_equal(out.data, x.data)


def test_conv2d_all_ones_hand_case():
    g = Graph()
    x = Tensor(np.ones((3, 3, 1), dtype=np.float32))
    k = Tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
    out = g.conv2d(x, k, Tensor.zeros((1,))).data[:, :, 0]
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
    assert np.array_equal(out, expected)


def test_conv2d_channel_mismatch_rejected():
    g = Graph()
    x = Tensor(np.ones((4, 4, 2), dtype=np.float32))
    k = Tensor(np.ones((3, 3, 3, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        g.conv2d(x, k, Tensor.zeros((1,)))


def test_conv2d_even_kernel_rejected():
    g = Graph()
    x = Tensor(np.ones((4, 4, 1), dtype=np.float32))
    k = Tensor(np.ones((2, 2, 1, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        g.conv2d(x, k, Tensor.zeros((1,)))


def test_conv2d_gradient_matches_finite_difference():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, (4, 4, 2), requires_grad=True)
    k = rand_tensor(rng, (3, 3, 2, 3), requires_grad=True)
    b = rand_tensor(rng, (3,), requires_grad=True)

    def forward():
        return float(Graph().conv2d(x, k, b).data.sum(dtype=np.float64))

    g = Graph()
    loss = g.sum(g.conv2d(x, k, b))
    g.backward(loss)
    err = fd_relative_error(forward, [x, k, b])
    assert err < 1e-3


# -- upsample ----------------------------------------------------------------


def test_upsample_constant_preserved():
    x = Tensor(np.full((3, 5, 2), 0.7, dtype=np.float32))
    out = Graph().upsample_bilinear(x, 2)
    assert out.dims == (6, 10, 2)
    assert np.array_equal(out.data, np.full((6, 10, 2), 0.7, dtype=np.float32))


def test_upsample_hand_case_1x2():
    x = Tensor(np.array([[[0.0], [1.0]]], dtype=np.float32))
    out = Graph().upsample_bilinear(x, 2)
    assert out.dims == (2, 4, 1)
    expected = np.array([0.0, 0.25, 0.75, 1.0], dtype=np.float32)
    assert np.array_equal(out.data[0, :, 0], expected)
    assert np.array_equal(out.data[1, :, 0], expected)


def test_upsample_factor_below_one_rejected():
    x = Tensor(np.ones((4, 4, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        Graph().upsample_bilinear(x, 0.5)


def test_upsample_rational_factor_dims():
    x = Tensor(np.ones((8, 8, 1), dtype=np.float32))
    out = Graph().upsample_bilinear(x, 3.5)
    assert out.dims == (28, 28, 1)


def test_upsample_preserves_bounds():
    rng = np.random.default_rng(3)
    for factor in (2, 1.5, 3.5):
        x = rand_tensor(rng, (5, 7, 3), lo=-2.0, hi=4.0)
        out = Graph().upsample_bilinear(x, factor)
        assert out.data.min() >= x.data.min()
        assert out.data.max() <= x.data.max()


def test_upsample_gradient_matches_finite_difference():
    rng = np.random.default_rng(13)
    x = rand_tensor(rng, (3, 3, 1), requires_grad=True)

    def forward():
        g2 = Graph()
        out = g2.upsample_bilinear(x, 2)
        return float((out.data.astype(np.float64) ** 2).sum())

    g = Graph()
    out = g.upsample_bilinear(x, 2)
    loss = g.sum(g.mul(out, out))
    g.backward(loss)
    assert fd_relative_error(forward, [x]) < 1e-3


# -- elementwise ---------------------------------------------------------------


def test_elementwise_fixed_points():
    g = Graph()
    assert g.sigmoid(scalar(0.0)).item() == 0.5
    assert g.exp(scalar(0.0)).item() == 1.0
    assert g.relu(scalar(-1.0)).item() == 0.0


def test_elementwise_channel_broadcast_mul():
    g = Graph()
    a = Tensor(np.ones((2, 2, 3), dtype=np.float32))
    b = Tensor(np.full((2, 2, 1), 0.5, dtype=np.float32))
    out = g.elementwise("mul", a, b)
    assert np.array_equal(out.data, np.full((2, 2, 3), 0.5, dtype=np.float32))


def test_elementwise_eq1_composite():
    # exp((beta - 1) * y) at beta=2, y=0.7
    g = Graph()
    beta = scalar(2.0)
    y = scalar(0.7)
    zeta = g.exp(g.mul(y, g.sub(beta, scalar(1.0))))
    assert zeta.item() == pytest.approx(2.01375, abs=1e-5)


def test_elementwise_incompatible_dims_rejected():
    g = Graph()
    a = Tensor(np.ones((2, 2, 3), dtype=np.float32))
    b = Tensor(np.ones((2, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        g.add(a, b)


def test_elementwise_dispatch_arity():
    g = Graph()
    a = Tensor(np.ones((2, 2, 1), dtype=np.float32))
    with pytest.raises(ValueError):
        g.elementwise("add", a)
    with pytest.raises(ValueError):
        g.elementwise("exp", a, a)
    with pytest.raises(ValueError):
        g.elementwise("nope", a)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("b_dims", [(3, 4, 2), (3, 4, 1), ()])
def test_binary_gradients_match_finite_difference(op, b_dims):
    rng = np.random.default_rng(hash((op, len(b_dims))) % 2**32)
    a = rand_tensor(rng, (3, 4, 2), requires_grad=True)
    b = rand_tensor(rng, b_dims, requires_grad=True, lo=0.5, hi=2.0)

    def forward():
        g2 = Graph()
        return float(getattr(g2, op)(a, b).data.sum(dtype=np.float64))

    g = Graph()
    loss = g.sum(getattr(g, op)(a, b))
    g.backward(loss)
    assert fd_relative_error(forward, [a, b]) < 1e-3


@pytest.mark.parametrize("op", ["exp", "sigmoid", "relu"])
def test_unary_gradients_match_finite_difference(op):
    rng = np.random.default_rng(len(op))
    # keep samples away from relu's kink; central differences are only a
    # valid oracle where the op is differentiable
    mag = rng.uniform(0.05, 1.5, size=(4, 4, 2))
    sign = rng.choice([-1.0, 1.0], size=(4, 4, 2))
    x = Tensor((mag * sign).astype(np.float32), requires_grad=True)

    def forward():
        g2 = Graph()
        return float(getattr(g2, op)(x).data.sum(dtype=np.float64))

    g = Graph()
    loss = g.sum(getattr(g, op)(x))
    g.backward(loss)
    assert fd_relative_error(forward, [x]) < 1e-3


def test_relu_subgradient_zero_at_zero():
    g = Graph()
    x = Tensor(np.zeros((2, 2, 1), dtype=np.float32), requires_grad=True)
    loss = g.sum(g.relu(x))
    g.backward(loss)
    assert np.array_equal(x.grad, np.zeros((2, 2, 1), dtype=np.float32))


# -- concat -------------------------------------------------------------------


def test_concat_definition():
    g = Graph()
    a = Tensor(np.full((2, 2, 1), 1.0, dtype=np.float32))
    b = Tensor(np.full((2, 2, 1), 2.0, dtype=np.float32))
    out = g.concat_channels(a, b)
    assert out.dims == (2, 2, 2)
    assert np.array_equal(out.data[:, :, 0], a.data[:, :, 0])
    assert np.array_equal(out.data[:, :, 1], b.data[:, :, 0])


def test_concat_channel_budget():
    g = Graph()
    a = Tensor(np.zeros((2, 2, 64), dtype=np.float32))
    b = Tensor(np.zeros((2, 2, 192), dtype=np.float32))
    assert g.concat_channels(a, b).dims == (2, 2, 256)


def test_concat_spatial_mismatch_rejected():
    g = Graph()
    a = Tensor(np.zeros((2, 2, 1), dtype=np.float32))
    b = Tensor(np.zeros((3, 2, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        g.concat_channels(a, b)


def test_concat_gradient_splits():
    rng = np.random.default_rng(2)
    a = rand_tensor(rng, (2, 2, 2), requires_grad=True)
    b = rand_tensor(rng, (2, 2, 3), requires_grad=True)
    g = Graph()
    cat = g.concat_channels(a, b)
    w = Tensor(rng.uniform(-1, 1, size=(2, 2, 5)).astype(np.float32))
    loss = g.sum(g.mul(cat, w))
    g.backward(loss)
    assert np.array_equal(a.grad, w.data[:, :, :2])
    assert np.array_equal(b.grad, w.data[:, :, 2:])


# -- backward / sgd -----------------------------------------------------------


def test_backward_sum_gives_ones():
    g = Graph()
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 2, 2), requires_grad=True)
    g.backward(g.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2, 2), dtype=np.float32))


def test_backward_quadratic():
    g = Graph()
    x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    loss = g.sum(g.mul(x, x))
    g.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar_loss():
    g = Graph()
    x = Tensor(np.ones((2, 2, 1), dtype=np.float32), requires_grad=True)
    y = g.mul(x, x)
    with pytest.raises(ShapeError):
        g.backward(y)


def test_backward_accumulates_and_reset_clears():
    g = Graph()
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    loss = g.sum(x)
    g.backward(loss)
    backward(loss, g)
    assert np.array_equal(x.grad, np.full(3, 2.0, dtype=np.float32))
    reset_grads([x])
    assert x.grad is None


def test_graph_nodes_topologically_ordered():
    g = Graph()
    x = Tensor(np.ones((2, 2, 1), dtype=np.float32), requires_grad=True)
    y = g.relu(x)
    z = g.add(y, x)
    g.sum(z)
    for nid, node in enumerate(g.nodes):
        for input_id in node.input_ids:
            assert input_id < nid


def test_sgd_step_definition():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([2.0], dtype=np.float32)
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad is None


def test_sgd_step_zero_grad_fixed_point():
    p = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    sgd_step([p], 0.1)
    assert p.data[0] == 1.5


def test_sgd_step_missing_grad_rejected():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    with pytest.raises(ProtocolError):
        sgd_step([p], 0.1)


def test_sgd_converges_on_quadratic():
    # f(w) = (w - 3)^2, lr 0.1: residual after k steps is (1 - 2*lr)^k * 3
    w = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    target = scalar(3.0)
    for _ in range(20):
        g = Graph()
        diff = g.sub(w, target)
        loss = g.sum(g.mul(diff, diff))
        g.backward(loss)
        sgd_step([w], 0.1)
    residual = 3.0 - float(w.data[0])
    assert residual == pytest.approx((1 - 2 * 0.1) ** 20 * 3.0, rel=1e-4)


# -- purity / determinism -------------------------------------------------------


def test_ops_bit_identical_across_runs():
    rng = np.random.default_rng(42)
    x = rand_tensor(rng, (5, 6, 3))
    k = rand_tensor(rng, (3, 3, 3, 4))
    b = rand_tensor(rng, (4,))

    def run():
        g = Graph()
        y = g.conv2d(x, k, b)
        y = g.upsample_bilinear(y, 2)
        y = g.sigmoid(y)
        return y.data

    assert np.array_equal(run(), run())


def test_upsample_array_matches_graph_op():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (4, 4, 2))
    out_op = Graph().upsample_bilinear(x, 2).data
    assert np.array_equal(upsample_array(x.data, 2), out_op)


def test_randomized_finite_difference_sweep():
    # spec invariant: 5 seeds per differentiable op, h=1e-3, rel err < 1e-3
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rand_tensor(rng, (4, 4, 2), requires_grad=True)
        k = rand_tensor(rng, (3, 3, 2, 2), requires_grad=True)
        b = rand_tensor(rng, (2,), requires_grad=True)

        def forward():
            g2 = Graph()
            y = g2.conv2d(x, k, b)
            y = g2.upsample_bilinear(y, 2)
            y = g2.sigmoid(y)
            return float(y.data.sum(dtype=np.float64))

        g = Graph()
        y = g.conv2d(x, k, b)
        y = g.upsample_bilinear(y, 2)
        y = g.sigmoid(y)
        g.backward(g.sum(y))
        assert fd_relative_error(forward, [x, k, b]) < 1e-3
        reset_grads([x, k, b])
