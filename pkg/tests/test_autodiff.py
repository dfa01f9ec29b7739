import math

import numpy as np
import pytest

from promptpose import autodiff as ad
from promptpose.errors import ContractError, InvalidInputError, ShapeError
from promptpose.gradcheck import numeric_gradient, relative_error


def fd_check(build_loss, leaves, tol=1e-6, h=1e-5, n_coords=6, seed=0):
    """Compare analytic gradients of build_loss(leaves) against central differences."""
    rng = np.random.default_rng(seed)
    loss = build_loss()
    ad.backward(loss)
    for leaf in leaves:
        analytic = leaf.grad.reshape(-1).copy()
        coords = rng.choice(leaf.data.size, size=min(n_coords, leaf.data.size), replace=False)
        leaf.grad = None
        numeric = numeric_gradient(lambda: build_loss().item(), leaf.data, coords, h=h)
        err = relative_error(analytic[coords], numeric)
        assert err.max() < tol, f"gradient mismatch: {err.max():.3e}"


def leaf(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_direct():
    out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(ad.Tensor(np.zeros((4, 5))), ad.Tensor(np.zeros((4, 2))))
    assert "(4, 5)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = leaf(rng, 4, 5)
    b = leaf(rng, 5, 2)
    fd_check(lambda: ad.matmul(a, b).sum(), [a, b])


def test_bmm_gradient():
    rng = np.random.default_rng(8)
    a = leaf(rng, 3, 2, 4)
    b = leaf(rng, 3, 4, 2)
    fd_check(lambda: ad.bmm(a, b).sum(), [a, b])


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform_on_equal_inputs():
    out = ad.softmax(ad.Tensor(np.full((2, 5), 3.25)), axis=-1)
    np.testing.assert_allclose(out.data, np.full((2, 5), 0.2), atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 7))
    a = ad.softmax(ad.Tensor(x), axis=-1).data
    b = ad.softmax(ad.Tensor(x + 123.456), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_closed_form():
    out = ad.softmax(ad.Tensor([0.0, math.log(3.0)]), axis=0)
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-14)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    out = ad.softmax(ad.Tensor(rng.standard_normal((6, 9)) * 10), axis=1)
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-12)


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = leaf(rng, 4, 6)
    w = ad.Tensor(rng.standard_normal((4, 6)))
    fd_check(lambda: (ad.softmax(x, axis=1) * w).sum(), [x])


# -- bilinear sampling ----------------------------------------------------------

def test_bilinear_sample_at_cell_center():
    rng = np.random.default_rng(3)
    fmap = rng.standard_normal((2, 4, 6))
    pts = np.array([[(2 + 0.5) / 6, (1 + 0.5) / 4]])
    out = ad.bilinear_sample(ad.Tensor(fmap), ad.Tensor(pts))
    np.testing.assert_allclose(out.data[0], fmap[:, 1, 2], atol=1e-12)


def test_bilinear_sample_midpoint_is_mean_of_four():
    rng = np.random.default_rng(4)
    fmap = rng.standard_normal((1, 4, 4))
    pts = np.array([[2.0 / 4, 2.0 / 4]])  # corner shared by cells (1,1),(1,2),(2,1),(2,2)
    out = ad.bilinear_sample(ad.Tensor(fmap), ad.Tensor(pts))
    np.testing.assert_allclose(out.data[0, 0], fmap[0, 1:3, 1:3].mean(), atol=1e-12)


def test_bilinear_sample_far_outside_reads_zero():
    fmap = ad.Tensor(np.ones((3, 5, 5)))
    out = ad.bilinear_sample(fmap, ad.Tensor([[2.0, 2.0], [-1.0, 0.5]]))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_bilinear_sample_nan_coordinates_rejected():
    with pytest.raises(InvalidInputError):
        ad.bilinear_sample(ad.Tensor(np.ones((1, 4, 4))), ad.Tensor([[np.nan, 0.5]]))


def test_bilinear_sample_gradients():
    rng = np.random.default_rng(5)
    fmap = leaf(rng, 2, 8, 8)
    pts = ad.Tensor(rng.uniform(0.15, 0.85, size=(7, 2)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((7, 2)))
    fd_check(lambda: (ad.bilinear_sample(fmap, pts) * w).sum(), [fmap, pts], tol=1e-5)


# -- layer norm -----------------------------------------------------------------

def test_layer_norm_constant_input_returns_bias():
    bias = np.array([1.0, -2.0, 0.5])
    out = ad.layer_norm(ad.Tensor(np.full((4, 3), 7.0)), 1, ad.Tensor(np.ones(3)), ad.Tensor(bias))
    np.testing.assert_allclose(out.data, np.broadcast_to(bias, (4, 3)), atol=1e-12)


def test_layer_norm_zero_mean():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 8))
    out = ad.layer_norm(ad.Tensor(x), 1, ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(5), atol=1e-10)


def test_layer_norm_gradient():
    rng = np.random.default_rng(7)
    x = leaf(rng, 3, 6)
    gain = leaf(rng, 6)
    bias = leaf(rng, 6)
    w = ad.Tensor(rng.standard_normal((3, 6)))
    fd_check(lambda: (ad.layer_norm(x, 1, gain, bias) * w).sum(), [x, gain, bias], tol=1e-5)


# -- backward contract ------------------------------------------------------------

def test_backward_sum_gives_ones():
    p = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_two_p():
    p = ad.Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    ad.backward((p * p).sum())
    np.testing.assert_allclose(p.grad, 2 * p.data, atol=1e-15)


def test_backward_rejects_non_scalar():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(p * 2.0)


def test_backward_rejects_untaped_leaf():
    with pytest.raises(ContractError):
        ad.backward(ad.Tensor(1.0, requires_grad=True))


def test_double_backward_is_error():
    p = ad.Tensor(np.ones(3), requires_grad=True)
    loss = (p * p).sum()
    ad.backward(loss)
    with pytest.raises(ContractError):
        ad.backward(loss)


def test_tape_isolation_between_passes():
    p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward((p * 3.0).sum())
    first = p.grad.copy()
    p.grad = None
    ad.backward((p * 5.0).sum())
    np.testing.assert_array_equal(first, [3.0, 3.0])
    np.testing.assert_array_equal(p.grad, [5.0, 5.0])


def test_gradients_accumulate_without_reset():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    ad.backward((p * 2.0).sum())
    ad.backward((p * 3.0).sum())
    np.testing.assert_array_equal(p.grad, [5.0])


def test_diamond_graph_gradient():
    p = ad.Tensor(np.array([2.0]), requires_grad=True)
    q = p * 3.0
    loss = (q * q).sum()  # (3p)^2 -> d/dp = 18p
    ad.backward(loss)
    np.testing.assert_allclose(p.grad, [36.0])


def test_no_grad_builds_no_tape():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        out = (p * p).sum()
    assert out.node is None and not out.requires_grad


# -- elementwise / shape op gradients ---------------------------------------------

@pytest.mark.parametrize("build", [
    lambda x: (x + 2.5 * x).sum(),
    lambda x: (x - x * 0.5).sum(),
    lambda x: (x * x).sum(),
    lambda x: (x / (x * x + 2.0)).sum(),
    lambda x: ad.exp(x).sum(),
    lambda x: ad.log(x * x + 1.0).sum(),
    lambda x: ad.sqrt(x * x + 0.5).sum(),
    lambda x: ad.sigmoid(x).sum(),
    lambda x: ad.tanh(x).sum(),
    lambda x: ad.gelu(x).sum(),
    lambda x: ad.relu(x + 0.05).sum(),
    lambda x: ad.absolute(x + 0.05).sum(),
    lambda x: (x.reshape(6, 2) @ ad.Tensor(np.ones((2, 3)))).sum(),
    lambda x: x.transpose(1, 0).sum(axis=0).mean(),
    lambda x: ad.pow_const(x * x + 1.0, 1.7).sum(),
])
def test_elementwise_gradients(build):
    rng = np.random.default_rng(11)
    x = leaf(rng, 3, 4)
    fd_check(lambda: build(x), [x])


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(12)
    a = leaf(rng, 4, 3)
    b = leaf(rng, 3)
    c = leaf(rng, 4, 1)
    fd_check(lambda: ((a + b) * c).sum(), [a, b, c])


def test_maximum_minimum_clip_gradients():
    rng = np.random.default_rng(13)
    a = leaf(rng, 5)
    b = leaf(rng, 5)
    fd_check(lambda: (ad.maximum(a, b) + ad.minimum(a * 2.0, b)).sum(), [a, b])
    x = ad.Tensor(np.array([-2.0, -0.3, 0.4, 1.7]), requires_grad=True)
    fd_check(lambda: ad.clip(x, -1.0, 1.0).sum(), [x])


def test_concat_stack_slice_gradients():
    rng = np.random.default_rng(14)
    a = leaf(rng, 2, 3)
    b = leaf(rng, 4, 3)
    fd_check(lambda: ad.concat([a, b], axis=0)[1:5, :2].sum(), [a, b])
    c = leaf(rng, 3)
    d = leaf(rng, 3)
    w = ad.Tensor(rng.standard_normal((3, 2)))
    fd_check(lambda: (ad.stack([c, d], axis=1) * w).sum(), [c, d])


def test_pad2d_gradient():
    rng = np.random.default_rng(15)
    x = leaf(rng, 2, 3, 3)
    w = ad.Tensor(rng.standard_normal((2, 5, 5)))
    fd_check(lambda: (ad.pad2d(x, 1) * w).sum(), [x])


def test_take_flat_and_gather_rows_gradients():
    rng = np.random.default_rng(16)
    x = leaf(rng, 4, 5)
    idx = rng.integers(0, 20, size=(3, 4))
    w1 = ad.Tensor(rng.standard_normal((3, 4)))
    fd_check(lambda: (ad.take_flat(x, idx) * w1).sum(), [x])
    table = leaf(rng, 6, 4)
    ids = np.array([1, 3, 3, 0])
    w2 = ad.Tensor(rng.standard_normal((4, 4)))
    fd_check(lambda: (ad.gather_rows(table, ids) * w2).sum(), [table])


def test_mean_sum_axis_gradients():
    rng = np.random.default_rng(17)
    x = leaf(rng, 3, 4, 2)
    fd_check(lambda: x.mean(axis=(0, 2)).sum(), [x])
    fd_check(lambda: x.sum(axis=1, keepdims=True).mean(), [x])


def test_inverse_sigmoid_roundtrip_and_gradient():
    rng = np.random.default_rng(18)
    x = ad.Tensor(rng.uniform(0.05, 0.95, size=5), requires_grad=True)
    out = ad.sigmoid(ad.inverse_sigmoid(x))
    np.testing.assert_allclose(out.data, x.data, atol=1e-9)
    fd_check(lambda: ad.inverse_sigmoid(x).sum(), [x])


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = ad.Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        w = ad.Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        y = ad.softmax(x @ w, axis=1)
        loss = ad.gelu(y * 3.0).sum()
        ad.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gw1, gw2)
