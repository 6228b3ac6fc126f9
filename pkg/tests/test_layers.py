import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, random_mesh, rel_error
from mgcn.errors import InvalidProbability, ShapeMismatch
from mgcn.layers import (
    ChebConv,
    Dense,
    SgdState,
    cheb_conv_backward,
    chebyshev_basis,
    dense_backward,
    dropout_backward,
    dropout_forward,
    l1_loss,
    lr_schedule,
    relu_backward,
    relu_forward,
    sgd_step,
)
from mgcn.mesh import icosphere, mesh_laplacian


def spectral_oracle(scaled, weight, bias, x):
    """Filter in the eigenbasis: U (sum_k w_k T_k(Lambda~)) U^T x with T_k(t) = cos(k arccos t)."""
    lam, u = np.linalg.eigh(scaled.toarray())
    theta = np.arccos(np.clip(lam, -1.0, 1.0))
    xs = u.T @ x
    y = np.zeros((x.shape[0], weight.shape[2]))
    for k in range(weight.shape[0]):
        tk = np.cos(k * theta)
        y += u @ ((tk[:, None] * xs) @ weight[k])
    return y + bias


def random_cheb(rng, max_vertices=50, max_order=10):
    mesh = random_mesh(rng, max_vertices)
    lap = mesh_laplacian(mesh)
    order = int(rng.integers(0, max_order + 1))
    fin, fout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    layer = ChebConv(lap, fin, fout, order, rng=rng)
    layer.params["bias"][:] = rng.normal(size=fout)
    return layer, rng.normal(size=(mesh.n_vertices, fin))


def test_cheb_identity_and_first_order():
    lap = mesh_laplacian(icosphere(1))
    x = np.random.default_rng(0).normal(size=(lap.size, 1))
    layer = ChebConv(lap, 1, 1, 0, weight=np.ones((1, 1, 1)))
    np.testing.assert_array_equal(layer.forward(x), x)
    w = np.zeros((2, 1, 1))
    w[1] = 1
    layer = ChebConv(lap, 1, 1, 1, weight=w)
    np.testing.assert_allclose(layer.forward(x), lap.scaled @ x, rtol=0, atol=1e-15)


def test_chebyshev_t2_recurrence():
    lap = mesh_laplacian(icosphere(2)).scaled
    x = np.random.default_rng(1).normal(size=(lap.shape[0], 2))
    t2 = chebyshev_basis(lap, x, 2)[2]
    dense = lap.toarray()
    np.testing.assert_allclose(t2, (2 * dense @ dense - np.eye(len(dense))) @ x, atol=1e-10, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cheb_matches_spectral_oracle(seed):
    rng = np.random.default_rng(seed)
    layer, x = random_cheb(rng)
    y = layer.forward(x)
    ref = spectral_oracle(layer.lap, layer.params["weight"], layer.params["bias"], x)
    assert rel_error(y, ref) <= 1e-8


def test_cheb_batched_equals_loop(rng):
    layer, _ = random_cheb(rng)
    xs = rng.normal(size=(4, layer.n_vertices, layer.in_channels))
    batched = layer.forward(xs)
    for b in range(4):
        np.testing.assert_allclose(batched[b], layer.forward(xs[b]), atol=1e-13, rtol=0)


def test_cheb_shape_mismatch(rng):
    layer, x = random_cheb(rng)
    with pytest.raises(ShapeMismatch):
        layer.forward(np.zeros((x.shape[0] + 1, layer.in_channels)))


def test_cheb_backward_zero_upstream(rng):
    layer, x = random_cheb(rng)
    dx, dw, db = cheb_conv_backward(layer, x, np.zeros((x.shape[0], layer.out_channels)))
    assert not dx.any() and not dw.any() and not db.any()


def test_cheb_backward_order_zero():
    lap = mesh_laplacian(icosphere(1))
    layer = ChebConv(lap, 1, 1, 0, weight=np.full((1, 1, 1), 2.5))
    x = np.ones((lap.size, 1))
    up = np.random.default_rng(2).normal(size=(lap.size, 1))
    dx, _, _ = cheb_conv_backward(layer, x, up)
    np.testing.assert_allclose(dx, 2.5 * up)


@pytest.mark.parametrize("seed", range(20))
def test_cheb_gradients_finite_difference(seed):
    rng = np.random.default_rng(100 + seed)
    layer, x = random_cheb(rng, max_vertices=20, max_order=6)
    up = rng.normal(size=(x.shape[0], layer.out_channels))

    def f():
        return float((layer.forward(x) * up).sum())

    dx, dw, db = cheb_conv_backward(layer, x, up)
    dx, dw, db = dx.copy(), dw.copy(), db.copy()
    assert rel_error(dx, numeric_grad(f, x)) <= 1e-4
    assert rel_error(dw, numeric_grad(f, layer.params["weight"])) <= 1e-4
    assert rel_error(db, numeric_grad(f, layer.params["bias"])) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_dense_gradients_finite_difference(seed):
    rng = np.random.default_rng(200 + seed)
    fin, fout = rng.integers(1, 8, size=2)
    layer = Dense(fin, fout, rng=rng)
    layer.params["bias"][:] = rng.normal(size=fout)
    x = rng.normal(size=(int(rng.integers(1, 5)), fin))
    up = rng.normal(size=(x.shape[0], fout))

    def f():
        return float((layer.forward(x) * up).sum())

    dx, dw, db = dense_backward(layer, x, up)
    dx, dw, db = dx.copy(), dw.copy(), db.copy()
    assert rel_error(dx, numeric_grad(f, x)) <= 1e-4
    assert rel_error(dw, numeric_grad(f, layer.params["weight"])) <= 1e-4
    assert rel_error(db, numeric_grad(f, layer.params["bias"])) <= 1e-4


def test_relu():
    x = -np.arange(1.0, 6.0)
    assert not relu_forward(x).any()
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_backward(x, np.ones(3)), [0, 0, 1])


def test_relu_finite_difference(rng):
    x = rng.normal(size=50)
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    up = rng.normal(size=50)
    g = numeric_grad(lambda: float((relu_forward(x) * up).sum()), x)
    assert rel_error(relu_backward(x, up), g) <= 1e-4


def test_dropout():
    x = np.random.default_rng(0).normal(size=(100, 10))
    y, mask = dropout_forward(x, 0.0, 1, training=True)
    assert y is x and mask is None
    y, mask = dropout_forward(x, 0.25, 1, training=False)
    assert y is x
    y, mask = dropout_forward(x, 0.25, 1, training=True)
    kept = mask != 0
    np.testing.assert_allclose(y[kept], x[kept] / 0.75)
    assert not y[~kept].any()
    assert 0.2 < 1 - kept.mean() < 0.3
    np.testing.assert_array_equal(dropout_backward(mask, np.ones_like(x)), mask)
    y2, _ = dropout_forward(x, 0.25, 1, training=True)
    np.testing.assert_array_equal(y, y2)
    with pytest.raises(InvalidProbability):
        dropout_forward(x, 1.0, 1)


def test_dropout_finite_difference(rng):
    x = rng.normal(size=(6, 5))
    up = rng.normal(size=x.shape)
    _, mask = dropout_forward(x, 0.3, 5)
    g = numeric_grad(lambda: float((dropout_forward(x, 0.3, 5)[0] * up).sum()), x)
    assert rel_error(dropout_backward(mask, up), g) <= 1e-4


def test_l1_loss_examples():
    x = np.arange(6.0).reshape(2, 3)
    loss, grad = l1_loss(x, x)
    assert loss == 0 and not grad.any()
    loss, grad = l1_loss(np.array([1.0, -1.0]), np.zeros(2))
    assert loss == 1.0
    np.testing.assert_array_equal(grad, [0.5, -0.5])
    with pytest.raises(ShapeMismatch):
        l1_loss(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("seed", range(20))
def test_l1_finite_difference(seed):
    rng = np.random.default_rng(300 + seed)
    p, t = rng.normal(size=(2, 7, 3))
    _, grad = l1_loss(p, t)
    g = numeric_grad(lambda: l1_loss(p, t)[0], p)
    assert np.abs(grad - g).max() <= 1e-6


def test_sgd_identity_on_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = SgdState(0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(state, params, {"w": np.zeros(2)})
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_sgd_plain_step():
    params = {"w": np.array([1.0, -2.0])}
    g = np.array([0.5, 0.25])
    sgd_step(SgdState(0.1, momentum=0.0, weight_decay=0.0), params, {"w": g})
    np.testing.assert_array_equal(params["w"], np.array([1.0, -2.0]) - 0.1 * g)


def test_sgd_momentum_two_steps():
    # scripted unrolled recurrence: v1 = g, v2 = mu g + g, displacement = lr (v1 + v2)
    lr, mu, g = 0.01, 0.9, np.array([1.0, -3.0])
    v, theta = np.zeros(2), np.zeros(2)
    for _ in range(2):
        v = mu * v + g
        theta = theta - lr * v
    params = {"w": np.zeros(2)}
    state = SgdState(lr, momentum=mu)
    for _ in range(2):
        sgd_step(state, params, {"w": g})
    np.testing.assert_allclose(params["w"], theta, rtol=1e-15)
    np.testing.assert_allclose(-params["w"], lr * g * (1 + 1.9), rtol=1e-12)


def test_sgd_weight_decay():
    params = {"w": np.array([2.0])}
    sgd_step(SgdState(0.1, momentum=0.0, weight_decay=0.5), params, {"w": np.array([0.0])})
    np.testing.assert_allclose(params["w"], [2.0 - 0.1 * 0.5 * 2.0])
    with pytest.raises(ShapeMismatch):
        sgd_step(SgdState(0.1), params, {"w": np.zeros(2)})


def test_lr_schedule():
    assert lr_schedule(0, 0.008, 0.98) == 0.008
    assert lr_schedule(1, 0.008, 0.98) == pytest.approx(0.00784, rel=1e-15)
    assert lr_schedule(17, 0.01, 1.0) == 0.01
