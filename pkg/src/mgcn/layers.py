"""Differentiable layers with hand-written gradients, plus SGD.

Activations are float64 arrays. Graph layers take ``(N, F)`` or batched
``(B, N, F)`` inputs. Every layer keeps its parameters in ``params`` and the
matching gradients of the last backward pass in ``grads`` (same keys).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidProbability, ShapeMismatch


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeMismatch(f"expected (N, F) or (B, N, F) input, got shape {x.shape}")


def _to_columns(x):
    # (B, N, F) -> (N, B*F) so one sparse product serves the whole batch
    b, n, f = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(n, b * f)


def _from_columns(c, b, f):
    n = c.shape[0]
    return c.reshape(n, b, f).transpose(1, 0, 2)


def chebyshev_basis(lap, x, order):
    """``[T_0(L) x, ..., T_K(L) x]`` by the three-term recurrence."""
    out = [x]
    if order >= 1:
        out.append(lap @ x)
    for _ in range(2, order + 1):
        out.append(2.0 * (lap @ out[-1]) - out[-2])
    return out


def chebyshev_sum(lap, coeffs):
    """``sum_k T_k(L) c_k`` by Clenshaw's recurrence (K + 1 sparse products)."""
    order = len(coeffs) - 1
    if order == 0:
        return coeffs[0].copy()
    b1 = np.zeros_like(coeffs[0])
    b2 = np.zeros_like(coeffs[0])
    for k in range(order, 0, -1):
        b1, b2 = coeffs[k] + 2.0 * (lap @ b1) - b2, b1
    return coeffs[0] + lap @ b1 - b2


def glorot_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ChebConv:
    """Chebyshev spectral graph convolution on a fixed mesh level.

    ``y[:, j] = sum_i sum_k w[k, i, j] T_k(L~) x[:, i] + b[j]``
    """

    def __init__(self, scaled_laplacian, in_channels, out_channels, order, rng=None, weight=None, bias=None):
        if order < 0:
            raise ValueError("Chebyshev order must be >= 0")
        self.lap = sp.csr_matrix(getattr(scaled_laplacian, "scaled", scaled_laplacian))
        self.order = int(order)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        if weight is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weight = glorot_uniform(rng, (order + 1, in_channels, out_channels), in_channels * (order + 1))
        if bias is None:
            bias = np.zeros(out_channels)
        self.params = {"weight": np.asarray(weight, dtype=np.float64), "bias": np.asarray(bias, dtype=np.float64)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if self.params["weight"].shape != (order + 1, in_channels, out_channels):
            raise ShapeMismatch(f"weight shape {self.params['weight'].shape}")

    @property
    def n_vertices(self):
        return self.lap.shape[0]

    def forward(self, x):
        xb, squeeze = _as_batch(x)
        b, n, f = xb.shape
        if n != self.n_vertices or f != self.in_channels:
            raise ShapeMismatch(f"input {xb.shape[1:]} does not match ({self.n_vertices}, {self.in_channels})")
        # basis[k] holds T_k(L~) x in vertex-major (N, B*F) layout
        basis = np.empty((self.order + 1, n, b * f))
        basis[0] = _to_columns(xb)
        if self.order >= 1:
            basis[1] = self.lap @ basis[0]
        for k in range(2, self.order + 1):
            np.subtract(2.0 * (self.lap @ basis[k - 1]), basis[k - 2], out=basis[k])
        w = self.params["weight"]
        rows = basis.reshape(self.order + 1, n * b, f)
        y = rows[0] @ w[0]
        for k in range(1, self.order + 1):
            y += rows[k] @ w[k]
        y += self.params["bias"]
        self._cache = (rows, b, n, squeeze)
        y = _from_columns(y.reshape(n, b * self.out_channels), b, self.out_channels)
        return y[0] if squeeze else y

    def backward(self, dy):
        rows, b, n, squeeze = self._cache
        dyb, _ = _as_batch(dy)
        if dyb.shape != (b, n, self.out_channels):
            raise ShapeMismatch(f"upstream gradient shape {dyb.shape}")
        k1, fin, fout = self.params["weight"].shape
        flat_dy = _to_columns(dyb).reshape(n * b, fout)
        w = self.params["weight"]
        self.grads["weight"] = np.stack([rows[k].T @ flat_dy for k in range(k1)])
        self.grads["bias"] = flat_dy.sum(axis=0)
        coeffs = [(flat_dy @ w[k].T).reshape(n, b * fin) for k in range(k1)]
        dx = _from_columns(chebyshev_sum(self.lap, coeffs), b, fin)
        return dx[0] if squeeze else dx


class Dense:
    """Affine map over the last axis."""

    def __init__(self, in_features, out_features, rng=None, weight=None, bias=None):
        if weight is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weight = glorot_uniform(rng, (in_features, out_features), in_features)
        if bias is None:
            bias = np.zeros(out_features)
        self.params = {"weight": np.asarray(weight, dtype=np.float64), "bias": np.asarray(bias, dtype=np.float64)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.params["weight"].shape[0]:
            raise ShapeMismatch(f"dense input width {x.shape[-1]} != {self.params['weight'].shape[0]}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        x = self._x
        fin, fout = self.params["weight"].shape
        if dy.shape != x.shape[:-1] + (fout,):
            raise ShapeMismatch(f"upstream gradient shape {dy.shape}")
        self.grads["weight"] = x.reshape(-1, fin).T @ dy.reshape(-1, fout)
        self.grads["bias"] = dy.reshape(-1, fout).sum(axis=0)
        return dy @ self.params["weight"].T


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    if np.shape(x) != np.shape(dy):
        raise ShapeMismatch("relu gradient shape mismatch")
    return np.where(x > 0, dy, 0.0)


def dropout_forward(x, p, rng=None, training=True):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is ``None`` when inactive."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = (rng.random(np.shape(x)) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, dy):
    if mask is None:
        return dy
    if mask.shape != np.shape(dy):
        raise ShapeMismatch("dropout gradient shape mismatch")
    return dy * mask


def l1_loss(pred, target):
    """Mean absolute error and its gradient (``sign(0) = 0``)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def lr_schedule(epoch: int, base: float, decay: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay**epoch


@dataclass
class SgdState:
    """SGD with momentum and coupled (L2) weight decay.

    ``v <- mu v + g + wd theta``; ``theta <- theta - lr v``.
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)


def sgd_step(state: SgdState, params: dict, grads: dict) -> dict:
    """Update ``params`` in place and return it."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ShapeMismatch(f"velocity for {name!r} has shape {v.shape}")
        v = state.momentum * v + g + state.weight_decay * theta
        state.velocity[name] = v
        theta -= state.learning_rate * v
    return params


# functional forms ---------------------------------------------------------


def cheb_conv_forward(layer: ChebConv, x):
    return layer.forward(x)


def cheb_conv_backward(layer: ChebConv, x, upstream):
    """Return ``(grad_x, grad_w, grad_b)`` for input ``x``."""
    layer.forward(x)
    dx = layer.backward(upstream)
    return dx, layer.grads["weight"], layer.grads["bias"]


def dense_forward(layer: Dense, x):
    return layer.forward(x)


def dense_backward(layer: Dense, x, upstream):
    layer.forward(x)
    dx = layer.backward(upstream)
    return dx, layer.grads["weight"], layer.grads["bias"]
