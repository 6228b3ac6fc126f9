"""Image-to-latent encoder and its training stage against a frozen 3D decoder.

A small stride-2 convolutional backbone produces a global feature vector.
Feature maps from selected backbone blocks ("taps") are reduced by 1x1
convolutions, flattened and passed through dense layers; the global branch
and tap branches are concatenated and mapped to the latent code by a final
dense layer. Every dense layer is preceded by dropout and, except the last,
followed by ReLU. The backbone is trained from scratch together with the
fusion head.
"""

from __future__ import annotations

import hashlib

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .checkpoint import load_container, save_container
from .errors import EmptyDataset, ShapeMismatch
from .layers import Dense, dropout_backward, dropout_forward, glorot_uniform, l1_loss, relu_backward, relu_forward
from .synth import GrayImage
from .training import fit


class Encoder2DConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: tuple[int, int] = (64, 64)  # (height, width)
    widths: list[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    strides: list[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    kernel_size: int = Field(3, ge=1)
    taps: list[int] = Field(default_factory=lambda: [0, 1])
    tap_channels: int = Field(4, ge=1)
    branch_dim: int = Field(64, ge=1)
    global_dim: int = Field(128, ge=1)
    latent_size: int = Field(16, ge=1)
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.01, gt=0)
    lr_decay: float = Field(0.98, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    dropout: float = 0.25
    seed: int = 0

    @field_validator("dropout")
    @classmethod
    def _check_dropout(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return v

    @model_validator(mode="after")
    def _check_layout(self):
        if len(self.strides) != len(self.widths) or not self.widths:
            raise ValueError("widths and strides must be non-empty and of equal length")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be >= 1")
        if sorted(set(self.taps)) != list(self.taps) or any(not 0 <= t < len(self.widths) for t in self.taps):
            raise ValueError(f"taps must be increasing block indices in [0, {len(self.widths) - 1}]")
        return self


# 2D convolution ----------------------------------------------------------------


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """``(B, C, H, W)`` -> patches ``(B, Ho, Wo, C*k*k)`` (channel-major, then kernel row, column)."""
    b, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, ho, wo, c * k * k)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to ``shape``."""
    b, c, h, w = shape
    ho, wo = cols.shape[1:3]
    cols = cols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


class Conv2D:
    """Cross-correlation with zero padding; weight ``(Cout, Cin, k, k)``."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None, weight=None, bias=None):
        k = kernel_size
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if weight is None:
            rng = np.random.default_rng(0) if rng is None else rng
            weight = glorot_uniform(rng, (out_channels, in_channels, k, k), in_channels * k * k)
        if bias is None:
            bias = np.zeros(out_channels)
        self.params = {"weight": np.asarray(weight, dtype=np.float64), "bias": np.asarray(bias, dtype=np.float64)}
        self.grads = {n: np.zeros_like(v) for n, v in self.params.items()}
        self.stride = stride
        self.padding = padding
        self.kernel_size = k
        self.in_channels = in_channels
        self.out_channels = out_channels

    def output_shape(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return _out_size(h, k, s, p), _out_size(w, k, s, p)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected (B, {self.in_channels}, H, W) input, got {x.shape}")
        cols = im2col(x, self.kernel_size, self.stride, self.padding)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.params["bias"]
        self._cache = (cols, x.shape)
        return y.transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, shape = self._cache
        dy = np.asarray(dy).transpose(0, 2, 3, 1)
        if dy.shape[:3] != cols.shape[:3] or dy.shape[3] != self.out_channels:
            raise ShapeMismatch(f"upstream gradient shape {dy.shape}")
        flat_dy = dy.reshape(-1, self.out_channels)
        self.grads["weight"] = (flat_dy.T @ cols.reshape(-1, cols.shape[-1])).reshape(self.params["weight"].shape)
        self.grads["bias"] = flat_dy.sum(axis=0)
        dcols = dy @ self.params["weight"].reshape(self.out_channels, -1)
        return col2im(dcols, shape, self.kernel_size, self.stride, self.padding)


def conv2d_forward(block: Conv2D, x):
    return block.forward(x)


def conv2d_backward(block: Conv2D, x, upstream):
    """Return ``(grad_x, grad_w, grad_b)``."""
    block.forward(x)
    dx = block.backward(upstream)
    return dx, block.grads["weight"], block.grads["bias"]


# model -------------------------------------------------------------------------


class Encoder2DModel:
    def __init__(self, config: Encoder2DConfig, pixel_mean=0.0, pixel_scale=1.0, latent_mean=None):
        self.config = config
        self.pixel_mean = float(pixel_mean)
        self.pixel_scale = float(pixel_scale)
        rng = np.random.default_rng(config.seed)
        k = config.kernel_size
        h, w = config.image_size
        self.blocks = []
        shapes = []
        cin = 1
        for width, stride in zip(config.widths, config.strides):
            conv = Conv2D(cin, width, k, stride, k // 2, rng=rng)
            h, w = conv.output_shape(h, w)
            if h < 1 or w < 1:
                raise ShapeMismatch(f"image size {config.image_size} too small for the backbone")
            self.blocks.append(conv)
            shapes.append((width, h, w))
            cin = width
        c, h, w = shapes[-1]
        self.backbone_fc = Dense(c * h * w, config.global_dim, rng=rng)
        self.global_fc = Dense(config.global_dim, config.branch_dim, rng=rng)
        self.reducers, self.tap_fcs = [], []
        for t in config.taps:
            c, h, w = shapes[t]
            self.reducers.append(Conv2D(c, config.tap_channels, 1, 1, 0, rng=rng))
            self.tap_fcs.append(Dense(config.tap_channels * h * w, config.branch_dim, rng=rng))
        self.head = Dense(config.branch_dim * (1 + len(config.taps)), config.latent_size, rng=rng)
        if latent_mean is not None:
            self.head.params["bias"][...] = latent_mean

    def _named_layers(self):
        for i, layer in enumerate(self.blocks):
            yield f"block{i}", layer
        yield "backbone_fc", self.backbone_fc
        yield "global_fc", self.global_fc
        for i, (r, d) in enumerate(zip(self.reducers, self.tap_fcs)):
            yield f"tap{i}_reduce", r
            yield f"tap{i}_fc", d
        yield "head", self.head

    @property
    def params(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self._named_layers() for k, v in layer.params.items()}

    def grads(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self._named_layers() for k, v in layer.grads.items()}

    def load_params(self, params: dict) -> None:
        own = self.params
        for k, v in params.items():
            if own[k].shape != np.shape(v):
                raise ShapeMismatch(f"parameter {k}: {np.shape(v)} vs {own[k].shape}")
            own[k][...] = v

    def prepare(self, images):
        """Stack images into a normalised ``(B, 1, H, W)`` batch."""
        if isinstance(images, GrayImage):
            images = [images]
        arr = np.asarray([im.pixels if isinstance(im, GrayImage) else im for im in images], dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != tuple(self.config.image_size):
            raise ShapeMismatch(f"image size {arr.shape[1:]} does not match {tuple(self.config.image_size)}")
        return ((arr - self.pixel_mean) / self.pixel_scale)[:, None]

    def _dense(self, layer, x, rng, training, relu=True):
        x, mask = dropout_forward(x, self.config.dropout, rng, training)
        pre = layer.forward(x)
        self._trace.append((layer, mask, pre if relu else None))
        return relu_forward(pre) if relu else pre

    def forward(self, x, training=False, rng=None):
        """Latents for a prepared batch; dropout only when ``training``."""
        self._trace = []
        self._block_pre = []
        taps = []
        h = x
        for i, conv in enumerate(self.blocks):
            pre = conv.forward(h)
            self._block_pre.append(pre)
            h = relu_forward(pre)
            if i in self.config.taps:
                taps.append(h)
        b = h.shape[0]
        g = self._dense(self.backbone_fc, h.reshape(b, -1), rng, training)
        branches = [self._dense(self.global_fc, g, rng, training)]
        self._tap_shapes = []
        for t, reducer, fc in zip(taps, self.reducers, self.tap_fcs):
            r = reducer.forward(t)
            self._tap_shapes.append(r.shape)
            branches.append(self._dense(fc, r.reshape(b, -1), rng, training))
        self._branch_dim = branches[0].shape[1]
        return self._dense(self.head, np.concatenate(branches, axis=1), rng, training, relu=False)

    def _dense_back(self, index, dy):
        layer, mask, pre = self._trace[index]
        if pre is not None:
            dy = relu_backward(pre, dy)
        return dropout_backward(mask, layer.backward(dy))

    def backward(self, dz):
        """Back-propagate ``dL/dlatent``; fills ``grads()`` and returns ``dL/dx``."""
        n_taps = len(self.reducers)
        dcat = self._dense_back(2 + n_taps, dz)
        d = self._branch_dim
        dtaps = {}
        for i in range(n_taps - 1, -1, -1):
            dflat = self._dense_back(2 + i, dcat[:, (i + 1) * d:(i + 2) * d])
            dtaps[self.config.taps[i]] = self.reducers[i].backward(dflat.reshape(self._tap_shapes[i]))
        dg = self._dense_back(1, dcat[:, :d])
        dh = self._dense_back(0, dg).reshape(self._block_pre[-1].shape)
        for i in range(len(self.blocks) - 1, -1, -1):
            if i in dtaps:
                dh = dh + dtaps[i]
            dh = self.blocks[i].backward(relu_backward(self._block_pre[i], dh))
        return dh

    def encode(self, images, batch=64):
        x = self.prepare(images)
        return np.concatenate([self.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


def build_encoder2d(config: Encoder2DConfig, **kwargs) -> Encoder2DModel:
    return Encoder2DModel(config, **kwargs)


def encode2d(model: Encoder2DModel, image) -> np.ndarray:
    """Latent for one image (inference mode, no randomness)."""
    return model.encode(image)[0]


def reconstruct_from_image(encoder: Encoder2DModel, decoder, image) -> np.ndarray:
    if encoder.config.latent_size != decoder.config.latent_size:
        raise ShapeMismatch(
            f"2D encoder latent size {encoder.config.latent_size} != decoder latent size {decoder.config.latent_size}"
        )
    return decoder.decode(encode2d(encoder, image))


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def constant_latent_error(train_latents, latents) -> float:
    """L1 of predicting the mean training latent for every sample."""
    mean = np.asarray(train_latents).mean(axis=0)
    return float(np.abs(np.asarray(latents) - mean).mean())


def train_stage2(train_images, train_latents, val_images, val_shapes, config: Encoder2DConfig, frozen_decoder, *,
                 state=None, stop_after=None, deterministic=True, on_epoch=None):
    """Fit the 2D encoder to precomputed target latents with an L1 loss.

    Only the 2D encoder is optimised; ``frozen_decoder`` (an autoencoder) is
    used solely to score validation reconstructions in millimetres.
    Returns ``(model, history, state)`` with the best-validation parameters.
    """
    from .autoencoder import mean_euclidean_error

    train_latents = np.asarray(train_latents, dtype=np.float64)
    val_shapes = np.asarray(val_shapes, dtype=np.float64)
    if len(train_images) == 0 or len(train_latents) == 0:
        raise EmptyDataset("no training pairs")
    if len(val_images) == 0:
        raise EmptyDataset("no validation pairs")
    if len(train_images) != len(train_latents):
        raise ShapeMismatch("image and latent counts differ")
    if train_latents.shape[1] != config.latent_size or frozen_decoder.config.latent_size != config.latent_size:
        raise ShapeMismatch("latent sizes of targets, decoder and 2D encoder must agree")
    probe = Encoder2DModel(config)
    raw = probe.prepare(train_images)[:, 0]
    mean = float(raw.mean())
    scale = float(raw.std()) or 1.0
    model = Encoder2DModel(config, mean, scale, train_latents.mean(axis=0))
    x = model.prepare(train_images)
    xv = model.prepare(val_images)

    def step(idx, rng):
        z = model.forward(x[idx], training=True, rng=rng)
        loss, grad = l1_loss(z, train_latents[idx])
        model.backward(grad)
        return loss, model.grads()

    def validate():
        z = np.concatenate([model.forward(xv[i:i + 64]) for i in range(0, len(xv), 64)])
        return mean_euclidean_error(frozen_decoder.decode(z), val_shapes)

    state = fit(model.params, len(x), step, validate, epochs=config.epochs, batch_size=config.batch_size,
                lr=config.lr, lr_decay=config.lr_decay, momentum=config.momentum,
                weight_decay=config.weight_decay, seed=config.seed, state=state, stop_after=stop_after,
                deterministic=deterministic, on_epoch=on_epoch)
    best = Encoder2DModel(config, mean, scale)
    best.load_params(state.best_params)
    return best, state.history, state


# persistence -------------------------------------------------------------------


def encoder2d_container(model: Encoder2DModel, extra_meta=None, extra_tensors=None):
    meta = {"kind": "encoder2d", "config": model.config.model_dump(mode="json"),
            "pixel_mean": model.pixel_mean, "pixel_scale": model.pixel_scale}
    meta.update(extra_meta or {})
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    tensors.update(extra_tensors or {})
    return meta, tensors


def save_encoder2d(path, model: Encoder2DModel, extra_meta=None, extra_tensors=None) -> None:
    save_container(path, *encoder2d_container(model, extra_meta, extra_tensors))


def encoder2d_from_container(meta, tensors) -> Encoder2DModel:
    model = Encoder2DModel(Encoder2DConfig(**meta["config"]), meta["pixel_mean"], meta["pixel_scale"])
    model.load_params({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return model


def load_encoder2d(path) -> Encoder2DModel:
    return encoder2d_from_container(*load_container(path))
