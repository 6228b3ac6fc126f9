"""Spectral graph-convolutional mesh autoencoder and its training stage.

Encoder: ``L`` ChebConv + ReLU + down-sampling stages, then a dense layer to
the latent code. Decoder: a dense layer back to the coarsest level, ``L``
up-sampling + ChebConv + ReLU stages, and a final linear ChebConv producing
``N x 3`` coordinates. With the default ``encoder_levels=5`` that is five
encoder layers (4 convolutions + dense) and six decoder layers.
"""

from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .checkpoint import load_container, pack_sparse, save_container, unpack_sparse
from .errors import ConfigMismatch, EmptyDataset, ShapeMismatch
from .layers import ChebConv, Dense, l1_loss, relu_backward, relu_forward
from .mesh import ScaledLaplacian, TriangleMesh
from .sampling import MeshHierarchy, hierarchy_from_parts
from .training import TrainHistory, TrainState, fit


class AutoencoderConfig(BaseModel):
    """Architecture and stage-1 training recipe.

    ``encoder_levels`` counts mesh resolutions seen by the encoder, so the
    number of down-sampling ChebConv layers (and the required hierarchy
    depth) is ``encoder_levels - 1``; ``channels`` lists their widths.
    """

    model_config = ConfigDict(extra="forbid")

    latent_size: int = Field(64, ge=1)
    cheb_order: int = Field(9, ge=0)
    sampling_factor: int = Field(4, ge=2)
    encoder_levels: int = Field(5, ge=2)
    channels: list[int] = Field(default_factory=lambda: [16, 32, 32, 64])
    latent_relu: bool = True
    epochs: int = Field(300, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.008, gt=0)
    lr_decay: float = Field(0.98, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0005, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_channels(self):
        if len(self.channels) != self.encoder_levels - 1:
            raise ValueError(
                f"channels has {len(self.channels)} entries, expected encoder_levels - 1 = {self.encoder_levels - 1}"
            )
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be positive")
        return self

    @property
    def depth(self) -> int:
        return self.encoder_levels - 1


def _apply_sparse(mat, x):
    """Multiply every channel column of a ``(B, N, C)`` batch by a sparse matrix."""
    b, n, c = x.shape
    out = mat @ x.transpose(1, 0, 2).reshape(n, b * c)
    return out.reshape(-1, b, c).transpose(1, 0, 2)


def mean_euclidean_error(pred, truth) -> float:
    """Mean over vertices (and samples) of the per-vertex Euclidean distance."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    return float(np.linalg.norm(pred - truth, axis=-1).mean())


class AutoencoderModel:
    def __init__(self, config: AutoencoderConfig, hierarchy: MeshHierarchy, mean_shape=None, scale=1.0):
        if hierarchy.depth < config.depth:
            raise ConfigMismatch(
                f"hierarchy depth {hierarchy.depth} < {config.depth} sampling stages for encoder_levels={config.encoder_levels}"
            )
        self.config = config
        self.hierarchy = hierarchy
        n0 = hierarchy.levels[0].n_vertices
        self.mean_shape = np.zeros((n0, 3)) if mean_shape is None else np.asarray(mean_shape, dtype=np.float64)
        self.scale = float(scale)
        rng = np.random.default_rng(config.seed)
        K, ch, depth = config.cheb_order, config.channels, config.depth
        laps = hierarchy.laplacians
        self.enc_convs = [ChebConv(laps[i], 3 if i == 0 else ch[i - 1], ch[i], K, rng=rng) for i in range(depth)]
        self.coarse_n = hierarchy.levels[depth].n_vertices
        flat = self.coarse_n * ch[-1]
        self.enc_dense = Dense(flat, config.latent_size, rng=rng)
        self.dec_dense = Dense(config.latent_size, flat, rng=rng)
        self.dec_convs = [ChebConv(laps[i], ch[i], ch[i - 1] if i > 0 else ch[0], K, rng=rng)
                          for i in range(depth - 1, -1, -1)]
        self.final_conv = ChebConv(laps[0], ch[0], 3, K, rng=rng)
        self.q_down = [p.q_down for p in hierarchy.pairs[:depth]]
        self.q_up = [p.q_up for p in hierarchy.pairs[:depth]]

    # parameters ---------------------------------------------------------

    def _named_layers(self):
        for i, layer in enumerate(self.enc_convs):
            yield f"enc_conv{i}", layer
        yield "enc_dense", self.enc_dense
        yield "dec_dense", self.dec_dense
        for i, layer in enumerate(self.dec_convs):
            yield f"dec_conv{i}", layer
        yield "final_conv", self.final_conv

    @property
    def params(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self._named_layers() for k, v in layer.params.items()}

    def grads(self) -> dict:
        return {f"{n}.{k}": v for n, layer in self._named_layers() for k, v in layer.grads.items()}

    def encoder_params(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("enc_")}

    def load_params(self, params: dict) -> None:
        own = self.params
        for k, v in params.items():
            if own[k].shape != np.shape(v):
                raise ShapeMismatch(f"parameter {k}: {np.shape(v)} vs {own[k].shape}")
            own[k][...] = v

    # normalisation --------------------------------------------------------

    def normalize(self, vertices):
        return (np.asarray(vertices, dtype=np.float64) - self.mean_shape) / self.scale

    def denormalize(self, x):
        return x * self.scale + self.mean_shape

    # forward / backward in normalised units -----------------------------------

    def encode_normalized(self, x):
        self._enc_cache = []
        h = x
        for conv, qd in zip(self.enc_convs, self.q_down):
            pre = conv.forward(h)
            self._enc_cache.append(pre)
            h = _apply_sparse(qd, relu_forward(pre))
        b = h.shape[0]
        self._enc_flat_shape = h.shape
        z = self.enc_dense.forward(h.reshape(b, -1))
        self._z_pre = z
        return relu_forward(z) if self.config.latent_relu else z

    def decode_normalized(self, z):
        b = z.shape[0]
        pre = self.dec_dense.forward(z)
        self._dec_dense_pre = pre
        h = relu_forward(pre).reshape(b, self.coarse_n, self.config.channels[-1])
        self._dec_cache = []
        for conv, qu in zip(self.dec_convs, reversed(self.q_up)):
            up = _apply_sparse(qu, h)
            pre = conv.forward(up)
            self._dec_cache.append(pre)
            h = relu_forward(pre)
        return self.final_conv.forward(h)

    def forward(self, x):
        return self.decode_normalized(self.encode_normalized(x))

    def backward_decoder(self, dout):
        g = self.final_conv.backward(dout)
        for conv, qu, pre in zip(reversed(self.dec_convs), self.q_up, reversed(self._dec_cache)):
            g = conv.backward(relu_backward(pre, g))
            g = _apply_sparse(qu.T.tocsr(), g)
        g = relu_backward(self._dec_dense_pre, g.reshape(g.shape[0], -1))
        return self.dec_dense.backward(g)

    def backward_encoder(self, dz):
        if self.config.latent_relu:
            dz = relu_backward(self._z_pre, dz)
        g = self.enc_dense.backward(dz).reshape(self._enc_flat_shape)
        for conv, qd, pre in zip(reversed(self.enc_convs), reversed(self.q_down), reversed(self._enc_cache)):
            g = _apply_sparse(qd.T.tocsr(), g)
            g = conv.backward(relu_backward(pre, g))
        return g

    def backward(self, dout):
        return self.backward_encoder(self.backward_decoder(dout))

    # public API in millimetres --------------------------------------------------

    def _check_vertices(self, v):
        v = np.asarray(v, dtype=np.float64)
        squeeze = v.ndim == 2
        v = v[None] if squeeze else v
        if v.shape[1:] != self.mean_shape.shape:
            raise ShapeMismatch(f"expected (N, 3) with N={self.mean_shape.shape[0]}, got {v.shape[1:]}")
        return v, squeeze

    def encode(self, vertices):
        v, squeeze = self._check_vertices(vertices)
        z = self.encode_normalized(self.normalize(v))
        return z[0] if squeeze else z

    def decode(self, latent):
        z = np.asarray(latent, dtype=np.float64)
        squeeze = z.ndim == 1
        z = z[None] if squeeze else z
        if z.shape[-1] != self.config.latent_size:
            raise ShapeMismatch(f"latent size {z.shape[-1]} != {self.config.latent_size}")
        out = self.denormalize(self.decode_normalized(z))
        return out[0] if squeeze else out

    def reconstruct(self, vertices, batch=64):
        v, squeeze = self._check_vertices(vertices)
        out = np.concatenate([self.decode(self.encode(v[i:i + batch])) for i in range(0, len(v), batch)])
        return out[0] if squeeze else out


# convenience functional forms


def build_model(config: AutoencoderConfig, hierarchy: MeshHierarchy, mean_shape=None, scale=1.0) -> AutoencoderModel:
    return AutoencoderModel(config, hierarchy, mean_shape, scale)


def encode3d(model: AutoencoderModel, vertices):
    return model.encode(vertices)


def decode(model: AutoencoderModel, latent):
    return model.decode(latent)


def dataset_mean_error(shapes, mean_shape) -> float:
    """MEE of predicting ``mean_shape`` for every sample (the baseline)."""
    shapes = np.asarray(shapes, dtype=np.float64)
    return mean_euclidean_error(np.broadcast_to(mean_shape, shapes.shape), shapes)


NORMALISED_STD = 10.0


def normalisation(train):
    """Mean shape and the global factor giving centred coordinates a std of ``NORMALISED_STD``."""
    mean = train.mean(axis=0)
    spread = float((train - mean).std())
    return mean, (spread / NORMALISED_STD if spread > 0 else 1.0)


def train_stage1(train, val, config: AutoencoderConfig, hierarchy: MeshHierarchy, *, state=None,
                 stop_after=None, deterministic=True, on_epoch=None):
    """Train the autoencoder with an L1 reconstruction loss.

    Returns ``(model, history, state)``; ``model`` carries the parameters of
    the epoch with the lowest validation MEE.
    """
    train = np.asarray(train, dtype=np.float64)
    val = np.asarray(val, dtype=np.float64)
    if len(train) == 0:
        raise EmptyDataset("no training shapes")
    if len(val) == 0:
        raise EmptyDataset("no validation shapes")
    if train.shape[1:] != (hierarchy.levels[0].n_vertices, 3):
        raise ShapeMismatch(f"training shapes {train.shape[1:]} do not match the hierarchy's finest level")
    mean, scale = normalisation(train)
    model = AutoencoderModel(config, hierarchy, mean, scale)
    xn = model.normalize(train)

    def step(idx, rng):
        batch = xn[idx]
        out = model.forward(batch)
        loss, grad = l1_loss(out, batch)
        model.backward(grad)
        return loss, model.grads()

    def validate():
        return mean_euclidean_error(model.reconstruct(val), val)

    state = fit(model.params, len(train), step, validate, epochs=config.epochs, batch_size=config.batch_size,
                lr=config.lr, lr_decay=config.lr_decay, momentum=config.momentum,
                weight_decay=config.weight_decay, seed=config.seed, state=state, stop_after=stop_after,
                deterministic=deterministic, on_epoch=on_epoch)
    best = AutoencoderModel(config, hierarchy, mean, scale)
    best.load_params(state.best_params)
    return best, state.history, state


# persistence --------------------------------------------------------------------


def hierarchy_tensors(hierarchy: MeshHierarchy, tensors: dict, prefix="hierarchy") -> dict:
    meta = {"sizes": hierarchy.sizes, "lambda_max": [l.lambda_max for l in hierarchy.laplacians],
            "landmarks": [[list(x) for x in m.landmarks] for m in hierarchy.levels]}
    for k, mesh in enumerate(hierarchy.levels):
        tensors[f"{prefix}.level{k}.vertices"] = mesh.vertices
        tensors[f"{prefix}.level{k}.faces"] = mesh.faces
        pack_sparse(f"{prefix}.level{k}.laplacian", hierarchy.laplacians[k].laplacian, tensors)
        pack_sparse(f"{prefix}.level{k}.scaled", hierarchy.laplacians[k].scaled, tensors)
    for k, pair in enumerate(hierarchy.pairs):
        pack_sparse(f"{prefix}.pair{k}.q_down", pair.q_down, tensors)
        pack_sparse(f"{prefix}.pair{k}.q_up", pair.q_up, tensors)
    return meta


def hierarchy_from_tensors(meta: dict, tensors: dict, prefix="hierarchy") -> MeshHierarchy:
    levels, laps = [], []
    for k in range(len(meta["sizes"])):
        levels.append(TriangleMesh(tensors[f"{prefix}.level{k}.vertices"], tensors[f"{prefix}.level{k}.faces"],
                                   [tuple(x) for x in meta["landmarks"][k]]))
        laps.append(ScaledLaplacian(unpack_sparse(f"{prefix}.level{k}.laplacian", tensors), meta["lambda_max"][k],
                                    unpack_sparse(f"{prefix}.level{k}.scaled", tensors)))
    qd = [unpack_sparse(f"{prefix}.pair{k}.q_down", tensors) for k in range(len(levels) - 1)]
    qu = [unpack_sparse(f"{prefix}.pair{k}.q_up", tensors) for k in range(len(levels) - 1)]
    return hierarchy_from_parts(levels, qd, qu, laps)


def autoencoder_container(model: AutoencoderModel, extra_meta=None, extra_tensors=None):
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    tensors["norm.mean_shape"] = model.mean_shape
    meta = {
        "kind": "autoencoder3d",
        "config": model.config.model_dump(),
        "norm_scale": model.scale,
        "hierarchy": hierarchy_tensors(model.hierarchy, tensors),
    }
    meta.update(extra_meta or {})
    tensors.update(extra_tensors or {})
    return meta, tensors


def save_autoencoder(path, model: AutoencoderModel, extra_meta=None, extra_tensors=None) -> None:
    save_container(path, *autoencoder_container(model, extra_meta, extra_tensors))


def autoencoder_from_container(meta, tensors) -> AutoencoderModel:
    config = AutoencoderConfig(**meta["config"])
    hierarchy = hierarchy_from_tensors(meta["hierarchy"], tensors)
    model = AutoencoderModel(config, hierarchy, tensors["norm.mean_shape"], meta["norm_scale"])
    model.load_params({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return model


def load_autoencoder(path) -> AutoencoderModel:
    return autoencoder_from_container(*load_container(path))


def state_tensors(state: TrainState, tensors: dict) -> dict:
    """Flatten a resumable training state into container tensors + metadata."""
    for k, v in state.params.items():
        tensors[f"state.params.{k}"] = v
    for k, v in state.velocity.items():
        tensors[f"state.velocity.{k}"] = v
    for k, v in state.best_params.items():
        tensors[f"state.best.{k}"] = v
    return {"next_epoch": state.next_epoch, "best_val": state.best_val, "best_epoch": state.best_epoch,
            "history": state.history.to_json()}


def state_from_tensors(meta: dict, tensors: dict) -> TrainState:
    def group(prefix):
        return {k[len(prefix):]: v.copy() for k, v in tensors.items() if k.startswith(prefix)}

    return TrainState(meta["next_epoch"], group("state.params."), group("state.velocity."), group("state.best."),
                      meta["best_val"], meta["best_epoch"], TrainHistory.from_json(meta["history"]))


__all__ = [
    "AutoencoderConfig",
    "AutoencoderModel",
    "build_model",
    "encode3d",
    "decode",
    "train_stage1",
    "mean_euclidean_error",
    "dataset_mean_error",
    "save_autoencoder",
    "load_autoencoder",
]
