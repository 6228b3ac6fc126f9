"""Strict JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .autoencoder import AutoencoderConfig
from .encoder2d import Encoder2DConfig
from .synth import RenderConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HierarchySection(_Strict):
    base_mesh: str | None = None  # OBJ/PLY path; default is the toy icosphere
    base_level: int = Field(3, ge=0)
    base_radius: float = Field(50.0, gt=0)
    factor: int = Field(4, ge=2)
    depth: int = Field(1, ge=1)


class DataSection(_Strict):
    num_modes: int = Field(8, ge=0)
    vertex_rms: float = Field(2.0, gt=0)
    sigma_decay: float = Field(0.8, gt=0, le=1)
    train_count: int = Field(500, ge=1)
    val_count: int = Field(50, ge=1)
    model_seed: int
    train_seed: int
    val_seed: int

    @field_validator("val_seed")
    @classmethod
    def _disjoint(cls, v, info):
        if v == info.data.get("train_seed"):
            raise ValueError("validation seed must differ from the training seed")
        return v


class RenderSection(_Strict):
    width: int = Field(64, ge=8)
    height: int = Field(64, ge=8)
    focal: float = Field(140.0, gt=0)
    distance: float = Field(300.0, gt=0)
    light_direction: list[float] = Field(default_factory=lambda: [0.3, -0.4, -1.0])
    albedo: float = Field(0.9, gt=0, le=1)
    mode: str = "grayscale"

    def render_config(self) -> RenderConfig:
        light = np.asarray(self.light_direction, dtype=np.float64)
        return RenderConfig(width=self.width, height=self.height, focal=self.focal,
                            translation=[0.0, 0.0, self.distance], light_direction=light / np.linalg.norm(light),
                            albedo=self.albedo, mode=self.mode)


class EvalSection(_Strict):
    margin: float = Field(10.0, ge=0)
    cap: float = Field(5.0, gt=0)
    similarity: bool = False
    landmarks: list[str] | None = None


class RunConfig(_Strict):
    seed: int
    output_dir: str
    hierarchy: HierarchySection = Field(default_factory=HierarchySection)
    data: DataSection
    render: RenderSection = Field(default_factory=RenderSection)
    autoencoder: AutoencoderConfig
    encoder2d: Encoder2DConfig
    eval: EvalSection = Field(default_factory=EvalSection)

    @field_validator("encoder2d")
    @classmethod
    def _latent_sizes(cls, v, info):
        ae = info.data.get("autoencoder")
        if ae is not None and ae.latent_size != v.latent_size:
            raise ValueError(f"encoder2d latent_size {v.latent_size} != autoencoder latent_size {ae.latent_size}")
        return v

    @model_validator(mode="after")
    def _image_size(self):
        if tuple(self.encoder2d.image_size) != (self.render.height, self.render.width):
            raise ValueError(f"encoder2d image_size {tuple(self.encoder2d.image_size)} != rendered "
                             f"(height, width) {(self.render.height, self.render.width)}")
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration (raises on unknown keys)."""
    with open(path) as fh:
        data = json.load(fh)
    return RunConfig.model_validate(data)


def toy_config(output_dir: str, seed: int = 0) -> dict:
    """The small configuration used by the test suite and the README."""
    return {
        "seed": seed,
        "output_dir": output_dir,
        "hierarchy": {"factor": 4, "depth": 1},
        "data": {"num_modes": 8, "train_count": 500, "val_count": 50,
                 "model_seed": seed, "train_seed": seed + 1, "val_seed": seed + 2},
        "render": {"width": 64, "height": 64},
        "autoencoder": {"latent_size": 16, "cheb_order": 6, "encoder_levels": 2, "channels": [16],
                        "epochs": 100, "seed": seed},
        "encoder2d": {"image_size": [64, 64], "latent_size": 16, "epochs": 100, "seed": seed},
        "eval": {"margin": 10.0},
    }
