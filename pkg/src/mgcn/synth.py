"""Toy linear shape model, seeded shape sampling and a software rasterizer.

The shape model is mean + sum of orthonormal deformation modes scaled by
per-mode standard deviations. Renders use a pinhole camera in the OpenCV
convention (x right, y down, camera looking along +z), flat per-face normals,
a z-buffer, pixel centres at ``(j + 0.5, i + 0.5)`` and a top-left fill rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import os

import numpy as np

from .errors import BehindCamera, ParseError, RankDeficiency, ShapeMismatch
from .mesh import TriangleMesh, icosphere

TRUNCATION = 3.0
MAX_MODEL_TRIES = 10

# unit directions (x right, y up, z towards the camera) of named toy landmarks
LANDMARK_DIRECTIONS = {
    "nose_tip": (0.0, 0.0, 1.0),
    "right_eye": (-0.35, 0.3, 0.89),
    "left_eye": (0.35, 0.3, 0.89),
    "mouth_right": (-0.28, -0.42, 0.86),
    "mouth_left": (0.28, -0.42, 0.86),
    "chin": (0.0, -0.75, 0.66),
    "forehead": (0.0, 0.7, 0.71),
    "right_cheek": (-0.7, -0.1, 0.71),
    "left_cheek": (0.7, -0.1, 0.71),
}


@dataclass
class LinearShapeModel:
    mean_shape: np.ndarray
    modes: np.ndarray  # (M, N, 3)
    stddevs: np.ndarray  # (M,)
    faces: np.ndarray | None = None
    landmarks: list = field(default_factory=list)

    def __post_init__(self):
        self.mean_shape = np.asarray(self.mean_shape, dtype=np.float64)
        n = self.mean_shape.shape[0]
        self.modes = np.asarray(self.modes, dtype=np.float64).reshape(-1, n, 3)
        self.stddevs = np.asarray(self.stddevs, dtype=np.float64).reshape(-1)
        if len(self.stddevs) != len(self.modes):
            raise ShapeMismatch(f"{len(self.modes)} modes but {len(self.stddevs)} stddevs")
        if np.any(self.stddevs <= 0) or np.any(np.diff(self.stddevs) > 0):
            raise ValueError("stddevs must be positive and non-increasing")

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    def gram(self) -> np.ndarray:
        flat = self.modes.reshape(self.num_modes, -1)
        return flat @ flat.T

    def mesh(self, vertices=None) -> TriangleMesh:
        v = self.mean_shape if vertices is None else vertices
        return TriangleMesh(v, self.faces, list(self.landmarks))

    def project(self, shape) -> np.ndarray:
        """Recover coefficients of ``shape`` (inverse of :func:`sample_shape`)."""
        d = (np.asarray(shape, dtype=np.float64) - self.mean_shape).reshape(-1)
        return (self.modes.reshape(self.num_modes, -1) @ d) / self.stddevs


def nearest_vertices(vertices, directions) -> dict:
    centre = vertices.mean(axis=0)
    unit = vertices - centre
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    out = {}
    for name, d in directions.items():
        d = np.asarray(d, dtype=np.float64)
        out[name] = int(np.argmax(unit @ (d / np.linalg.norm(d))))
    return out


def toy_base_mesh(level: int = 3, radius: float = 50.0) -> TriangleMesh:
    """Icosphere of ~100 mm diameter with fixed landmark vertices on the +z side."""
    mesh = icosphere(level, radius)
    mesh.landmarks = list(nearest_vertices(mesh.vertices, LANDMARK_DIRECTIONS).items())
    return mesh


WAVE_BAND = (4.0, 8.0)  # wave numbers in units of 1 / (mesh radius)


def _deformation_field(vertices, normals, rng, scale, band=WAVE_BAND):
    # a few low-frequency plane waves, displacing along the normal and one tangent
    field_ = np.zeros_like(vertices)
    for _ in range(3):
        k = rng.normal(size=3)
        k *= rng.uniform(*band) / (np.linalg.norm(k) * scale)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(vertices @ k + phase)
        tangent = np.cross(normals, rng.normal(size=3))
        tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-12)
        a, b = rng.normal(size=2)
        field_ += wave[:, None] * (a * normals + 0.5 * b * tangent)
    return field_


def _gram_schmidt(vectors, tol=1e-8):
    basis = []
    for v in vectors:
        w = v.copy()
        for _ in range(2):  # re-orthogonalise once for accuracy
            for q in basis:
                w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm < tol * np.linalg.norm(v):
            raise RankDeficiency("deformation fields are linearly dependent")
        basis.append(w / norm)
    return np.array(basis).reshape(len(vectors), -1)


def build_toy_shape_model(base: TriangleMesh, num_modes: int, seed: int = 0, vertex_rms: float = 2.0,
                          sigma_decay: float = 0.8, wave_band=WAVE_BAND) -> LinearShapeModel:
    """Smooth seeded deformation modes over ``base``, orthonormalised.

    Modes are unit vectors over all ``3N`` coordinates, so mode ``i`` gets the
    standard deviation ``vertex_rms * sqrt(N) * sigma_decay**i`` mm; a unit
    coefficient on the first mode then moves vertices by ``vertex_rms`` mm RMS.
    """
    n = base.n_vertices
    sigma0 = vertex_rms * np.sqrt(n)
    if num_modes < 0 or num_modes > 3 * n:
        raise ValueError(f"num_modes must be in [0, {3 * n}]")
    normals = base.vertex_normals()
    scale = float(np.linalg.norm(base.vertices - base.vertices.mean(axis=0), axis=1).max())
    for attempt in range(MAX_MODEL_TRIES):
        rng = np.random.default_rng([seed, attempt])
        fields = [_deformation_field(base.vertices, normals, rng, scale, wave_band).ravel() for _ in range(num_modes)]
        try:
            modes = _gram_schmidt(fields) if num_modes else np.zeros((0, 3 * n))
        except RankDeficiency:
            continue
        stddevs = sigma0 * sigma_decay ** np.arange(num_modes)
        return LinearShapeModel(base.vertices.copy(), modes.reshape(num_modes, n, 3), stddevs, base.faces.copy(),
                                list(base.landmarks))
    raise RankDeficiency(f"could not build {num_modes} independent modes after {MAX_MODEL_TRIES} seeds")


def sample_shape(model: LinearShapeModel, coefficients) -> np.ndarray:
    """``mean + sum_i c_i * sigma_i * mode_i``."""
    c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if len(c) != model.num_modes:
        raise ShapeMismatch(f"expected {model.num_modes} coefficients, got {len(c)}")
    return model.mean_shape + np.tensordot(c * model.stddevs, model.modes, axes=1)


def truncated_normal(rng, size, limit=TRUNCATION) -> np.ndarray:
    """Standard normal draws, redrawing any entry outside ``[-limit, limit]``."""
    c = rng.standard_normal(size)
    bad = np.abs(c) > limit
    while bad.any():
        c[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(c) > limit
    return c


# rendering ----------------------------------------------------------------------


def _default_rotation():
    # camera on the +z axis looking back at the origin, image y pointing down
    return np.diag([1.0, -1.0, -1.0])


@dataclass
class RenderConfig:
    width: int = 64
    height: int = 64
    focal: float = 140.0
    cx: float | None = None
    cy: float | None = None
    rotation: np.ndarray = field(default_factory=_default_rotation)
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 300.0]))
    light_direction: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.4, -1.0]) / np.sqrt(1.25))
    albedo: float = 0.9
    mode: str = "grayscale"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.light_direction = np.asarray(self.light_direction, dtype=np.float64).reshape(3)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8 x 8")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if abs(np.linalg.norm(self.light_direction) - 1.0) > 1e-9:
            raise ValueError("light_direction must be a unit vector")
        if not 0.0 < self.albedo <= 1.0:
            raise ValueError("albedo must be in (0, 1]")
        if self.mode not in ("grayscale", "depth"):
            raise ValueError(f"unknown render mode {self.mode!r}")

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "focal": self.focal, "cx": self.cx, "cy": self.cy,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "light_direction": self.light_direction.tolist(), "albedo": self.albedo, "mode": self.mode}

    def to_camera(self, points):
        return points @ self.rotation.T + self.translation

    def project(self, cam_points):
        z = cam_points[..., 2]
        return np.stack([self.focal * cam_points[..., 0] / z + self.cx,
                         self.focal * cam_points[..., 1] / z + self.cy], axis=-1)


@dataclass
class GrayImage:
    """Row-major image; intensities in [0, 1] or depths in mm (0 = background)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(self.height, self.width)

    def __eq__(self, other):
        return (isinstance(other, GrayImage) and self.width == other.width and self.height == other.height
                and np.array_equal(self.pixels, other.pixels))


def render(mesh: TriangleMesh, config: RenderConfig) -> GrayImage:
    """Z-buffered rasterisation of ``mesh``.

    Grayscale pixels are ``albedo * max(0, n . l)`` with the face normal ``n``
    (from the winding, in camera coordinates) and ``light_direction`` ``l``
    pointing from the surface towards the light. Depth pixels hold the
    perspective-correct camera-space depth. When two fragments have equal
    depth the lower face index wins.
    """
    faces = mesh.faces
    W, H = config.width, config.height
    out = np.zeros(H * W)
    if len(faces) == 0:
        return GrayImage(W, H, out)
    cam = config.to_camera(mesh.vertices)
    used = np.unique(faces)
    if np.any(cam[used, 2] <= 0):
        raise BehindCamera(f"{int(np.sum(cam[used, 2] <= 0))} vertices are not in front of the camera")
    uv = config.project(cam)
    tri = uv[faces]  # (M, 3, 2)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    keep = area != 0
    # orient every triangle so that the signed area is positive
    flip = area < 0
    order = np.where(flip[:, None], [0, 2, 1], [0, 1, 2])
    tri = np.take_along_axis(tri, order[:, :, None], axis=1)
    zs = np.take_along_axis(cam[faces][:, :, 2], order, axis=1)
    area = np.abs(area)

    if config.mode == "grayscale":
        p = cam[faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        shade = config.albedo * np.maximum(0.0, n @ config.light_direction)

    lo = np.floor(tri.min(axis=1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = np.where(keep, nx * ny, 0)
    if counts.sum() == 0:
        return GrayImage(W, H, out)
    fid = np.repeat(np.arange(len(faces)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[fid, 0] + local % nx[fid]
    py = lo[fid, 1] + local // nx[fid]
    sx = px + 0.5
    sy = py + 0.5
    t = tri[fid]

    inside = np.ones(len(fid), dtype=bool)
    weights = []
    for i, j in ((1, 2), (2, 0), (0, 1)):
        ex = t[:, j, 0] - t[:, i, 0]
        ey = t[:, j, 1] - t[:, i, 1]
        e = ex * (sy - t[:, i, 1]) - ey * (sx - t[:, i, 0])
        top_left = (ey < 0) | ((ey == 0) & (ex > 0))
        inside &= (e > 0) | ((e == 0) & top_left)
        weights.append(e)
    fid, px, py = fid[inside], px[inside], py[inside]
    w = np.stack(weights, axis=1)[inside] / area[fid, None]
    inv_z = (w / zs[fid]).sum(axis=1)
    depth = 1.0 / inv_z
    pix = py * W + px
    # nearest fragment per pixel, ties to the lowest face index
    sel = np.lexsort((fid, depth, pix))
    pix_s = pix[sel]
    first = np.ones(len(sel), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = sel[first]
    out[pix[win]] = shade[fid[win]] if config.mode == "grayscale" else depth[win]
    return GrayImage(W, H, out)


# PGM ---------------------------------------------------------------------------

PGM_MAX = 65535
DEPTH_UNIT = 0.01  # mm per PGM level in depth mode


def image_levels(image: GrayImage, mode: str = "grayscale") -> np.ndarray:
    scale = PGM_MAX if mode == "grayscale" else 1.0 / DEPTH_UNIT
    return np.clip(np.floor(image.pixels * scale + 0.5), 0, PGM_MAX).astype(np.uint16)


def save_pgm(path, image: GrayImage, mode: str = "grayscale") -> None:
    """Binary PGM (P5), maxval 65535, big-endian samples; written atomically."""
    path = Path(path)
    data = image_levels(image, mode).astype(">u2").tobytes()
    header = f"P5\n{image.width} {image.height}\n{PGM_MAX}\n".encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + data)
    os.replace(tmp, path)


def load_pgm(path, mode: str = "grayscale") -> GrayImage:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError(f"{path}: bad PGM header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    size = np.dtype(dtype).itemsize * w * h
    if len(raw) - pos < size:
        raise ParseError(f"{path}: truncated PGM data")
    levels = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).astype(np.float64)
    pixels = levels / maxval if mode == "grayscale" else levels * DEPTH_UNIT
    return GrayImage(w, h, pixels)


# datasets ----------------------------------------------------------------------


@dataclass
class Sample:
    shape: np.ndarray
    image: GrayImage
    coefficients: np.ndarray


def sample_coefficients(num_modes: int, seed: int, index: int) -> np.ndarray:
    return truncated_normal(np.random.default_rng([seed, index]), num_modes)


def generate_dataset(model: LinearShapeModel, count: int, render_config: RenderConfig, seed: int) -> list:
    """``count`` seeded (shape, image, coefficients) triples.

    Sample ``i`` draws its coefficients from ``default_rng([seed, i])`` so any
    sample can be regenerated on its own.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for i in range(count):
        c = sample_coefficients(model.num_modes, seed, i)
        shape = sample_shape(model, c)
        out.append(Sample(shape, render(model.mesh(shape), render_config), c))
    return out
