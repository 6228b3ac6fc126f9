"""Landmark alignment, point-to-surface errors, region masks and error maps."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from .errors import DegenerateLandmarks, EmptyMask, EmptyMesh, IoError, ShapeMismatch
from .geometry import closest_triangles
from .mesh import TriangleMesh, save_mesh

DEFAULT_CAP = 5.0
RAMP_LOW = np.array([0.0, 0.0, 255.0])  # blue at 0 mm
RAMP_HIGH = np.array([255.0, 0.0, 0.0])  # red at the cap
UNMASKED_COLOR = (128, 128, 128)
HISTOGRAM_STEP = 0.5


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points):
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_json(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(), "scale": self.scale}


def _check_landmarks(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise DegenerateLandmarks(f"need at least 3 landmarks in 3D, got shape {points.shape}")
    centred = points - points.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[0] <= 1e-12 or s[1] <= 1e-9 * s[0]:
        raise DegenerateLandmarks("landmarks are coincident or collinear")
    return points, s


def procrustes_align(source, target, similarity=False) -> RigidTransform:
    """Least-squares rotation (det +1) and translation taking ``source`` onto ``target``.

    With ``similarity`` a uniform scale is fitted as well.
    """
    source, _ = _check_landmarks(source)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != source.shape:
        raise ShapeMismatch(f"{source.shape} vs {target.shape}")
    ms, mt = source.mean(axis=0), target.mean(axis=0)
    s, t = source - ms, target - mt
    u, sig, vt = np.linalg.svd(s.T @ t)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    fix = np.array([1.0, 1.0, d])
    rotation = vt.T @ np.diag(fix) @ u.T
    scale = float((sig * fix).sum() / (s**2).sum()) if similarity else 1.0
    return RigidTransform(rotation, mt - scale * rotation @ ms, scale)


def alignment_residual(transform: RigidTransform, source, target) -> float:
    """Root-mean-square landmark distance after applying ``transform``."""
    diff = transform.apply(source) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt((diff**2).sum(axis=1).mean()))


def point_to_surface(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact distance from each point to the closest point of the triangle soup."""
    if mesh.n_faces == 0:
        raise EmptyMesh("mesh has no triangles")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return closest_triangles(points, mesh.vertices[mesh.faces])[1]


# region masks -------------------------------------------------------------------


def _hull_triangles(points):
    """Triangles covering the convex hull (its boundary, or a fan for planar sets)."""
    points, s = _check_landmarks(points)
    centred = points - points.mean(axis=0)
    if s[2] > 1e-9 * s[0]:
        hull = ConvexHull(points)
        return points[hull.simplices], hull.equations
    # coplanar: 2D hull in the plane, fan-triangulated (covers the interior)
    _, _, vt = np.linalg.svd(centred)
    hull = ConvexHull(centred @ vt[:2].T)
    ring = points[hull.vertices]
    tris = np.stack([np.repeat(ring[:1], len(ring) - 2, axis=0), ring[1:-1], ring[2:]], axis=1)
    return tris, None


@dataclass
class RegionMask:
    """Vertices within ``margin`` mm of the convex hull of a landmark set."""

    selected: np.ndarray
    hull_triangles: np.ndarray
    margin: float
    hull_planes: np.ndarray | None = None

    def hull_distance(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dist = closest_triangles(points, self.hull_triangles)[1]
        if self.hull_planes is not None:
            inside = (points @ self.hull_planes[:, :3].T + self.hull_planes[:, 3] <= 0).all(axis=1)
            dist[inside] = 0.0
        return dist

    def select(self, points) -> np.ndarray:
        return self.hull_distance(points) <= self.margin

    @property
    def count(self) -> int:
        return int(self.selected.sum())


def region_mask_from_landmarks(mesh: TriangleMesh, landmarks, margin: float = 10.0) -> RegionMask:
    """Mask of ``mesh`` vertices within ``margin`` of the landmarks' convex hull.

    ``landmarks`` is an ``(L, 3)`` array of positions (in the frame of
    ``mesh``) or a list of landmark names defined on ``mesh``.
    """
    if landmarks is None or len(landmarks) == 0:
        raise DegenerateLandmarks("no landmarks given")
    if isinstance(landmarks[0], str):
        points = mesh.landmark_positions(list(landmarks))
    else:
        points = np.asarray(landmarks, dtype=np.float64)
    tris, planes = _hull_triangles(points)
    mask = RegionMask(np.zeros(mesh.n_vertices, dtype=bool), tris, float(margin), planes)
    mask.selected = mask.select(mesh.vertices)
    if not mask.selected.any():
        raise EmptyMask("no vertex lies inside the landmark region")
    return mask


# reports ------------------------------------------------------------------------


@dataclass
class EvaluationReport:
    per_vertex: np.ndarray  # reconstruction -> scan, NaN outside the mask
    recon_to_scan: float
    scan_to_recon: float
    combined: float
    stats: dict
    histogram: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metadata": self.metadata,
            "recon_to_scan_mean": self.recon_to_scan,
            "scan_to_recon_mean": self.scan_to_recon,
            "combined": self.combined,
            "masked_stats": self.stats,
            "histogram": self.histogram,
            "per_vertex": [None if np.isnan(e) else float(e) for e in self.per_vertex],
        }


def histogram(values, step=HISTOGRAM_STEP, cap=DEFAULT_CAP) -> dict:
    edges = np.arange(0.0, cap + step / 2, step)
    counts, _ = np.histogram(np.clip(values, 0.0, cap), bins=edges)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def bidirectional_error(reconstruction: TriangleMesh, scan: TriangleMesh, mask: RegionMask,
                        metadata=None) -> EvaluationReport:
    """Symmetric point-to-surface error restricted to the landmark region.

    Reconstruction vertices use ``mask.selected``. Scan vertices use the same
    selection when the scan shares the reconstruction's triangulation, and
    are otherwise selected by the mask's landmark region. The combined error
    is the average of the two directional means.
    """
    if len(mask.selected) != reconstruction.n_vertices:
        raise ShapeMismatch("mask length does not match the reconstruction")
    if not mask.selected.any():
        raise EmptyMask("mask selects no reconstruction vertex")
    shared = scan.n_vertices == reconstruction.n_vertices and np.array_equal(scan.faces, reconstruction.faces)
    scan_sel = mask.selected if shared else mask.select(scan.vertices)
    if not scan_sel.any():
        raise EmptyMask("mask selects no scan vertex")
    forward = point_to_surface(reconstruction.vertices[mask.selected], scan)
    backward = point_to_surface(scan.vertices[scan_sel], reconstruction)
    per_vertex = np.full(reconstruction.n_vertices, np.nan)
    per_vertex[mask.selected] = forward
    r2s, s2r = float(forward.mean()), float(backward.mean())
    stats = {"mean": r2s, "std": float(forward.std()), "median": float(np.median(forward)),
             "max": float(forward.max()), "count": int(forward.size), "scan_count": int(backward.size)}
    return EvaluationReport(per_vertex, r2s, s2r, 0.5 * (r2s + s2r), stats, histogram(forward), dict(metadata or {}))


def save_report(report: EvaluationReport, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(json.dumps(report.to_json(), indent=1))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# colour maps --------------------------------------------------------------------


def error_colors(errors, cap=DEFAULT_CAP) -> np.ndarray:
    """Linear blue (0 mm) to red (``cap`` and above) ramp, uint8 RGB.

    Channels are rounded half up; NaN errors (unmasked vertices) are gray.
    """
    errors = np.asarray(errors, dtype=np.float64)
    t = np.clip(np.nan_to_num(errors, nan=0.0) / cap, 0.0, 1.0)[:, None]
    rgb = np.floor((1.0 - t) * RAMP_LOW + t * RAMP_HIGH + 0.5).astype(np.uint8)
    rgb[np.isnan(errors)] = UNMASKED_COLOR
    return rgb


def export_error_map(mesh: TriangleMesh, per_vertex_errors, path, cap=DEFAULT_CAP) -> Path:
    """Write a vertex-coloured PLY plus ``<stem>.errors.json`` with the raw values."""
    errors = np.asarray(per_vertex_errors, dtype=np.float64)
    if errors.shape != (mesh.n_vertices,):
        raise ShapeMismatch(f"{errors.shape[0] if errors.ndim else 0} errors for {mesh.n_vertices} vertices")
    path = Path(path)
    sidecar = path.with_name(path.stem + ".errors.json")
    plain = TriangleMesh(mesh.vertices, mesh.faces)
    try:
        save_mesh(plain, path, colors=error_colors(errors, cap))
        tmp = sidecar.with_name(sidecar.name + ".tmp")
        tmp.write_text(json.dumps({"cap": cap, "errors": [None if np.isnan(e) else float(e) for e in errors]}))
        os.replace(tmp, sidecar)
    except OSError as exc:
        raise IoError(f"cannot write error map {path}: {exc}") from exc
    return sidecar
