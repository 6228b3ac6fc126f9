"""Triangle meshes, mesh I/O and graph Laplacians.

All geometry is stored as float64 (millimetres) and all sparse operators
as canonical ``scipy.sparse.csr_matrix`` instances (sorted column indices,
no explicit zeros).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    DegenerateFace,
    IsolatedVertex,
    MeshError,
    NoConvergence,
    NonPositiveLambda,
    NonTriangleFace,
    ParseError,
    ZeroDegree,
)

POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000


@dataclass
class TriangleMesh:
    """Shared-topology triangle surface.

    Parameters
    ----------
    vertices : (N, 3) array
        Vertex positions in millimetres.
    faces : (M, 3) int array
        Zero-based vertex indices.
    landmarks : list of (name, vertex index)
        Optional named vertices.
    """

    vertices: np.ndarray
    faces: np.ndarray
    landmarks: list = field(default_factory=list)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be N x 3, got {self.vertices.shape}")
        self.landmarks = [(str(n), int(i)) for n, i in self.landmarks]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self) -> "TriangleMesh":
        n = self.n_vertices
        f = self.faces
        if f.size and (f.min() < 0 or f.max() >= n):
            raise MeshError("face index out of range")
        bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if bad.any():
            raise DegenerateFace(f"face {int(np.flatnonzero(bad)[0])} repeats a vertex")
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise IsolatedVertex(f"vertex {int(np.flatnonzero(~used)[0])} is not referenced by any face")
        for name, idx in self.landmarks:
            if not 0 <= idx < n:
                raise MeshError(f"landmark {name!r} index {idx} out of range")
        return self

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), self.faces.copy(), list(self.landmarks))

    def landmark_positions(self, names=None) -> np.ndarray:
        lookup = dict(self.landmarks)
        names = [n for n, _ in self.landmarks] if names is None else names
        return self.vertices[[lookup[n] for n in names]]

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def vertex_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        out = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(out, self.faces[:, k], n)
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True)
class ScaledLaplacian:
    laplacian: sp.csr_matrix
    lambda_max: float
    scaled: sp.csr_matrix

    @property
    def size(self) -> int:
        return self.laplacian.shape[0]


def canonical_csr(m) -> sp.csr_matrix:
    """Return ``m`` as CSR with sorted indices, summed duplicates and no stored zeros."""
    m = sp.csr_matrix(m, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


# ---------------------------------------------------------------------------
# Procedural meshes


def icosphere(level: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron; ``10 * 4**level + 2`` vertices."""
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> TriangleMesh:
    """Flat ``nx`` by ``ny`` vertex grid in the z = 0 plane."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [(a, b, d), (a, d, c)]
    return TriangleMesh(verts, np.array(faces))


def cube_mesh(divisions: int = 2, size: float = 1.0) -> TriangleMesh:
    """Closed axis-aligned cube, each face split into ``divisions**2`` quads."""
    n = divisions
    index = {}
    verts = []

    def vid(p):
        key = tuple(int(round(c)) for c in p)
        if key not in index:
            index[key] = len(verts)
            verts.append(np.array(key, dtype=np.float64) * size / n)
        return index[key]

    faces = []
    for axis in range(3):
        for side in (0, n):
            u, w = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis], p[u], p[w] = side, i + di, j + dj
                        quad.append(vid(p))
                    a, b, c, d = quad
                    tri = [(a, b, c), (a, c, d)]
                    # outward winding
                    sign = 1 if side == n else -1
                    if (axis == 1) ^ (sign < 0):
                        tri = [(a, c, b), (a, d, c)]
                    faces += tri
    return TriangleMesh(np.array(verts), np.array(faces))


# ---------------------------------------------------------------------------
# Graph construction


def build_adjacency(mesh: TriangleMesh) -> sp.csr_matrix:
    """Binary symmetric adjacency: vertices sharing a face edge are adjacent."""
    mesh.validate()
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    n = mesh.n_vertices
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0
    a = canonical_csr(a)
    empty = np.flatnonzero(np.diff(a.indptr) == 0)
    if empty.size:
        raise IsolatedVertex(f"vertex {int(empty[0])} has no neighbours")
    return a


def mesh_edges(mesh: TriangleMesh) -> np.ndarray:
    """Unique undirected edges as an (E, 2) array with ``i < j``."""
    a = sp.triu(build_adjacency(mesh), k=1).tocoo()
    order = np.lexsort((a.col, a.row))
    return np.column_stack([a.row[order], a.col[order]]).astype(np.int64)


def normalized_laplacian(adjacency) -> sp.csr_matrix:
    """``I - D^-1/2 A D^-1/2`` for a binary symmetric adjacency matrix."""
    a = canonical_csr(adjacency)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if (deg <= 0).any():
        raise ZeroDegree(f"vertex {int(np.flatnonzero(deg <= 0)[0])} has degree 0")
    d = sp.diags(1.0 / np.sqrt(deg))
    lap = sp.identity(a.shape[0], format="csr") - d @ a @ d
    lap = canonical_csr(lap)
    # exact symmetry regardless of floating-point evaluation order
    return canonical_csr((lap + lap.T) * 0.5)


POWER_BLOCK = 8


def _start_block(n: int, p: int) -> np.ndarray:
    # Columns are fixed index-dependent ramps. A constant vector alone would be
    # an exact null vector of the Laplacian of any regular graph.
    idx = np.arange(1, n + 1)[:, None]
    cols = np.arange(p)[None, :]
    block = 1.0 + np.sin(idx * (0.7548776662466927 + 0.5698402909980532 * cols))
    q, _ = np.linalg.qr(block)
    return q


def largest_eigenvalue(matrix, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                       block: int = POWER_BLOCK) -> float:
    """Largest eigenvalue of a symmetric matrix by block power iteration.

    Orthogonal iteration on ``M - s I`` with a Rayleigh-Ritz step on the
    block. The block makes the contraction depend on the gap to the
    ``block + 1``-th eigenvalue, so clusters just below the top (common on
    symmetric meshes) do not stall convergence. The shift is
    ``s = g + 0.45 (theta - g)`` with ``g`` the Gershgorin lower bound and
    ``theta`` the current top Ritz value, which keeps the top eigenvalue
    strictly dominant.

    Converged when the top Ritz pair residual ``||Mx - theta x||`` is below
    ``tol * |theta|``, which bounds ``|theta - lambda_max|``.
    """
    m = sp.csr_matrix(matrix, dtype=np.float64)
    n = m.shape[0]
    if n == 0:
        raise NoConvergence("empty matrix")
    if n <= block:
        return float(np.linalg.eigvalsh(m.toarray())[-1])
    absrow = np.asarray(abs(m).sum(axis=1)).ravel()
    lower = float(np.min(2.0 * m.diagonal() - absrow))
    v = _start_block(n, block)
    theta = lower
    for _ in range(max_iter):
        mv = m @ v
        h = v.T @ mv
        evals, evecs = np.linalg.eigh(0.5 * (h + h.T))
        theta = float(evals[-1])
        x = v @ evecs[:, -1]
        r = mv @ evecs[:, -1] - theta * x
        if np.linalg.norm(r) <= tol * max(abs(theta), np.finfo(float).tiny):
            return theta
        shift = lower + 0.45 * (theta - lower) if theta > lower else lower
        v, _ = np.linalg.qr(mv - shift * v)
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations (last estimate {theta!r})")


def scale_laplacian(laplacian, lambda_max: float) -> ScaledLaplacian:
    if not lambda_max > 0:
        raise NonPositiveLambda(f"lambda_max must be positive, got {lambda_max}")
    lap = canonical_csr(laplacian)
    scaled = canonical_csr(lap * (2.0 / lambda_max) - sp.identity(lap.shape[0], format="csr"))
    return ScaledLaplacian(lap, float(lambda_max), scaled)


def mesh_laplacian(mesh: TriangleMesh) -> ScaledLaplacian:
    lap = normalized_laplacian(build_adjacency(mesh))
    return scale_laplacian(lap, largest_eigenvalue(lap))


# ---------------------------------------------------------------------------
# I/O


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if suffix == ".obj":
        mesh = _parse_obj(lines)
    elif suffix == ".ply":
        mesh = _parse_ply(lines)
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")
    sidecar = landmark_sidecar(path)
    if sidecar.exists():
        mesh.landmarks = load_landmarks(sidecar)
    return mesh.validate()


def _parse_obj(lines) -> TriangleMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs 3 coordinates", lineno)
                verts.append([float(p) for p in parts[1:4]])
            elif tag == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise NonTriangleFace(f"face with {len(idx)} vertices", lineno)
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno) from None
    if not verts:
        raise ParseError("no vertices")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _parse_ply(lines) -> TriangleMesh:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vert = n_face = None
    vert_props = []
    current = None
    body_start = None
    for lineno, raw in enumerate(lines, start=1):
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ParseError("only ascii PLY is supported", lineno)
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or n_vert is None:
        raise ParseError("incomplete PLY header")
    try:
        xyz = [vert_props.index(c) for c in "xyz"]
    except ValueError:
        raise ParseError("PLY vertex element lacks x/y/z") from None
    body = lines[body_start:]
    verts, faces = [], []
    for k in range(n_vert):
        lineno = body_start + k + 1
        try:
            vals = body[k].split()
            verts.append([float(vals[i]) for i in xyz])
        except (IndexError, ValueError):
            raise ParseError("bad vertex record", lineno) from None
    for k in range(n_face or 0):
        lineno = body_start + n_vert + k + 1
        try:
            vals = [int(x) for x in body[n_vert + k].split()]
        except (IndexError, ValueError):
            raise ParseError("bad face record", lineno) from None
        if vals[0] != 3:
            raise NonTriangleFace(f"face with {vals[0]} vertices", lineno)
        faces.append(vals[1:4])
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_mesh(mesh: TriangleMesh, path, colors=None) -> None:
    """Write OBJ or ascii PLY (with optional uint8 RGB vertex colours)."""
    path = Path(path)
    suffix = path.suffix.lower()
    v, f = mesh.vertices, mesh.faces
    if suffix == ".obj":
        out = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in v]
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    elif suffix == ".ply":
        out = ["ply", "format ascii 1.0", f"element vertex {len(v)}",
               "property double x", "property double y", "property double z"]
        if colors is not None:
            out += ["property uchar red", "property uchar green", "property uchar blue"]
        out += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
        if colors is None:
            out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in v]
        else:
            out += [f"{x:.17g} {y:.17g} {z:.17g} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(v, colors)]
        out += [f"3 {a} {b} {c}" for a, b, c in f]
    else:
        raise ParseError(f"unsupported mesh format {suffix!r}")
    _atomic_write_text(path, "\n".join(out) + "\n")
    if mesh.landmarks:
        save_landmarks(mesh.landmarks, landmark_sidecar(path))


def landmark_sidecar(mesh_path) -> Path:
    mesh_path = Path(mesh_path)
    return mesh_path.with_name(mesh_path.stem + ".landmarks.json")


def load_landmarks(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return [(str(d["name"]), int(d["vertex_index"])) for d in data]
    except (TypeError, KeyError) as exc:
        raise ParseError(f"bad landmark file {path}: {exc}") from None


def save_landmarks(landmarks, path) -> None:
    text = json.dumps([{"name": n, "vertex_index": int(i)} for n, i in landmarks], indent=1)
    _atomic_write_text(path, text)
