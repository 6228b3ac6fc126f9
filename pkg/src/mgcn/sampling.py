"""Quadric-error mesh decimation and the down/up-sampling operators.

Decimation collapses edges onto one of their endpoints, so every coarse
vertex is an original fine vertex and the down-sampling matrix is a binary
row selection.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import EmptyCoarseMesh, MeshError, TargetUnreachable
from .geometry import closest_triangles
from .mesh import ScaledLaplacian, TriangleMesh, canonical_csr, mesh_laplacian


@dataclass(frozen=True)
class SamplingPair:
    fine_count: int
    coarse_count: int
    q_down: sp.csr_matrix
    q_up: sp.csr_matrix
    coarse_mesh: TriangleMesh
    kept: np.ndarray  # fine index of every coarse vertex


@dataclass(frozen=True)
class MeshHierarchy:
    levels: tuple
    pairs: tuple
    laplacians: tuple

    @property
    def depth(self) -> int:
        return len(self.pairs)

    @property
    def sizes(self) -> list:
        return [m.n_vertices for m in self.levels]


def face_quadrics(vertices, faces) -> np.ndarray:
    """Fundamental error quadric ``p p^T`` of every face plane, shape (M, 4, 4)."""
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    d = -np.einsum("ij,ij->i", n, v[:, 0])
    p = np.column_stack([n, d])
    return np.einsum("mi,mj->mij", p, p)


BOUNDARY_WEIGHT = 1.0


def boundary_edges(faces) -> list:
    """Edges used by exactly one face, as ``(a, b, opposite)`` in face order."""
    count = {}
    for f in np.asarray(faces).tolist():
        for i in range(3):
            a, b, c = f[i], f[(i + 1) % 3], f[(i + 2) % 3]
            key = (min(a, b), max(a, b))
            count.setdefault(key, []).append((a, b, c))
    return [uses[0] for uses in count.values() if len(uses) == 1]


def vertex_quadrics(vertices, faces, boundary_weight=BOUNDARY_WEIGHT) -> np.ndarray:
    """Per-vertex quadrics: incident face planes plus boundary-constraint planes.

    Each boundary edge contributes the plane through the edge perpendicular
    to its face, so open borders stay in place during simplification.
    """
    kq = face_quadrics(vertices, faces)
    q = np.zeros((len(vertices), 4, 4))
    for k in range(3):
        np.add.at(q, faces[:, k], kq)
    if boundary_weight > 0:
        for a, b, c in boundary_edges(faces):
            pa, pb, pc = vertices[a], vertices[b], vertices[c]
            edge = pb - pa
            normal = np.cross(edge, np.cross(pc - pa, edge))
            norm = np.linalg.norm(normal)
            if norm == 0:
                continue
            normal /= norm
            plane = np.append(normal, -normal @ pa)
            kp = boundary_weight * np.outer(plane, plane)
            q[a] += kp
            q[b] += kp
    return q


def quadric_error(q, point) -> float:
    h = np.append(point, 1.0)
    return float(h @ q @ h)


class _Collapser:
    """Mutable mesh state for greedy endpoint edge collapse."""

    def __init__(self, mesh: TriangleMesh):
        self.pos = mesh.vertices
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.face_alive = [True] * len(self.faces)
        n = mesh.n_vertices
        self.vfaces = [set() for _ in range(n)]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vfaces[v].add(fi)
        self.alive = np.ones(n, dtype=bool)
        self.quadric = vertex_quadrics(mesh.vertices, mesh.faces)
        self.version = [0] * n
        self.boundary = self._boundary_vertices()

    def _boundary_vertices(self):
        count = {}
        for fi, f in enumerate(self.faces):
            if not self.face_alive[fi]:
                continue
            for i in range(3):
                e = (min(f[i], f[(i + 1) % 3]), max(f[i], f[(i + 1) % 3]))
                count[e] = count.get(e, 0) + 1
        bnd = set()
        for (a, b), c in count.items():
            if c == 1:
                bnd.update((a, b))
        return bnd

    def neighbours(self, v):
        out = set()
        for fi in self.vfaces[v]:
            out.update(self.faces[fi])
        out.discard(v)
        return out

    def edge_cost(self, a, b):
        """Return ``(cost, keep, remove)`` for the edge ``a``-``b``."""
        q = self.quadric[a] + self.quadric[b]
        ca = quadric_error(q, self.pos[a])
        cb = quadric_error(q, self.pos[b])
        # surviving endpoint: lower error at its own position, ties to lower index
        if ca < cb or (ca == cb and a < b):
            return max(ca, 0.0), a, b
        return max(cb, 0.0), b, a

    def is_boundary_edge(self, a, b):
        return len(self.vfaces[a] & self.vfaces[b]) == 1

    def can_collapse(self, keep, remove):
        shared = self.vfaces[keep] & self.vfaces[remove]
        if not shared:
            return False
        # link condition: common neighbours are exactly the opposite vertices
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {keep, remove}
        common = self.neighbours(keep) & self.neighbours(remove)
        if common != opposite:
            return False
        if keep in self.boundary and remove in self.boundary and not self.is_boundary_edge(keep, remove):
            return False
        # a closed mesh must keep at least a tetrahedron
        if not self.boundary and int(self.alive.sum()) <= 4:
            return False
        # no folded or zero-area faces
        pk = self.pos[keep]
        for fi in self.vfaces[remove] - shared:
            f = self.faces[fi]
            p = [self.pos[v] for v in f]
            old = np.cross(p[1] - p[0], p[2] - p[0])
            p = [pk if v == remove else self.pos[v] for v in f]
            new = np.cross(p[1] - p[0], p[2] - p[0])
            if float(old @ new) <= 0.0:
                return False
        return True

    def collapse(self, keep, remove):
        shared = self.vfaces[keep] & self.vfaces[remove]
        for fi in shared:
            self.face_alive[fi] = False
            for v in self.faces[fi]:
                self.vfaces[v].discard(fi)
        for fi in list(self.vfaces[remove]):
            f = self.faces[fi]
            f[f.index(remove)] = keep
            self.vfaces[keep].add(fi)
        self.vfaces[remove] = set()
        self.alive[remove] = False
        self.quadric[keep] = self.quadric[keep] + self.quadric[remove]
        if remove in self.boundary:
            self.boundary.discard(remove)
            self.boundary.add(keep)
        self.version[keep] += 1
        self.version[remove] += 1


def decimate_quadric(mesh: TriangleMesh, target_count: int, seed: int = 0, trace=None):
    """Greedy quadric-error edge collapse down to ``target_count`` vertices.

    Each step collapses the valid edge of lowest quadric cost onto the
    endpoint whose position has the lower combined quadric error. Ties are
    resolved by lowest vertex indices, so the result is fully determined
    by the mesh; ``seed`` is accepted for interface symmetry only.

    Returns the coarse mesh (vertices ordered by their fine index) and the
    binary down-sampling matrix of shape ``(target_count, N)``. If ``trace``
    is a list, ``(cost, keep, remove)`` is appended for every collapse.
    """
    del seed
    mesh.validate()
    n = mesh.n_vertices
    if not 4 <= target_count < n:
        raise TargetUnreachable(f"target {target_count} must satisfy 4 <= target < {n}")
    state = _Collapser(mesh)
    heap = []

    def push(a, b):
        a, b = min(a, b), max(a, b)
        cost, keep, remove = state.edge_cost(a, b)
        heapq.heappush(heap, (cost, a, b, keep, remove, state.version[a], state.version[b]))

    for f in mesh.faces:
        for i in range(3):
            a, b = int(f[i]), int(f[(i + 1) % 3])
            if a < b:
                push(a, b)
    # drop duplicate initial entries cheaply by set
    heap = sorted(set(heap))
    heapq.heapify(heap)

    alive = n
    blocked = set()
    while alive > target_count:
        if not heap:
            raise TargetUnreachable(f"no valid collapse left at {alive} vertices (target {target_count})")
        cost, a, b, keep, remove, va, vb = heapq.heappop(heap)
        if not (state.alive[a] and state.alive[b]) or va != state.version[a] or vb != state.version[b]:
            continue
        if (a, b, va, vb) in blocked:
            continue
        if not state.can_collapse(keep, remove):
            blocked.add((a, b, va, vb))
            continue
        state.collapse(keep, remove)
        alive -= 1
        if trace is not None:
            trace.append((cost, keep, remove))
        # validity of nearby collapses depends on the 1-ring, so refresh it
        ring = state.neighbours(keep)
        for u in ring:
            state.version[u] += 1
        touched = {keep} | ring
        seen = set()
        for u in touched:
            for w in state.neighbours(u):
                e = (min(u, w), max(u, w))
                if e not in seen:
                    seen.add(e)
                    push(*e)

    kept = np.flatnonzero(state.alive)
    remap = -np.ones(n, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    faces = []
    seen_faces = set()
    for fi, f in enumerate(state.faces):
        if not state.face_alive[fi] or len(set(f)) < 3:
            continue
        key = tuple(sorted(f))
        if key in seen_faces:
            continue
        seen_faces.add(key)
        faces.append([remap[v] for v in f])
    landmarks = [(name, int(remap[i])) for name, i in mesh.landmarks if remap[i] >= 0]
    coarse = TriangleMesh(mesh.vertices[kept], np.array(faces, dtype=np.int64), landmarks).validate()
    q_down = sp.csr_matrix((np.ones(kept.size), (np.arange(kept.size), kept)), shape=(kept.size, n))
    return coarse, canonical_csr(q_down)


def kept_indices(q_down) -> np.ndarray:
    q = sp.csr_matrix(q_down)
    return q.indices[q.indptr[:-1]].astype(np.int64)


def build_upsampling(fine: TriangleMesh, coarse: TriangleMesh, q_down) -> sp.csr_matrix:
    """Up-sampling matrix: one-hot rows for kept vertices, barycentric rows otherwise.

    A discarded fine vertex is projected onto the closest point of the
    coarse surface (exhaustive search over coarse faces, ties to the lowest
    face index) and expressed in barycentric weights of that face.
    """
    if coarse.n_vertices == 0 or coarse.n_faces == 0:
        raise EmptyCoarseMesh("coarse mesh has no faces")
    q_down = sp.csr_matrix(q_down)
    n1, n2 = fine.n_vertices, coarse.n_vertices
    if q_down.shape != (n2, n1):
        raise MeshError(f"q_down has shape {q_down.shape}, expected {(n2, n1)}")
    kept = kept_indices(q_down)
    coarse_of = -np.ones(n1, dtype=np.int64)
    coarse_of[kept] = np.arange(n2)
    rows, cols, vals = [kept], [np.arange(n2)], [np.ones(n2)]
    dropped = np.flatnonzero(coarse_of < 0)
    if dropped.size:
        tris = coarse.vertices[coarse.faces]
        face_idx, _, bary = closest_triangles(fine.vertices[dropped], tris)
        corners = coarse.faces[face_idx]
        for k in range(3):
            rows.append(dropped)
            cols.append(corners[:, k])
            vals.append(bary[:, k])
    q_up = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n1, n2)
    )
    return canonical_csr(q_up)


def build_pair(fine: TriangleMesh, target_count: int, seed: int = 0) -> SamplingPair:
    coarse, q_down = decimate_quadric(fine, target_count, seed)
    q_up = build_upsampling(fine, coarse, q_down)
    return SamplingPair(fine.n_vertices, coarse.n_vertices, q_down, q_up, coarse, kept_indices(q_down))


def build_hierarchy(mesh: TriangleMesh, factor: int = 4, depth: int = 1, seed: int = 0) -> MeshHierarchy:
    """Repeated decimation by ``factor``; level ``k + 1`` has ``ceil(N_k / factor)`` vertices."""
    if factor < 2:
        raise ValueError("sampling factor must be >= 2")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    sizes = [mesh.n_vertices]
    for _ in range(depth):
        sizes.append(math.ceil(sizes[-1] / factor))
    if sizes[-1] < 4:
        raise TargetUnreachable(f"coarsest level would have {sizes[-1]} < 4 vertices")
    levels = [mesh]
    pairs = []
    for k in range(depth):
        pair = build_pair(levels[-1], sizes[k + 1], seed)
        pairs.append(pair)
        levels.append(pair.coarse_mesh)
    laplacians = tuple(mesh_laplacian(m) for m in levels)
    return MeshHierarchy(tuple(levels), tuple(pairs), laplacians)


def hierarchy_from_parts(levels, q_downs, q_ups, laplacians) -> MeshHierarchy:
    """Rebuild a hierarchy from stored matrices (no re-decimation)."""
    pairs = []
    for k, (qd, qu) in enumerate(zip(q_downs, q_ups)):
        qd = canonical_csr(qd)
        pairs.append(SamplingPair(levels[k].n_vertices, levels[k + 1].n_vertices, qd,
                                  canonical_csr(qu), levels[k + 1], kept_indices(qd)))
    return MeshHierarchy(tuple(levels), tuple(pairs), tuple(laplacians))


def roundtrip_error(mesh: TriangleMesh, pair: SamplingPair) -> float:
    """Mean vertex distance between ``s`` and ``Q_u Q_d s``."""
    rec = pair.q_up @ (pair.q_down @ mesh.vertices)
    return float(np.linalg.norm(rec - mesh.vertices, axis=1).mean())


__all__ = [
    "SamplingPair",
    "MeshHierarchy",
    "ScaledLaplacian",
    "decimate_quadric",
    "build_upsampling",
    "build_pair",
    "build_hierarchy",
    "hierarchy_from_parts",
    "roundtrip_error",
    "vertex_quadrics",
    "face_quadrics",
    "quadric_error",
]
