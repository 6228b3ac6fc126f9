import json

import numpy as np
import pytest
from scipy.optimize import linprog, minimize
from scipy.spatial.transform import Rotation

from mgcn.errors import DegenerateLandmarks, EmptyMask, EmptyMesh, ShapeMismatch
from mgcn.evaluation import (
    alignment_residual,
    bidirectional_error,
    error_colors,
    export_error_map,
    point_to_surface,
    procrustes_align,
    region_mask_from_landmarks,
)
from mgcn.mesh import TriangleMesh, grid_mesh, icosphere


def random_rigid(rng):
    return Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix(), rng.normal(scale=20, size=3)


# Procrustes --------------------------------------------------------------------


def test_identity_alignment(rng):
    s = rng.normal(size=(7, 3))
    t = procrustes_align(s, s)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)
    assert alignment_residual(t, s, s) < 1e-12


def test_recovers_known_transform(rng):
    for _ in range(20):
        s = rng.normal(scale=30, size=(int(rng.integers(3, 12)), 3))
        r0, t0 = random_rigid(rng)
        t = procrustes_align(s, s @ r0.T + t0)
        np.testing.assert_allclose(t.rotation, r0, atol=1e-10)
        np.testing.assert_allclose(t.translation, t0, atol=1e-10)
        np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-10)


def test_mirror_rejected(rng):
    s = rng.normal(size=(8, 3))
    t = procrustes_align(s, s * [1, 1, -1])
    assert np.linalg.det(t.rotation) == pytest.approx(1.0, abs=1e-10)
    assert alignment_residual(t, s, s * [1, 1, -1]) > 0.01


def test_residual_invariant_to_source_motion(rng):
    s = rng.normal(scale=10, size=(9, 3))
    target = s + rng.normal(scale=0.5, size=s.shape)
    base = alignment_residual(procrustes_align(s, target), s, target)
    for _ in range(10):
        r, t = random_rigid(rng)
        moved = s @ r.T + t
        assert abs(alignment_residual(procrustes_align(moved, target), moved, target) - base) < 1e-9


def test_similarity_recovers_scale(rng):
    s = rng.normal(size=(6, 3))
    r0, t0 = random_rigid(rng)
    t = procrustes_align(s, 2.5 * s @ r0.T + t0, similarity=True)
    assert t.scale == pytest.approx(2.5, abs=1e-10)
    np.testing.assert_allclose(t.rotation, r0, atol=1e-10)


@pytest.mark.parametrize("points", [
    [[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]],
    [[1, 2, 3]] * 4,
    [[0, 0, 0], [1, 0, 0]],
])
def test_degenerate_landmarks(points):
    with pytest.raises(DegenerateLandmarks):
        procrustes_align(points, points)


# point-to-surface -------------------------------------------------------------


def big_triangle():
    return TriangleMesh([[0, 0, 0], [30, 0, 0], [0, 30, 0]], [[0, 1, 2]])


def test_point_on_face_is_zero():
    assert point_to_surface([[5, 5, 0]], big_triangle())[0] == 0.0


def test_height_above_centroid():
    assert point_to_surface([[10, 10, 3.5]], big_triangle())[0] == pytest.approx(3.5, abs=1e-12)


def test_beyond_edge_is_segment_distance():
    # closest feature is the hypotenuse x + y = 30 between its endpoints
    p = np.array([20.0, 20.0, 1.0])
    foot = np.array([15.0, 15.0, 0.0])
    assert point_to_surface([p], big_triangle())[0] == pytest.approx(np.linalg.norm(p - foot), abs=1e-12)


def test_beyond_vertex():
    assert point_to_surface([[-3, -4, 0]], big_triangle())[0] == pytest.approx(5.0, abs=1e-12)


def lattice_samples(tri, m):
    """Barycentric lattice with (m+1)(m+2)/2 points, corners and edges included."""
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    u, v = i[keep] / m, j[keep] / m
    return tri[0] + u[:, None] * (tri[1] - tri[0]) + v[:, None] * (tri[2] - tri[0])


def test_sampling_oracle(rng):
    worst = 0.0
    for _ in range(200):
        tri = rng.normal(size=(3, 3))
        p = rng.normal(scale=1.5, size=3)
        samples = lattice_samples(tri, 446)  # about 10^5 samples
        sampled = np.linalg.norm(samples - p, axis=1).min()
        exact = point_to_surface([p], TriangleMesh(tri, [[0, 1, 2]]))[0]
        diag = np.linalg.norm(np.ptp(np.vstack([tri, p]), axis=0))
        assert exact <= sampled + 1e-12
        worst = max(worst, (sampled - exact) / diag)
    assert worst < 1e-3


def test_mesh_vertices_are_on_surface():
    m = icosphere(2, 10.0)
    np.testing.assert_allclose(point_to_surface(m.vertices, m), 0.0, atol=1e-12)


def test_empty_mesh():
    with pytest.raises(EmptyMesh):
        point_to_surface([[0, 0, 0]], TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3))))


# region masks -----------------------------------------------------------------


def in_hull_lp(points, p):
    """Hull membership as an LP feasibility problem."""
    n = len(points)
    a_eq = np.vstack([points.T, np.ones(n)])
    res = linprog(np.zeros(n), A_eq=a_eq, b_eq=np.append(p, 1.0), bounds=[(0, None)] * n, method="highs")
    return res.status == 0


def hull_distance_qp(points, p):
    """min |P^T l - p| over the probability simplex, by SLSQP."""
    n = len(points)
    res = minimize(lambda lam: np.sum((points.T @ lam - p) ** 2), np.full(n, 1.0 / n), method="SLSQP",
                   bounds=[(0, 1)] * n, constraints=[{"type": "eq", "fun": lambda lam: lam.sum() - 1}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    return float(np.sqrt(res.fun))


def test_full_mask_with_large_margin():
    m = icosphere(2, 50.0)
    mask = region_mask_from_landmarks(m, m.vertices[[0, 5, 9, 20]], margin=200.0)
    assert mask.selected.all()


def test_no_landmarks():
    with pytest.raises(DegenerateLandmarks):
        region_mask_from_landmarks(icosphere(1), np.zeros((0, 3)))


def test_collinear_landmarks():
    with pytest.raises(DegenerateLandmarks):
        region_mask_from_landmarks(icosphere(1), [[0, 0, 0], [1, 0, 0], [2, 0, 0]])


def test_equatorial_landmarks_zero_margin():
    m = icosphere(3, 50.0)
    eq = np.flatnonzero(np.abs(m.vertices[:, 2]) < 1e-9)
    landmarks = m.vertices[eq[::2]]
    mask = region_mask_from_landmarks(m, landmarks, margin=0.0)
    oracle = np.array([in_hull_lp(landmarks, v) for v in m.vertices])
    np.testing.assert_array_equal(mask.selected, oracle)


def test_mask_matches_hull_oracles(rng):
    m = icosphere(2, 50.0)
    for _ in range(5):
        idx = rng.choice(m.n_vertices, size=6, replace=False)
        landmarks = m.vertices[idx] * 0.9
        margin = float(rng.uniform(6, 15))
        mask = region_mask_from_landmarks(m, landmarks, margin=margin)
        dist = np.array([0.0 if in_hull_lp(landmarks, v) else hull_distance_qp(landmarks, v) for v in m.vertices])
        np.testing.assert_allclose(mask.hull_distance(m.vertices), dist, rtol=1e-5, atol=1e-5)
        clear = np.abs(dist - margin) > 1e-4
        np.testing.assert_array_equal(mask.selected[clear], (dist <= margin)[clear])


def test_mask_names_and_empty():
    m = icosphere(2, 50.0)
    m.landmarks = [("a", 0), ("b", 1), ("c", 2), ("d", 5)]
    mask = region_mask_from_landmarks(m, ["a", "b", "c", "d"], margin=1.0)
    assert mask.selected[[0, 1, 2, 5]].all()
    far = np.array([[500, 0, 0], [501, 0, 0], [500, 1, 0], [500, 0, 1.0]])
    with pytest.raises(EmptyMask):
        region_mask_from_landmarks(m, far, margin=1.0)


# reports ------------------------------------------------------------------------


def planar_patch():
    return grid_mesh(12, 12, 2.0)


def full_mask(mesh):
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    corners = np.array([[lo[0], lo[1], 0], [hi[0], lo[1], 0], [hi[0], hi[1], 0], [lo[0], hi[1], 0]])
    return region_mask_from_landmarks(mesh, corners, margin=5.0)


def test_self_comparison_zero():
    m = planar_patch()
    r = bidirectional_error(m, m, full_mask(m))
    assert r.combined == 0.0 and r.stats["max"] == 0.0


def test_shifted_plane_error_equals_shift():
    m = planar_patch()
    shifted = m.with_vertices(m.vertices + [0, 0, 1.0])
    r = bidirectional_error(m, shifted, full_mask(m))
    assert abs(r.combined - 1.0) < 1e-9
    assert abs(r.recon_to_scan - 1.0) < 1e-9 and abs(r.scan_to_recon - 1.0) < 1e-9


def test_perturbation_bounds_error(rng):
    m = icosphere(2, 40.0)
    eps = 0.3
    d = rng.normal(size=m.vertices.shape)
    d *= (eps * rng.uniform(0, 1, size=(m.n_vertices, 1))) / np.linalg.norm(d, axis=1, keepdims=True)
    other = m.with_vertices(m.vertices + d)
    mask = region_mask_from_landmarks(m, m.vertices[[0, 3, 7, 11]], margin=100.0)
    assert bidirectional_error(m, other, mask).combined <= eps


def test_combined_symmetric(rng):
    m = icosphere(2, 40.0)
    other = m.with_vertices(m.vertices + rng.normal(scale=0.5, size=m.vertices.shape))
    mask = region_mask_from_landmarks(m, m.vertices[[0, 3, 7, 11, 20]], margin=8.0)
    ab = bidirectional_error(m, other, mask).combined
    ba = bidirectional_error(other, m, mask).combined
    assert ab == pytest.approx(ba, abs=1e-12)


def test_report_json_and_nan_outside_mask():
    m = icosphere(2, 40.0)
    mask = region_mask_from_landmarks(m, m.vertices[[0, 3, 7, 11]], margin=2.0)
    r = bidirectional_error(m, m, mask, {"id": "x"})
    assert np.isnan(r.per_vertex[~mask.selected]).all()
    data = json.loads(json.dumps(r.to_json()))
    assert data["metadata"]["id"] == "x"
    assert sum(data["histogram"]["counts"]) == mask.count


def test_mask_length_mismatch():
    m = icosphere(2, 40.0)
    mask = region_mask_from_landmarks(m, m.vertices[[0, 3, 7, 11]], margin=2.0)
    with pytest.raises(ShapeMismatch):
        bidirectional_error(icosphere(1, 40.0), m, mask)


# error maps -------------------------------------------------------------------


def test_ramp_endpoints_and_midpoint():
    rgb = error_colors(np.array([0.0, 5.0, 2.5, 10.0, np.nan]), cap=5.0)
    np.testing.assert_array_equal(rgb[0], [0, 0, 255])
    np.testing.assert_array_equal(rgb[1], [255, 0, 0])
    np.testing.assert_array_equal(rgb[2], [128, 0, 128])  # 127.5 rounds half up
    np.testing.assert_array_equal(rgb[3], [255, 0, 0])
    np.testing.assert_array_equal(rgb[4], [128, 128, 128])


def test_export_error_map(tmp_path):
    m = icosphere(1, 10.0)
    errors = np.linspace(0, 6, m.n_vertices)
    sidecar = export_error_map(m, errors, tmp_path / "map.ply", cap=5.0)
    lines = (tmp_path / "map.ply").read_text().splitlines()
    start = lines.index("end_header") + 1
    colors = np.array([[int(t) for t in line.split()[3:6]] for line in lines[start:start + m.n_vertices]])
    np.testing.assert_array_equal(colors, error_colors(errors, 5.0))
    raw = json.loads(sidecar.read_text())
    np.testing.assert_allclose(raw["errors"], errors)


def test_export_error_map_length():
    with pytest.raises(ShapeMismatch):
        export_error_map(icosphere(1), np.zeros(3), "/tmp/never.ply")
