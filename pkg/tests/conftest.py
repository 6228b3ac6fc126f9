import numpy as np
import pytest
from scipy.spatial import ConvexHull

from mgcn.mesh import TriangleMesh, grid_mesh


def random_mesh(rng, max_vertices=50):
    """Random valid mesh: either a convex hull of sphere points or a jittered grid."""
    if rng.random() < 0.5:
        n = int(rng.integers(6, max_vertices + 1))
        pts = rng.normal(size=(n, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        hull = ConvexHull(pts)
        used = np.unique(hull.simplices)
        remap = -np.ones(n, dtype=int)
        remap[used] = np.arange(used.size)
        return TriangleMesh(pts[used], remap[hull.simplices]).validate()
    nx = int(rng.integers(2, 8))
    ny = int(rng.integers(2, max(3, max_vertices // nx) + 1))
    ny = min(ny, max_vertices // nx)
    m = grid_mesh(nx, max(ny, 2))
    return m.with_vertices(m.vertices + rng.normal(scale=0.1, size=m.vertices.shape))


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
