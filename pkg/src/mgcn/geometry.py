"""Closest-point queries against triangles."""

import numpy as np


def closest_point_barycentric(p, a, b, c):
    """Closest point on triangle(s) ``abc`` to point(s) ``p``.

    All arguments broadcast against each other with a trailing axis of 3.
    Returns barycentric weights ``(wa, wb, wc)`` of the closest point,
    clamped to the triangle (vertex, edge or interior region). Degenerate
    triangles fall back to their closest edge.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    shape = p.shape[:-1]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)

    wa = np.zeros(shape)
    wb = np.zeros(shape)
    wc = np.zeros(shape)
    done = np.zeros(shape, dtype=bool)

    def assign(mask, ua, ub, uc):
        nonlocal done
        m = mask & ~done
        wa[m], wb[m], wc[m] = ua[m], ub[m], uc[m]
        done |= m

    one, zero = np.ones(shape), np.zeros(shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        # vertex regions
        assign((d1 <= 0) & (d2 <= 0), one, zero, zero)
        assign((d3 >= 0) & (d4 <= d3), zero, one, zero)
        assign((d6 >= 0) & (d5 <= d6), zero, zero, one)
        # edge regions
        vc = d1 * d4 - d3 * d2
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        vb = d5 * d2 - d1 * d6
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        va = d3 * d6 - d5 * d4
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        # interior
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        interior = ~done & np.isfinite(v) & np.isfinite(w) & (denom > 0)
        assign(interior, 1 - v - w, v, w)

    if not done.all():
        # degenerate triangles: best of the three edges
        rest = ~done
        best = np.full(shape, np.inf)
        for (x, y, ix, iy) in ((a, b, 0, 1), (b, c, 1, 2), (a, c, 0, 2)):
            e = y - x
            ee = np.einsum("...i,...i", e, e)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.clip(np.einsum("...i,...i", p - x, e) / ee, 0.0, 1.0)
            t = np.where(ee > 0, t, 0.0)
            q = x + t[..., None] * e
            dist = np.linalg.norm(p - q, axis=-1)
            better = rest & (dist < best)
            best = np.where(better, dist, best)
            ws = [wa, wb, wc]
            for k in range(3):
                ws[k][better] = 0.0
            ws[ix][better] = (1 - t)[better]
            ws[iy][better] = t[better]
    return wa, wb, wc


def closest_point_on_triangle(p, a, b, c):
    wa, wb, wc = closest_point_barycentric(p, a, b, c)
    a, b, c = (np.asarray(x, dtype=np.float64) for x in (a, b, c))
    return wa[..., None] * a + wb[..., None] * b + wc[..., None] * c


def point_triangle_distance(p, a, b, c):
    q = closest_point_on_triangle(p, a, b, c)
    return np.linalg.norm(np.asarray(p, dtype=np.float64) - q, axis=-1)


def closest_triangles(points, tri_vertices, chunk=256):
    """For each point, the index of the nearest triangle, its distance and barycentrics.

    ``tri_vertices`` is ``(T, 3, 3)``. Ties pick the lowest triangle index.
    """
    points = np.asarray(points, dtype=np.float64)
    a, b, c = tri_vertices[:, 0], tri_vertices[:, 1], tri_vertices[:, 2]
    n = points.shape[0]
    index = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    bary = np.empty((n, 3))
    for start in range(0, n, chunk):
        p = points[start:start + chunk, None, :]
        wa, wb, wc = closest_point_barycentric(p, a[None], b[None], c[None])
        q = wa[..., None] * a[None] + wb[..., None] * b[None] + wc[..., None] * c[None]
        d = np.linalg.norm(p - q, axis=-1)
        j = np.argmin(d, axis=1)
        rows = np.arange(j.size)
        index[start:start + chunk] = j
        dist[start:start + chunk] = d[rows, j]
        bary[start:start + chunk] = np.column_stack([wa[rows, j], wb[rows, j], wc[rows, j]])
    return index, dist, bary
