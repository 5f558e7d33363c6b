"""Planar geometry primitives shared by ingest and visibility.

All routines work on local metric coordinates (x east, y north) and are
vectorized over numpy arrays where it matters.
"""
from __future__ import annotations

import math

import numpy as np

# Relative tolerance for orientation tests; cross products smaller than
# EPS * |u| * |v| are treated as collinear.
EPS = 1e-10


def ring_array(ring) -> np.ndarray:
    """Return an open (n, 2) float array for a ring given closed or open."""
    arr = np.asarray(ring, dtype=float)
    if len(arr) > 1 and np.array_equal(arr[0], arr[-1]):
        arr = arr[:-1]
    return arr


def ring_edges(ring: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points of every edge of an open ring."""
    return ring, np.roll(ring, -1, axis=0)


def polygon_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def point_in_ring(pt, ring: np.ndarray) -> bool:
    """Even-odd crossing test. Points exactly on the boundary are unspecified."""
    px, py = float(pt[0]), float(pt[1])
    a, b = ring_edges(ring)
    ya, yb = a[:, 1], b[:, 1]
    straddle = (ya > py) != (yb > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[:, 0] + (py - ya) * (b[:, 0] - a[:, 0]) / (yb - ya)
    return bool(np.count_nonzero(straddle & (px < xint)) % 2)


def points_in_ring(pts: np.ndarray, ring: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    a, b = ring_edges(ring)
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    ya, yb = a[None, :, 1], b[None, :, 1]
    straddle = (ya > py) != (yb > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[None, :, 0] + (py - ya) * (b[None, :, 0] - a[None, :, 0]) / (yb - ya)
    return (np.count_nonzero(straddle & (px < xint), axis=1) % 2).astype(bool)


def point_segment_distance(p, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from point p to each segment a[i]-b[i]."""
    p = np.asarray(p, dtype=float)
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dd > 0, np.einsum("ij,ij->i", p - a, d) / dd, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.hypot(closest[:, 0] - p[0], closest[:, 1] - p[1])


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def proper_intersections(p0: np.ndarray, p1: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise strict-interior intersection matrix.

    ``p0, p1`` are (N, 2) segment endpoints, ``a, b`` are (M, 2). Entry
    [i, j] is True when segment i and segment j cross at a single point
    interior to both. Touching at an endpoint, grazing a vertex and
    collinear overlap all count as no intersection.
    """
    p0 = np.asarray(p0, dtype=float).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 2)
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    rx = (p1[:, 0] - p0[:, 0])[:, None]
    ry = (p1[:, 1] - p0[:, 1])[:, None]
    sx = (b[:, 0] - a[:, 0])[None, :]
    sy = (b[:, 1] - a[:, 1])[None, :]
    rlen = np.hypot(rx, ry)
    slen = np.hypot(sx, sy)

    # orientation of edge endpoints relative to the query segment
    ax_ = a[None, :, 0] - p0[:, 0:1]
    ay_ = a[None, :, 1] - p0[:, 1:2]
    bx_ = b[None, :, 0] - p0[:, 0:1]
    by_ = b[None, :, 1] - p0[:, 1:2]
    d1 = _cross(rx, ry, ax_, ay_)
    d2 = _cross(rx, ry, bx_, by_)
    tol1 = EPS * rlen * np.maximum(np.hypot(ax_, ay_), np.hypot(bx_, by_))
    s1 = np.where(np.abs(d1) <= tol1, 0, np.sign(d1))
    s2 = np.where(np.abs(d2) <= tol1, 0, np.sign(d2))

    # orientation of query endpoints relative to each edge
    cx0 = p0[:, 0:1] - a[None, :, 0]
    cy0 = p0[:, 1:2] - a[None, :, 1]
    cx1 = p1[:, 0:1] - a[None, :, 0]
    cy1 = p1[:, 1:2] - a[None, :, 1]
    d3 = _cross(sx, sy, cx0, cy0)
    d4 = _cross(sx, sy, cx1, cy1)
    tol2 = EPS * slen * np.maximum(np.hypot(cx0, cy0), np.hypot(cx1, cy1))
    s3 = np.where(np.abs(d3) <= tol2, 0, np.sign(d3))
    s4 = np.where(np.abs(d4) <= tol2, 0, np.sign(d4))

    return (s1 * s2 < 0) & (s3 * s4 < 0)


def ray_segment_hits(origin, angle_rad: float, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Intersect a ray with segments.

    The angle is an azimuth: measured clockwise from +y (north). Returns
    ``(t, u)`` where t is the distance along the ray and u the parameter
    along each segment; non-hits get t = inf.
    """
    ox, oy = float(origin[0]), float(origin[1])
    dx, dy = math.sin(angle_rad), math.cos(angle_rad)
    ex = b[:, 0] - a[:, 0]
    ey = b[:, 1] - a[:, 1]
    wx = a[:, 0] - ox
    wy = a[:, 1] - oy
    denom = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wx * ey - wy * ex) / denom
        u = (wx * dy - wy * dx) / denom
    ok = (np.abs(denom) > 1e-15) & (t > 0) & (u >= 0) & (u <= 1)
    return np.where(ok, t, np.inf), u


def azimuth_deg(dx, dy):
    """Compass bearing of a displacement, degrees clockwise from north in [0, 360)."""
    return np.mod(np.degrees(np.arctan2(dx, dy)), 360.0)


def ring_self_intersects(ring: np.ndarray) -> bool:
    """True when two non-adjacent edges of an open ring touch or cross."""
    a, b = ring_edges(ring)
    n = len(a)
    if n < 4:
        return False
    hit = proper_intersections(a, b, a, b)
    # also catch non-adjacent edges sharing a point (figure-eight through a vertex)
    idx = np.arange(n)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) | (
        np.abs(idx[:, None] - idx[None, :]) == n - 1
    )
    hit &= ~adjacent
    if hit.any():
        return True
    verts = ring
    for i in range(n):
        d = point_segment_distance(verts[i], a, b)
        mask = (idx != i) & (idx != (i - 1) % n)
        if np.any(d[mask] < 1e-12):
            return True
    return False
