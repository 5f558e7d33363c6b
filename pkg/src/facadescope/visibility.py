"""Isovist analysis between camera points and building footprints.

Lines of sight run from a camera to points sampled along each target
building's perimeter. A sight line is blocked when it crosses the
interior of any footprint edge (including the target's own nearer walls).
The visible part of the perimeter maps to angular intervals around the
camera; the widest contiguous interval is the building's angle of view.

Sampling alone quantizes the occlusion boundaries to the sample spacing,
so two refinements are applied: extra samples are placed on the rays
through every nearby footprint vertex, and each visible/hidden transition
between neighbouring samples is located by bisection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from facadescope import geometry
from facadescope.ingest import BuildingFootprint, ImageMeta, LocalFrame, to_local

DEFAULT_RADIUS_M = 50.0
DEFAULT_SPACING_M = 0.5

# angular offset either side of a critical vertex ray
_CRITICAL_DELTA = 1e-7
_BISECT_STEPS = 40
_MERGE_EPS_DEG = 1e-7


class CameraInsideBuilding(ValueError):
    pass


@dataclass(frozen=True)
class AOVResult:
    image_id: str
    building_id: str
    aov_deg: float
    left_azimuth_deg: float
    right_azimuth_deg: float
    distance_m: float
    camera_xy: tuple[float, float] | None = None

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "building_id": self.building_id,
            "aov_deg": self.aov_deg,
            "left_azimuth_deg": self.left_azimuth_deg,
            "right_azimuth_deg": self.right_azimuth_deg,
            "distance_m": self.distance_m,
        }


@dataclass(frozen=True)
class CandidateView:
    result: AOVResult
    aov_ok: bool
    distance_ok: bool
    unique: bool
    reasons: tuple[str, ...] = field(default=())

    @property
    def accepted(self) -> bool:
        return not self.reasons

    def to_record(self) -> dict:
        rec = self.result.to_record()
        rec["accepted"] = self.accepted
        rec["reject_reasons"] = list(self.reasons)
        return rec


# ----------------------------------------------------------------------------
# perimeter sampling


def _perimeter_samples(ring: np.ndarray, spacing_m: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample an open ring. Returns points and their perimeter parameter
    (edge index + fraction along the edge)."""
    a, b = geometry.ring_edges(ring)
    lengths = np.hypot(*(b - a).T)
    if lengths.sum() <= 0:
        raise ValueError("degenerate polygon with zero perimeter")
    pts, params = [], []
    for k, (p, q, length) in enumerate(zip(a, b, lengths)):
        if length == 0:
            continue
        n = max(1, math.ceil(length / spacing_m - 1e-9))
        u = np.arange(n) / n
        pts.append(p + u[:, None] * (q - p))
        params.append(k + u)
    return np.concatenate(pts), np.concatenate(params)


def sample_perimeter(footprint: BuildingFootprint, frame: LocalFrame, spacing_m: float = DEFAULT_SPACING_M):
    """Points along the exterior ring, every vertex included, no gap wider
    than ``spacing_m``. Order follows the ring."""
    if not spacing_m > 0:
        raise ValueError("spacing_m must be positive")
    ring = to_local(frame, geometry.ring_array(footprint.exterior))
    pts, _ = _perimeter_samples(ring, spacing_m)
    return [tuple(p) for p in pts]


# ----------------------------------------------------------------------------
# spatial index


class SpatialIndex:
    """Uniform-grid index over footprint rings in a local frame.

    Immutable after construction. Queries return footprint ids in
    insertion order, matching a linear scan exactly.
    """

    def __init__(self, footprints: Sequence[BuildingFootprint], frame: LocalFrame, cell_m: float = 25.0):
        if not footprints:
            raise ValueError("no footprints to index")
        self.frame = frame
        self.cell = float(cell_m)
        self.ids = [fp.id for fp in footprints]
        self.footprints = list(footprints)
        self._pos = {fid: i for i, fid in enumerate(self.ids)}
        self.rings = [to_local(frame, geometry.ring_array(fp.exterior)) for fp in footprints]
        self.bboxes = np.array([[r[:, 0].min(), r[:, 1].min(), r[:, 0].max(), r[:, 1].max()] for r in self.rings])
        starts, ends, owner = [], [], []
        for i, r in enumerate(self.rings):
            a, b = geometry.ring_edges(r)
            starts.append(a)
            ends.append(b)
            owner.append(np.full(len(a), i))
        self.edge_a = np.concatenate(starts)
        self.edge_b = np.concatenate(ends)
        self.edge_owner = np.concatenate(owner)
        self._grid: dict[tuple[int, int], list[int]] = {}
        for i, (x0, y0, x1, y1) in enumerate(self.bboxes):
            for gx in range(self._c(x0), self._c(x1) + 1):
                for gy in range(self._c(y0), self._c(y1) + 1):
                    self._grid.setdefault((gx, gy), []).append(i)

    def _c(self, v: float) -> int:
        return int(math.floor(v / self.cell))

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, building_id: str) -> int:
        return self._pos[building_id]

    def _bbox_candidates(self, x0, y0, x1, y1) -> list[int]:
        found = set()
        for gx in range(self._c(x0), self._c(x1) + 1):
            for gy in range(self._c(y0), self._c(y1) + 1):
                found.update(self._grid.get((gx, gy), ()))
        return sorted(found)

    def _disc_hit(self, i: int, center, r: float) -> bool:
        x0, y0, x1, y1 = self.bboxes[i]
        cx, cy = center
        dx = max(x0 - cx, 0.0, cx - x1)
        dy = max(y0 - cy, 0.0, cy - y1)
        if dx * dx + dy * dy > r * r:
            return False
        ring = self.rings[i]
        if geometry.point_in_ring(center, ring):
            return True
        a, b = geometry.ring_edges(ring)
        return bool(geometry.point_segment_distance(center, a, b).min() <= r)

    def query_disc_indices(self, center, r: float) -> list[int]:
        cx, cy = float(center[0]), float(center[1])
        cand = self._bbox_candidates(cx - r, cy - r, cx + r, cy + r)
        return [i for i in cand if self._disc_hit(i, (cx, cy), r)]

    def query_disc(self, center, r: float) -> list[str]:
        """Ids of footprints whose polygon intersects the closed disc."""
        return [self.ids[i] for i in self.query_disc_indices(center, r)]

    def query_segment(self, p, q) -> list[str]:
        """Ids of footprints whose boundary the segment p-q properly crosses."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        hits = []
        for i in self._bbox_candidates(lo[0], lo[1], hi[0], hi[1]):
            a, b = geometry.ring_edges(self.rings[i])
            if geometry.proper_intersections(p, q, a, b).any():
                hits.append(self.ids[i])
        return hits

    def edges_for(self, indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(sorted(indices), dtype=int)
        mask = np.isin(self.edge_owner, idx)
        return self.edge_a[mask], self.edge_b[mask], self.edge_owner[mask]


def build_spatial_index(footprints: Sequence[BuildingFootprint], frame: LocalFrame) -> SpatialIndex:
    return SpatialIndex(footprints, frame)


# ----------------------------------------------------------------------------
# angle of view


def _union_arcs(arcs: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Merge (start, width) arcs on the circle; widths in degrees."""
    if not arcs:
        return []
    arcs = sorted((s % 360.0, w) for s, w in arcs)
    merged: list[list[float]] = []
    for s, w in arcs:
        if merged and s <= merged[-1][0] + merged[-1][1] + _MERGE_EPS_DEG:
            end = max(merged[-1][0] + merged[-1][1], s + w)
            merged[-1][1] = end - merged[-1][0]
        else:
            merged.append([s, w])
    # wrap-around: the last arc may run past 360 into the first ones
    while len(merged) > 1:
        last_end = merged[-1][0] + merged[-1][1]
        first = merged[0]
        if last_end - 360.0 + _MERGE_EPS_DEG >= first[0]:
            end = max(last_end, first[0] + first[1] + 360.0)
            merged[-1][1] = end - merged[-1][0]
            merged.pop(0)
        else:
            break
    return [(s, min(w, 360.0)) for s, w in merged]


class _TargetView:
    """Visibility predicate for perimeter points of one target seen from one camera."""

    def __init__(self, cam, ring: np.ndarray, occ_a: np.ndarray, occ_b: np.ndarray, radius: float):
        # everything in camera-centred coordinates
        self.cam = np.asarray(cam, dtype=float)
        self.ring = ring - self.cam
        self.n = len(ring)
        self.ta, self.tb = geometry.ring_edges(self.ring)
        self.oa = occ_a - self.cam
        self.ob = occ_b - self.cam
        self.radius = radius

    def point(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k = np.floor(s).astype(int) % self.n
        u = s - np.floor(s)
        return self.ta[k] + u[:, None] * (self.tb[k] - self.ta[k])

    def visible(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts = self.point(s)
        zero = np.zeros_like(pts)
        dist = np.hypot(pts[:, 0], pts[:, 1])
        ok = dist <= self.radius
        if len(self.oa):
            ok &= ~geometry.proper_intersections(zero, pts, self.oa, self.ob).any(axis=1)
        own = geometry.proper_intersections(zero, pts, self.ta, self.tb)
        # a point never occludes itself through the edge(s) it lies on
        k = np.floor(s).astype(int) % self.n
        u = s - np.floor(s)
        rows = np.arange(len(s))
        own[rows, k] = False
        at_vertex = u < 1e-12
        own[rows[at_vertex], (k[at_vertex] - 1) % self.n] = False
        return ok & ~own.any(axis=1)


def _critical_params(view: _TargetView, vertices: np.ndarray) -> list[float]:
    """Perimeter parameters where rays through the given vertices hit the target."""
    out = []
    for v in vertices:
        if not np.any(v):
            continue
        base = math.atan2(v[0], v[1])
        for ang in (base - _CRITICAL_DELTA, base + _CRITICAL_DELTA):
            t, u = geometry.ray_segment_hits((0.0, 0.0), ang, view.ta, view.tb)
            for k in np.nonzero(np.isfinite(t))[0]:
                out.append(k + min(max(u[k], 0.0), 1.0 - 1e-15))
    return out


def _refine(view: _TargetView, s_lo: float, s_hi: float, vis_lo: bool) -> float:
    """Bisect between two perimeter parameters of differing visibility and
    return the visible-side end of the final bracket."""
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (s_lo + s_hi)
        if bool(view.visible(np.array([mid]))[0]) == vis_lo:
            s_lo = mid
        else:
            s_hi = mid
    return s_lo if vis_lo else s_hi


def compute_aov(
    camera,
    building: BuildingFootprint | str,
    index: SpatialIndex,
    radius_m: float = DEFAULT_RADIUS_M,
    spacing_m: float = DEFAULT_SPACING_M,
    image_id: str = "",
) -> AOVResult | None:
    """Widest unobstructed angular span from ``camera`` (local x, y) to a building.

    Returns None when the building is out of range or fully occluded.
    """
    if not radius_m > 0:
        raise ValueError("radius_m must be positive")
    if not spacing_m > 0:
        raise ValueError("spacing_m must be positive")
    bid = building if isinstance(building, str) else building.id
    ti = index.index_of(bid)
    cam = np.asarray(camera, dtype=float)
    ring = index.rings[ti]
    if geometry.point_in_ring(cam, ring):
        raise CameraInsideBuilding("camera inside building")

    near = index.query_disc_indices(cam, radius_m)
    if ti not in near:
        return None
    others = [i for i in near if i != ti]
    occ_a, occ_b, _ = index.edges_for(others)
    view = _TargetView(cam, ring, occ_a, occ_b, radius_m)

    _, params = _perimeter_samples(ring, spacing_m)
    vertices = np.concatenate([view.oa, view.ring]) if len(view.oa) else view.ring
    crit = _critical_params(view, vertices)
    if crit:
        params = np.unique(np.concatenate([params, np.asarray(crit)]))
    vis = view.visible(params)
    if not vis.any():
        return None

    # close every visible/hidden transition between neighbours
    n_par = len(params)
    extra = []
    for i in range(n_par):
        j = (i + 1) % n_par
        if vis[i] != vis[j]:
            s_hi = params[j] if j else params[j] + view.n
            s = _refine(view, params[i], s_hi, bool(vis[i]))
            extra.append((s % view.n, True))
    if extra:
        allp = np.concatenate([params, np.array([e[0] for e in extra])])
        allv = np.concatenate([vis, np.ones(len(extra), dtype=bool)])
        order = np.argsort(allp, kind="stable")
        params, vis = allp[order], allv[order]

    pts = view.point(params)
    az = geometry.azimuth_deg(pts[:, 0], pts[:, 1])
    dist = np.hypot(pts[:, 0], pts[:, 1])

    # split the circular sequence into runs of visible points
    if vis.all():
        runs = [np.arange(len(vis))]
    else:
        start = int(np.nonzero(~vis)[0][0])
        idx = np.roll(np.arange(len(vis)), -start)
        runs, cur = [], []
        for i in idx:
            if vis[i]:
                cur.append(i)
            elif cur:
                runs.append(np.array(cur))
                cur = []
        if cur:
            runs.append(np.array(cur))

    arcs = []
    for run in runs:
        steps = np.diff(az[run])
        steps = (steps + 180.0) % 360.0 - 180.0
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        lo, hi = cum.min(), cum.max()
        arcs.append(((az[run[0]] + lo) % 360.0, hi - lo))
    merged = _union_arcs(arcs)
    left, width = max(merged, key=lambda a: (a[1], -a[0]))
    if width <= 0:
        return None
    return AOVResult(
        image_id=image_id,
        building_id=bid,
        aov_deg=float(width),
        left_azimuth_deg=float(left % 360.0),
        right_azimuth_deg=float((left + width) % 360.0),
        distance_m=float(dist[vis].min()),
        camera_xy=(float(cam[0]), float(cam[1])),
    )


def analyze_image(
    image: ImageMeta,
    index: SpatialIndex,
    radius_m: float = DEFAULT_RADIUS_M,
    spacing_m: float = DEFAULT_SPACING_M,
) -> list[AOVResult]:
    """AOV results for every building within ``radius_m`` of one capture point."""
    cam = to_local(index.frame, image.position)
    out = []
    for i in index.query_disc_indices(cam, radius_m):
        if geometry.point_in_ring(cam, index.rings[i]):
            continue  # capture point inside a footprint (indoor pano or bad geometry)
        res = compute_aov(cam, index.ids[i], index, radius_m, spacing_m, image_id=image.id)
        if res is not None:
            out.append(res)
    return out


# ----------------------------------------------------------------------------
# candidate selection


def _ang_diff(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def select_candidates(
    results: Sequence[AOVResult],
    min_aov: float = 10.0,
    max_aov: float = 120.0,
    max_distance_m: float = DEFAULT_RADIUS_M,
    dup_azimuth_deg: float = 5.0,
    dup_distance_m: float = 5.0,
) -> list[CandidateView]:
    """Flag each AOV result as accepted or rejected.

    Duplicate perspectives of one building (both azimuth boundaries within
    ``dup_azimuth_deg`` and cameras within ``dup_distance_m`` of an already
    accepted view) keep only the larger-AOV view. Output order follows input.
    """
    verdicts: dict[int, CandidateView] = {}
    accepted_by_building: dict[str, list[AOVResult]] = {}
    order = sorted(range(len(results)), key=lambda i: (-results[i].aov_deg, results[i].image_id, i))
    for i in order:
        r = results[i]
        reasons = []
        aov_ok = True
        if r.aov_deg < min_aov:
            reasons.append("aov_too_small")
            aov_ok = False
        if r.aov_deg > max_aov:
            reasons.append("aov_too_large")
            aov_ok = False
        distance_ok = r.distance_m <= max_distance_m
        if not distance_ok:
            reasons.append("too_far")
        unique = True
        if not reasons:
            for prev in accepted_by_building.get(r.building_id, ()):
                if r.camera_xy is not None and prev.camera_xy is not None:
                    near = math.dist(r.camera_xy, prev.camera_xy) < dup_distance_m
                else:
                    near = True
                if (
                    near
                    and _ang_diff(r.left_azimuth_deg, prev.left_azimuth_deg) < dup_azimuth_deg
                    and _ang_diff(r.right_azimuth_deg, prev.right_azimuth_deg) < dup_azimuth_deg
                ):
                    unique = False
                    reasons.append("duplicate")
                    break
        if not reasons:
            accepted_by_building.setdefault(r.building_id, []).append(r)
        verdicts[i] = CandidateView(r, aov_ok, distance_ok, unique, tuple(reasons))
    return [verdicts[i] for i in range(len(results))]
