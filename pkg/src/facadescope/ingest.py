"""Street-level image metadata and building footprint ingestion.

Image metadata arrives as line-delimited JSON using Mapillary field names;
footprints arrive as a GeoJSON FeatureCollection. Everything downstream
works in a :class:`LocalFrame`, an equirectangular tangent approximation
centred on the data.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from shapely import STRtree
from shapely.geometry import Polygon

from facadescope import geometry

log = logging.getLogger(__name__)

METERS_PER_DEG = 111320.0

# Tag values that mark a footprint as roof-only or underground.
EXTRANEOUS_BUILDING_VALUES = frozenset({"roof", "underground", "carport_roof"})


class IngestError(ValueError):
    """Fatal ingestion failure (the whole stream or document is unusable)."""


@dataclass(frozen=True)
class RecordError:
    """One rejected input record. ``line`` is 1-based; features use their index."""

    line: int
    message: str
    record_id: str | None = None


@dataclass(frozen=True)
class ImageMeta:
    id: str
    position: tuple[float, float]  # (lon, lat)
    compass_deg: float
    captured_at: int = 0
    quality_score: float = 1.0
    is_pano: bool = False

    @property
    def lon(self) -> float:
        return self.position[0]

    @property
    def lat(self) -> float:
        return self.position[1]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "computed_geometry": {"type": "Point", "coordinates": list(self.position)},
            "computed_compass_angle": self.compass_deg,
            "captured_at": self.captured_at,
            "quality_score": self.quality_score,
            "is_pano": self.is_pano,
        }


@dataclass(frozen=True)
class BuildingFootprint:
    id: str
    exterior: tuple[tuple[float, float], ...]
    holes: tuple[tuple[tuple[float, float], ...], ...] = ()
    tags: Mapping[str, str] = field(default_factory=dict)

    @property
    def levels(self) -> int | None:
        return _parse_levels(self.tags.get("building:levels"))

    @property
    def start_year(self) -> int | None:
        return leading_year(self.tags.get("start_date"))

    def attribute_count(self) -> int:
        return sum(1 for v in self.tags.values() if v not in (None, ""))


@dataclass(frozen=True)
class LocalFrame:
    origin: tuple[float, float]
    meters_per_deg_lon: float
    meters_per_deg_lat: float


# ----------------------------------------------------------------------------
# local frame


def make_local_frame(origin: tuple[float, float]) -> LocalFrame:
    lon0, lat0 = float(origin[0]), float(origin[1])
    if not abs(lat0) < 89.0:
        raise ValueError(f"polar origin latitude {lat0} not supported")
    return LocalFrame(
        origin=(lon0, lat0),
        meters_per_deg_lon=math.cos(math.radians(lat0)) * METERS_PER_DEG,
        meters_per_deg_lat=METERS_PER_DEG,
    )


def frame_for_points(points: Iterable[tuple[float, float]]) -> LocalFrame:
    """Frame centred on the bounding-box centre of the given lon/lat points."""
    arr = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("cannot build a frame from no points")
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    return make_local_frame(((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0))


def to_local(frame: LocalFrame, p) -> tuple[float, float] | np.ndarray:
    """(lon, lat) to (x east, y north) metres. Accepts a pair or an (n, 2) array."""
    arr = np.asarray(p, dtype=float)
    x = (arr[..., 0] - frame.origin[0]) * frame.meters_per_deg_lon
    y = (arr[..., 1] - frame.origin[1]) * frame.meters_per_deg_lat
    if arr.ndim == 1:
        return float(x), float(y)
    return np.stack([x, y], axis=-1)


def from_local(frame: LocalFrame, p) -> tuple[float, float] | np.ndarray:
    arr = np.asarray(p, dtype=float)
    lon = frame.origin[0] + arr[..., 0] / frame.meters_per_deg_lon
    lat = frame.origin[1] + arr[..., 1] / frame.meters_per_deg_lat
    if arr.ndim == 1:
        return float(lon), float(lat)
    return np.stack([lon, lat], axis=-1)


# ----------------------------------------------------------------------------
# image metadata


def _first(rec: Mapping, *keys):
    for k in keys:
        if k in rec and rec[k] is not None:
            return rec[k]
    return None


def _parse_image_record(rec: Mapping) -> ImageMeta:
    if not isinstance(rec, Mapping):
        raise ValueError("record is not an object")
    image_id = _first(rec, "id")
    if image_id is None or str(image_id) == "":
        raise ValueError("missing id")

    geom = _first(rec, "computed_geometry", "geometry")
    if geom is not None:
        try:
            lon, lat = geom["coordinates"][:2]
        except (KeyError, TypeError, ValueError):
            raise ValueError("malformed geometry") from None
    else:
        lon, lat = _first(rec, "lon", "lng", "longitude"), _first(rec, "lat", "latitude")
        if lon is None or lat is None:
            raise ValueError("missing position")
    lon, lat = float(lon), float(lat)
    if not (math.isfinite(lon) and -180.0 <= lon <= 180.0):
        raise ValueError(f"longitude out of range: {lon}")
    if not (math.isfinite(lat) and -90.0 <= lat <= 90.0):
        raise ValueError(f"latitude out of range: {lat}")

    compass = _first(rec, "computed_compass_angle", "compass_angle", "compass")
    if compass is None:
        raise ValueError("missing compass")
    compass = float(compass)
    if not math.isfinite(compass):
        raise ValueError("non-finite compass")
    compass = compass % 360.0

    quality = _first(rec, "quality_score", "quality")
    quality = 1.0 if quality is None else float(quality)
    if not 0.0 <= quality <= 1.0:
        raise ValueError(f"quality_score out of range: {quality}")

    captured = _first(rec, "captured_at")
    pano = _first(rec, "is_pano", "pano")
    return ImageMeta(
        id=str(image_id),
        position=(lon, lat),
        compass_deg=compass,
        captured_at=int(captured) if captured is not None else 0,
        quality_score=quality,
        is_pano=bool(pano) if pano is not None else False,
    )


def parse_image_metadata(stream: Iterable) -> tuple[list[ImageMeta], list[RecordError]]:
    """Parse line-delimited image records.

    Bad lines are reported in the returned error list and parsing continues.
    A stream that cannot be read or decoded at all raises :class:`IngestError`.
    """
    images: list[ImageMeta] = []
    errors: list[RecordError] = []
    try:
        for lineno, raw in enumerate(stream, start=1):
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(RecordError(lineno, f"malformed record: {exc.msg}"))
                continue
            try:
                images.append(_parse_image_record(rec))
            except (ValueError, TypeError) as exc:
                rid = rec.get("id") if isinstance(rec, Mapping) else None
                errors.append(RecordError(lineno, str(exc), None if rid is None else str(rid)))
    except (UnicodeDecodeError, OSError) as exc:
        raise IngestError(f"cannot read image metadata stream: {exc}") from exc
    return images, errors


def _dedup_key(img: ImageMeta):
    # best first: quality desc, recency desc, id asc
    return (-img.quality_score, -img.captured_at, img.id)


def filter_image_metadata(
    images: Sequence[ImageMeta],
    area,
    min_quality: float = 0.0,
    dedup_radius_m: float = 1.0,
) -> list[ImageMeta]:
    """Keep panoramas inside ``area`` (a lon/lat ring) that meet the quality floor,
    collapsing captures closer than ``dedup_radius_m`` to the best one."""
    if dedup_radius_m < 0:
        raise ValueError("dedup_radius_m must be >= 0")
    if not 0.0 <= min_quality <= 1.0:
        raise ValueError("min_quality must be in [0, 1]")
    ring = geometry.ring_array(area) if area is not None else np.empty((0, 2))
    if len(ring) < 3 or abs(geometry.polygon_area(ring)) == 0.0:
        raise ValueError("empty area polygon")

    frame = frame_for_points(ring)
    ring_local = to_local(frame, ring)
    candidates = [im for im in images if im.is_pano and im.quality_score >= min_quality]
    if not candidates:
        return []
    pts = to_local(frame, np.array([im.position for im in candidates]))
    inside = geometry.points_in_ring(pts, ring_local)
    pool = sorted(
        ((im, tuple(p)) for im, p, ok in zip(candidates, pts, inside) if ok),
        key=lambda t: _dedup_key(t[0]),
    )

    # greedy suppression on a hash grid; survivors are pairwise > radius apart
    cell = max(dedup_radius_m, 1e-6)
    grid: dict[tuple[int, int], list[tuple[float, float]]] = {}
    kept: list[ImageMeta] = []
    for im, (x, y) in pool:
        cx, cy = int(math.floor(x / cell)), int(math.floor(y / cell))
        clash = False
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for qx, qy in grid.get((gx, gy), ()):
                    if math.hypot(x - qx, y - qy) <= dedup_radius_m:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if clash:
            continue
        grid.setdefault((cx, cy), []).append((x, y))
        kept.append(im)
    order = {im.id: i for i, im in enumerate(images)}
    kept.sort(key=lambda im: order.get(im.id, 0))
    return kept


# ----------------------------------------------------------------------------
# footprints

_YEAR_RE = re.compile(r"^\s*~?\s*(?:c\.\s*)?(\d{4})")


def leading_year(value) -> int | None:
    """Year from a start_date-like string: the leading 4-digit group."""
    if value is None:
        return None
    m = _YEAR_RE.match(str(value))
    return int(m.group(1)) if m else None


def _parse_levels(value) -> int | None:
    if value is None or str(value).strip() == "":
        return None
    v = float(str(value).strip())
    if not v.is_integer():
        raise ValueError(f"non-integer levels {value!r}")
    return int(v)


def _validate_tags(tags: Mapping[str, str]) -> None:
    if "building:levels" in tags:
        try:
            lv = _parse_levels(tags["building:levels"])
        except ValueError:
            lv = None  # unparseable: left for label assembly to warn about
        if lv is not None and lv < 0:
            raise ValueError(f"invalid levels {tags['building:levels']!r}")
    year = leading_year(tags.get("start_date"))
    if year is not None and not 1000 <= year <= _dt.date.today().year:
        raise ValueError(f"invalid start_date {tags['start_date']!r}")


def _clean_ring(coords, label: str, warnings: list[str]) -> tuple[tuple[float, float], ...]:
    pts = []
    for c in coords:
        lon, lat = float(c[0]), float(c[1])
        if not (math.isfinite(lon) and math.isfinite(lat) and -180 <= lon <= 180 and -90 <= lat <= 90):
            raise ValueError(f"invalid coordinate ({c[0]}, {c[1]})")
        pts.append((lon, lat))
    if pts and pts[0] != pts[-1]:
        warnings.append(f"{label}: ring not closed, closing it")
        pts.append(pts[0])
    if len(pts) < 4:
        raise ValueError(f"ring has {len(pts)} vertices, need at least 4")
    return tuple(pts)


def parse_footprints(document) -> tuple[list[BuildingFootprint], list[RecordError]]:
    """Footprints from a GeoJSON FeatureCollection (dict or JSON text).

    Multipolygons are split into one footprint per part with ids ``<id>#k``.
    Non-polygon features are skipped with a log warning; invalid features
    are reported in the error list.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise IngestError(f"footprint document is not JSON: {exc}") from exc
    if not isinstance(document, Mapping) or document.get("type") != "FeatureCollection":
        raise IngestError("footprint document is not a FeatureCollection")

    out: list[BuildingFootprint] = []
    errors: list[RecordError] = []
    for idx, feat in enumerate(document.get("features", [])):
        props = dict(feat.get("properties") or {})
        fid = feat.get("id", props.get("@id", props.get("id", idx)))
        fid = str(fid)
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            parts = [geom.get("coordinates") or []]
        elif gtype == "MultiPolygon":
            parts = geom.get("coordinates") or []
        else:
            log.warning("feature %s: skipping non-polygon geometry %s", fid, gtype)
            continue
        tags = {str(k): str(v) for k, v in props.items() if v is not None}
        warnings: list[str] = []
        try:
            _validate_tags(tags)
            built = []
            for k, rings in enumerate(parts):
                if not rings:
                    raise ValueError("empty polygon")
                ext = _clean_ring(rings[0], fid, warnings)
                if geometry.ring_self_intersects(geometry.ring_array(ext)):
                    raise ValueError("self-intersecting exterior ring")
                holes = tuple(_clean_ring(r, fid, warnings) for r in rings[1:])
                part_id = fid if gtype == "Polygon" else f"{fid}#{k}"
                built.append(BuildingFootprint(part_id, ext, holes, tags))
        except (ValueError, TypeError, IndexError) as exc:
            errors.append(RecordError(idx, str(exc), fid))
            continue
        for w in warnings:
            log.warning(w)
        out.extend(built)
    return out, errors


def serialize_footprints(footprints: Iterable[BuildingFootprint]) -> dict:
    """FeatureCollection with one Polygon feature per footprint."""
    feats = []
    for fp in footprints:
        feats.append(
            {
                "type": "Feature",
                "id": fp.id,
                "properties": dict(fp.tags),
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[list(p) for p in fp.exterior]]
                    + [[list(p) for p in h] for h in fp.holes],
                },
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def is_extraneous(fp: BuildingFootprint) -> bool:
    t = fp.tags
    if t.get("building", "").lower() in EXTRANEOUS_BUILDING_VALUES:
        return True
    if t.get("location", "").lower() in {"underground", "roof"}:
        return True
    try:
        if int(t.get("layer", "0")) < 0:
            return True
    except ValueError:
        pass
    return False


def _shape(fp: BuildingFootprint, frame: LocalFrame) -> Polygon:
    ext = to_local(frame, np.asarray(fp.exterior))
    holes = [to_local(frame, np.asarray(h)) for h in fp.holes]
    poly = Polygon(ext, holes)
    return poly if poly.is_valid else poly.buffer(0)


def _iou(a: Polygon, b: Polygon) -> float:
    inter = a.intersection(b).area
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _fill(tags: Mapping[str, str], donor: Mapping[str, str]) -> dict:
    merged = dict(tags)
    for k, v in donor.items():
        if merged.get(k) in (None, ""):
            merged[k] = v
    return merged


def harmonize_buildings(
    base: Sequence[BuildingFootprint],
    supplements: Sequence[BuildingFootprint] = (),
    duplicate_iou: float = 0.9,
    match_iou: float = 0.5,
    add_unmatched: bool = True,
    max_new_overlap: float = 0.1,
) -> list[BuildingFootprint]:
    """Merge a base footprint layer with supplementary sources.

    Roof/underground structures are dropped, near-identical footprints
    (IoU > ``duplicate_iou``) collapse to the attribute-richer one, and
    supplements matching a base footprint (IoU > ``match_iou``) fill its
    missing tags. Unmatched supplements whose overlap with existing
    footprints stays below ``max_new_overlap`` of their own area are added.
    """
    base = [fp for fp in base if not is_extraneous(fp)]
    supplements = [fp for fp in supplements if not is_extraneous(fp)]
    if not base and not supplements:
        return []
    frame = frame_for_points(p for fp in list(base) + list(supplements) for p in fp.exterior)

    recs = [[fp, dict(fp.tags), _shape(fp, frame)] for fp in base]
    if supplements:
        sup_shapes = [_shape(fp, frame) for fp in supplements]
        tree = STRtree(sup_shapes)
        used = set()
        for rec in recs:
            best, best_iou = None, match_iou
            for j in sorted(int(j) for j in tree.query(rec[2])):
                iou = _iou(rec[2], sup_shapes[j])
                if iou > best_iou:
                    best, best_iou = j, iou
            if best is not None:
                rec[1] = _fill(rec[1], supplements[best].tags)
                used.add(best)
        if add_unmatched:
            base_tree = STRtree([r[2] for r in recs]) if recs else None
            for j, fp in enumerate(supplements):
                if j in used or sup_shapes[j].area == 0:
                    continue
                overlap = 0.0
                if base_tree is not None:
                    for i in base_tree.query(sup_shapes[j]):
                        overlap += recs[int(i)][2].intersection(sup_shapes[j]).area
                if overlap / sup_shapes[j].area < max_new_overlap:
                    recs.append([fp, dict(fp.tags), sup_shapes[j]])

    # duplicate collapse: richest first so survivors are the richer records
    order = sorted(range(len(recs)), key=lambda i: (-len([v for v in recs[i][1].values() if v != ""]), i))
    tree = STRtree([r[2] for r in recs])
    alive = [True] * len(recs)
    for i in order:
        if not alive[i]:
            continue
        for j in sorted(int(j) for j in tree.query(recs[i][2])):
            if j == i or not alive[j]:
                continue
            if _iou(recs[i][2], recs[j][2]) > duplicate_iou:
                alive[j] = False
                recs[i][1] = _fill(recs[i][1], recs[j][1])

    out = []
    for i, (fp, tags, _) in enumerate(recs):
        if alive[i]:
            out.append(BuildingFootprint(fp.id, fp.exterior, fp.holes, tags))
    return out
