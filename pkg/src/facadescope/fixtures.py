"""Synthetic scenes: the mini end-to-end fixture and analytic panoramas."""
from __future__ import annotations

import json
import math
import shutil
from pathlib import Path

import numpy as np
import yaml

from facadescope import dataset, detection, geometry, images, ingest
from facadescope.config import config_from_dict

ORIGIN = (4.9, 52.37)
CAMERA_HEIGHT_M = 2.5
STOREY_M = 3.2
PANO_W, PANO_H = 2048, 1024
COMPASS_DEG = 30.0

# id, local rectangle (x0, y0, x1, y1) in metres, tags
MINI_BUILDINGS = [
    ("b1", (-8.0, 12.0, 8.0, 20.0), {"building": "house", "building:levels": "2", "building:material": "brick", "start_date": "1925"}),
    ("b2", (14.0, -10.0, 22.0, 2.0), {"building": "apartments", "building:levels": "5", "building:material": "concrete", "start_date": "1968-04"}),
    ("b3", (-26.0, -14.0, -16.0, -2.0), {"building": "office", "building:levels": "8", "building:material": "glass", "start_date": "2004"}),
]
FACADE_RGB = {"brick": (158, 74, 52), "concrete": (176, 174, 166), "glass": (92, 132, 166)}
WINDOW_RGB = (38, 44, 58)

# teacher replies: deliberate slips keep the metrics informative
MINI_REPLIES = {
    "b1": {"building_type": "house", "alternate_building_type": "apartments", "building_age": 1930, "floors": 2, "surface_material": "brick", "alternate_surface_material": "stone"},
    "b2": {"building_type": "office", "alternate_building_type": "apartments", "building_age": 1965, "floors": 6, "surface_material": "concrete", "alternate_surface_material": "plaster"},
    "b3": {"building_type": "office", "alternate_building_type": "retail", "building_age": 1999, "floors": 8, "surface_material": "metal", "alternate_surface_material": "glass"},
}


def rect_ring(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]


def local_footprint(frame: ingest.LocalFrame, fid: str, ring, tags=None) -> ingest.BuildingFootprint:
    return ingest.BuildingFootprint(fid, tuple(ingest.from_local(frame, p) for p in ring), (), dict(tags or {}))


def random_rect_scene(rng: np.random.Generator, n_max: int = 10, extent_m: float = 45.0):
    """Non-overlapping axis-aligned rectangles around a camera at the origin.

    Returns a list of (x0, y0, x1, y1). The camera keeps a 2 m clearance.
    """
    rects = []
    n = int(rng.integers(1, n_max + 1))
    tries = 0
    while len(rects) < n and tries < 500:
        tries += 1
        w, h = rng.uniform(3.0, 20.0, size=2)
        cx, cy = rng.uniform(-extent_m, extent_m, size=2)
        r = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        if max(abs(r[0]), abs(r[2])) > 48 or max(abs(r[1]), abs(r[3])) > 48:
            continue
        if r[0] - 2 < 0 < r[2] + 2 and r[1] - 2 < 0 < r[3] + 2:
            continue
        if any(r[0] < q[2] + 0.5 and q[0] < r[2] + 0.5 and r[1] < q[3] + 0.5 and q[1] < r[3] + 0.5 for q in rects):
            continue
        rects.append(tuple(float(v) for v in r))
    return rects


def analytic_color(lam, lat) -> np.ndarray:
    """Smooth RGB field over the sphere; (lambda, latitude) recoverable from it."""
    lam = np.asarray(lam, dtype=float)
    lat = np.asarray(lat, dtype=float)
    r = 127.5 + 127.5 * np.sin(lam)
    g = 127.5 + 127.5 * np.cos(lam)
    b = 127.5 + 127.5 * np.sin(lat)
    return np.stack([r, g, b], axis=-1)


def analytic_panorama(width: int = PANO_W, height: int = PANO_H) -> np.ndarray:
    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)
    lam = (xs / (width - 1) - 0.5) * 2 * np.pi
    lat = (ys / (height - 1) - 0.5) * np.pi
    L, P = np.meshgrid(lam, lat)
    return np.clip(np.rint(analytic_color(L, P)), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# mini scene rendering


def render_scene_panorama(rects, tags, compass_deg: float = COMPASS_DEG, width: int = PANO_W, height: int = PANO_H):
    """Render a panorama of extruded rectangles seen from the origin.

    Returns (pixels, building_mask) where the mask holds the building index
    per pixel (-1 for sky/ground).
    """
    edges_a, edges_b, owner = [], [], []
    for i, r in enumerate(rects):
        ring = np.asarray(rect_ring(*r)[:-1])
        a, b = geometry.ring_edges(ring)
        edges_a.append(a)
        edges_b.append(b)
        owner.extend([i] * len(a))
    A = np.concatenate(edges_a)
    B = np.concatenate(edges_b)
    owner = np.asarray(owner)

    xs = np.arange(width, dtype=float)
    lam = (xs / (width - 1) - 0.5) * 2 * np.pi
    col_id = np.full(width, -1)
    col_d = np.full(width, np.inf)
    col_s = np.zeros(width)
    for x in range(width):
        az = lam[x] + math.radians(compass_deg)
        t, u = geometry.ray_segment_hits((0.0, 0.0), az, A, B)
        j = int(np.argmin(t))
        if np.isfinite(t[j]):
            col_id[x] = owner[j]
            col_d[x] = t[j]
            col_s[x] = u[j] * float(np.hypot(*(B[j] - A[j])))

    ys = np.arange(height, dtype=float)
    elev = -(ys / (height - 1) - 0.5) * np.pi  # row 0 looks straight up
    E = elev[:, None]
    D = col_d[None, :]
    heights = np.array([float(t.get("building:levels", "3")) * STOREY_M for t in tags])
    top = np.where(col_id >= 0, heights[np.maximum(col_id, 0)], 0.0)[None, :]
    with np.errstate(invalid="ignore"):
        z = CAMERA_HEIGHT_M + D * np.tan(E)
    is_bld = (col_id[None, :] >= 0) & (z >= 0) & (z <= top)
    mask = np.where(is_bld, col_id[None, :], -1)

    img = np.zeros((height, width, 3))
    sky_t = np.clip(E / (np.pi / 2), 0, 1)
    sky = np.stack([135 + 60 * (1 - sky_t), 180 + 40 * (1 - sky_t), 235 + 10 * (1 - sky_t)], axis=-1)
    ground = np.array([96.0, 96.0, 90.0])
    img[:] = np.where((E >= 0)[..., None], sky, ground)
    # paving joints give the ground some texture
    joints = (E < 0) & ((np.floor(xs / 16)[None, :] + np.floor(ys / 16)[:, None]) % 2 == 0)
    img[np.broadcast_to(joints, mask.shape)] -= 12

    for i, t in enumerate(tags):
        sel = mask == i
        base = np.array(FACADE_RGB.get(t.get("building:material"), (150, 150, 150)), dtype=float)
        s = np.broadcast_to(col_s[None, :], mask.shape)
        zz = np.broadcast_to(np.nan_to_num(z, posinf=0.0, neginf=0.0), mask.shape)
        window = ((s % 3.0) > 0.9) & ((s % 3.0) < 2.1) & ((zz % STOREY_M) > 1.0) & ((zz % STOREY_M) < 2.3)
        img[sel] = base
        img[sel & window] = WINDOW_RGB
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def _box_from_mask(mask: np.ndarray, target: int):
    ys, xs = np.nonzero(mask == target)
    if len(xs) == 0:
        return None
    return [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1]


def mini_config() -> dict:
    return {
        "paths": {
            "metadata": "metadata.jsonl",
            "footprints": "footprints.geojson",
            "panoramas": "panoramas",
            "output_root": "out",
        },
        "ingest": {"min_quality": 0.3, "dedup_radius_m": 1.0},
        "detector": {"kind": "fixture", "fixture_dir": "detector_fixtures", "score_threshold": 0.35},
        "annotator": {"kind": "fixture", "fixture_dir": "annotator_fixtures", "model": "fixture-teacher"},
        "seed": 7,
    }


def build_mini_fixture(directory) -> Path:
    """Write the mini fixture: one 2048x1024 panorama, three footprints,
    image metadata, recorded detector and annotator replies, and config.yaml."""
    from facadescope.pipeline import Pipeline, candidate_crop, detection_request, read_jsonl

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    frame = ingest.make_local_frame(ORIGIN)

    feats = [local_footprint(frame, fid, rect_ring(*r), tags) for fid, r, tags in MINI_BUILDINGS]
    (root / "footprints.geojson").write_text(json.dumps(ingest.serialize_footprints(feats), indent=1))

    cam = ORIGIN
    records = [
        {"id": "pano_001", "computed_geometry": {"type": "Point", "coordinates": list(cam)}, "computed_compass_angle": COMPASS_DEG, "captured_at": 1690000000000, "quality_score": 0.9, "is_pano": True},
        {"id": "pano_002", "computed_geometry": {"type": "Point", "coordinates": list(cam)}, "computed_compass_angle": COMPASS_DEG + 360.0, "captured_at": 1690000100000, "quality_score": 0.6, "is_pano": True},
        {"id": "pano_003", "computed_geometry": {"type": "Point", "coordinates": [cam[0] + 0.0004, cam[1]]}, "computed_compass_angle": 0.0, "captured_at": 1690000000000, "quality_score": 0.2, "is_pano": True},
        {"id": "broken", "computed_geometry": {"type": "Point", "coordinates": list(cam)}},
    ]
    with (root / "metadata.jsonl").open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")

    rects = [r for _, r, _ in MINI_BUILDINGS]
    tags = [t for _, _, t in MINI_BUILDINGS]
    pano, mask = render_scene_panorama(rects, tags)
    images.save_png(pano, root / "panoramas" / "pano_001.png")

    cfg_dict = mini_config()
    (root / "config.yaml").write_text(yaml.safe_dump(cfg_dict, sort_keys=False))

    # record replies by driving the real stages in a scratch area
    scratch = root / "_scratch"
    if scratch.exists():
        shutil.rmtree(scratch)
    cfg = config_from_dict(cfg_dict, base_dir=root)
    for d in ("detector_fixtures", "annotator_fixtures"):
        if (root / d).exists():
            shutil.rmtree(root / d)
    pipe = Pipeline(cfg, scratch)
    pipe.run("ingest")
    pipe.run("visibility")
    recorder = detection.FixtureDetector(root / "detector_fixtures")
    index_of = {fid: i for i, (fid, _, _) in enumerate(MINI_BUILDINGS)}
    for cand in read_jsonl(scratch / "visibility" / "aov.jsonl"):
        if not cand["accepted"]:
            continue
        crop, offset = candidate_crop(cfg, pano, cand["compass_deg"], cand)
        cols = (offset + np.arange(crop.shape[1])) % pano.shape[1]
        box = _box_from_mask(mask[:, cols], index_of[cand["building_id"]])
        h, w = crop.shape[:2]
        dets = [{"box": box, "score": 0.87, "label": "building"}]
        dets.append({"box": [0, int(0.3 * h), int(0.12 * w), int(0.6 * h)], "score": 0.52, "label": "building"})
        dets.append({"box": [int(0.5 * w), 0, w + 40, int(0.2 * h)], "score": 0.21, "label": "building"})
        recorder.record(detection_request(cfg, crop), {"detections": dets})
    pipe.run("extract")
    pipe.run("quality")
    annot = dataset.FixtureAnnotator(root / "annotator_fixtures")
    kept = {r["id"] for r in read_jsonl(scratch / "quality" / "kept.jsonl")}
    for rec in read_jsonl(scratch / "extract" / "extracted.jsonl"):
        if rec.get("status") != "ok" or rec["id"] not in kept:
            continue
        pixels = images.load_rgb(scratch / "extract" / rec["path"])
        reply = MINI_REPLIES[rec["building_id"]]
        text = dataset.make_multi_attr_reply(reply)
        if rec["building_id"] == "b2":
            text = f"Here is the annotation you asked for:\n{text}\nLet me know if you need more."
        annot.record(pixels, dataset.make_multi_attr_prompt(), text, "fixture-teacher")
        caption = (
            f"The building appears to be a {reply['building_type']} structure with a "
            f"{reply['surface_material']} facade and {reply['floors']} floors, likely built around {reply['building_age']}."
        )
        annot.record(pixels, dataset.make_caption_prompt(), caption, "fixture-teacher")
    shutil.rmtree(scratch)
    return root
