import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facadescope import ingest
from facadescope.ingest import BuildingFootprint, ImageMeta

from conftest import square_fp

AREA = [(4.89, 52.36), (4.91, 52.36), (4.91, 52.38), (4.89, 52.38), (4.89, 52.36)]


def _stream(*records):
    return io.StringIO("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records))


# ----------------------------------------------------------------------------
# image metadata


def test_compass_normalised():
    imgs, errs = ingest.parse_image_metadata(_stream({"id": "a", "lon": 4.90, "lat": 52.37, "compass": 370.0, "pano": True}))
    assert errs == []
    assert imgs[0].compass_deg == pytest.approx(10.0)
    assert imgs[0].is_pano


def test_origin_record():
    imgs, _ = ingest.parse_image_metadata(_stream({"id": "b", "lon": 0, "lat": 0, "compass": 0}))
    assert imgs[0].position == (0.0, 0.0)
    assert imgs[0].compass_deg == 0.0


def test_missing_compass_reported_and_parsing_continues():
    imgs, errs = ingest.parse_image_metadata(
        _stream({"id": "x", "lon": 1, "lat": 1}, "{not json", {"id": "y", "lon": 2, "lat": 2, "compass": 5})
    )
    assert [i.id for i in imgs] == ["y"]
    assert errs[0].line == 1 and errs[0].message == "missing compass" and errs[0].record_id == "x"
    assert errs[1].line == 2 and "malformed" in errs[1].message


def test_mapillary_field_names():
    rec = ImageMeta("m1", (4.9, 52.37), 45.0, 1690000000000, 0.7, True).to_record()
    imgs, errs = ingest.parse_image_metadata(_stream(rec))
    assert not errs
    assert imgs[0] == ImageMeta("m1", (4.9, 52.37), 45.0, 1690000000000, 0.7, True)


def test_out_of_range_position():
    _, errs = ingest.parse_image_metadata(_stream({"id": "z", "lon": 200, "lat": 0, "compass": 0}))
    assert "longitude" in errs[0].message


def test_undecodable_stream_is_fatal():
    with pytest.raises(ingest.IngestError):
        ingest.parse_image_metadata([b"\xff\xfe\x00"])


def _img(i, lon=4.9, lat=52.37, q=0.9, t=0, pano=True):
    return ImageMeta(i, (lon, lat), 0.0, t, q, pano)


def test_colocated_images_keep_best_quality():
    kept = ingest.filter_image_metadata([_img("lo", q=0.8), _img("hi", q=0.9)], AREA)
    assert [i.id for i in kept] == ["hi"]


def test_outside_area_removed():
    kept = ingest.filter_image_metadata([_img("in"), _img("out", lon=5.5)], AREA)
    assert [i.id for i in kept] == ["in"]


def test_quality_floor():
    kept = ingest.filter_image_metadata([_img("bad", q=0.2)], AREA, min_quality=0.5)
    assert kept == []


def test_non_panoramas_removed():
    assert ingest.filter_image_metadata([_img("flat", pano=False)], AREA) == []


def test_recency_breaks_quality_ties():
    kept = ingest.filter_image_metadata([_img("old", t=1), _img("new", t=2)], AREA)
    assert [i.id for i in kept] == ["new"]


def test_empty_area_rejected():
    with pytest.raises(ValueError, match="empty area polygon"):
        ingest.filter_image_metadata([_img("a")], [(0, 0), (0, 0), (0, 0)])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(4.895, 4.905),
            st.floats(52.365, 52.375),
            st.floats(0.0, 1.0),
            st.integers(0, 5),
        ),
        max_size=30,
    ),
    st.floats(0.0, 30.0),
)
def test_filter_is_idempotent(points, radius):
    imgs = [_img(f"i{k}", lon, lat, q, t) for k, (lon, lat, q, t) in enumerate(points)]
    once = ingest.filter_image_metadata(imgs, AREA, 0.3, radius)
    assert ingest.filter_image_metadata(once, AREA, 0.3, radius) == once
    # survivors are pairwise farther apart than the radius
    fr = ingest.make_local_frame((4.9, 52.37))
    xy = [ingest.to_local(fr, im.position) for im in once]
    for a in range(len(xy)):
        for b in range(a + 1, len(xy)):
            assert math.dist(xy[a], xy[b]) > radius


# ----------------------------------------------------------------------------
# local frame


def test_local_frame_examples():
    f0 = ingest.make_local_frame((0.0, 0.0))
    assert ingest.to_local(f0, (0.0, 0.0)) == (0.0, 0.0)
    x, y = ingest.to_local(f0, (0.0, 0.001))
    assert x == pytest.approx(0.0, abs=0.01) and y == pytest.approx(111.32, abs=0.01)
    f60 = ingest.make_local_frame((0.0, 60.0))
    x, y = ingest.to_local(f60, (0.001, 60.0))
    assert x == pytest.approx(55.66, abs=0.01) and y == pytest.approx(0.0, abs=0.01)


def test_polar_frame_rejected():
    with pytest.raises(ValueError):
        ingest.make_local_frame((0.0, 89.5))


@given(
    st.floats(-179.0, 179.0),
    st.floats(-80.0, 80.0),
    st.floats(-0.05, 0.05),
    st.floats(-0.05, 0.05),
)
def test_local_frame_round_trip(lon0, lat0, dlon, dlat):
    fr = ingest.make_local_frame((lon0, lat0))
    p = (lon0 + dlon, lat0 + dlat)
    back = ingest.from_local(fr, ingest.to_local(fr, p))
    assert abs(back[0] - p[0]) < 1e-9 and abs(back[1] - p[1]) < 1e-9


# ----------------------------------------------------------------------------
# footprints


def _feature(fid, coords, props, multi=False):
    geom = {"type": "MultiPolygon" if multi else "Polygon", "coordinates": coords}
    return {"type": "Feature", "id": fid, "properties": props, "geometry": geom}


SQ = [[[4.9, 52.37], [4.9001, 52.37], [4.9001, 52.3701], [4.9, 52.3701], [4.9, 52.37]]]
SQ2 = [[[4.902, 52.37], [4.9021, 52.37], [4.9021, 52.3701], [4.902, 52.3701], [4.902, 52.37]]]


def _doc(*feats):
    return {"type": "FeatureCollection", "features": list(feats)}


def test_levels_parsed():
    fps, errs = ingest.parse_footprints(_doc(_feature("w1", SQ, {"building": "house", "building:levels": "2"})))
    assert not errs and fps[0].levels == 2 and fps[0].tags["building"] == "house"


def test_multipolygon_split_into_parts():
    fps, _ = ingest.parse_footprints(_doc(_feature("r7", [SQ, SQ2], {"building": "yes"}, multi=True)))
    assert [f.id for f in fps] == ["r7#0", "r7#1"]


def test_negative_levels_rejected():
    fps, errs = ingest.parse_footprints(_doc(_feature("w2", SQ, {"building:levels": "-1"}), _feature("w3", SQ2, {})))
    assert [f.id for f in fps] == ["w3"]
    assert "invalid levels" in errs[0].message and errs[0].record_id == "w2"


def test_unclosed_ring_closed():
    open_ring = [SQ[0][:-1]]
    fps, errs = ingest.parse_footprints(_doc(_feature("w4", open_ring, {})))
    assert not errs and fps[0].exterior[0] == fps[0].exterior[-1]


def test_self_intersection_rejected():
    bow = [[[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]]
    _, errs = ingest.parse_footprints(_doc(_feature("bow", bow, {})))
    assert "self-intersecting" in errs[0].message


def test_start_date_leading_year():
    assert ingest.leading_year("1897-05") == 1897
    assert ingest.leading_year("c. 1700") == 1700
    assert ingest.leading_year("unknown") is None


def test_not_a_collection_is_fatal():
    with pytest.raises(ingest.IngestError):
        ingest.parse_footprints({"type": "Feature"})


tag_values = st.text(alphabet="abcdefgh0123456789 :-", min_size=1, max_size=8)


@settings(max_examples=40)
@given(
    st.lists(st.tuples(st.floats(-170, 170), st.floats(-70, 70)), min_size=1, max_size=5),
    st.dictionaries(st.sampled_from(["building", "name", "roof:shape", "building:material"]), tag_values, max_size=3),
    st.integers(0, 20),
)
def test_footprint_serialisation_round_trip(origins, tags, levels):
    fps = []
    for k, (lon, lat) in enumerate(origins):
        ring = ((lon, lat), (lon + 1e-4, lat), (lon + 1e-4, lat + 1e-4), (lon, lat + 1e-4), (lon, lat))
        t = dict(tags, **{"building:levels": str(levels)})
        fps.append(BuildingFootprint(f"f{k}", ring, (), t))
    doc = json.loads(json.dumps(ingest.serialize_footprints(fps)))
    back, errs = ingest.parse_footprints(doc)
    assert not errs
    assert back == fps


# ----------------------------------------------------------------------------
# harmonisation


def test_roof_dropped(frame):
    fps = [square_fp(frame, "roof", 0, 0, 10, {"building": "roof"}), square_fp(frame, "h", 20, 0, 10, {"building": "house"})]
    assert [f.id for f in ingest.harmonize_buildings(fps)] == ["h"]


def test_underground_and_negative_layer_dropped(frame):
    fps = [
        square_fp(frame, "u", 0, 0, 10, {"building": "yes", "location": "underground"}),
        square_fp(frame, "l", 20, 0, 10, {"building": "yes", "layer": "-1"}),
    ]
    assert ingest.harmonize_buildings(fps) == []


def test_duplicates_collapse_keeping_material(frame):
    fps = [square_fp(frame, "a", 0, 0, 10, {"building": "yes"}), square_fp(frame, "b", 0, 0, 10, {"building": "yes", "building:material": "brick"})]
    out = ingest.harmonize_buildings(fps)
    assert len(out) == 1 and out[0].tags["building:material"] == "brick"


def test_supplement_fills_missing_levels(frame):
    base = [square_fp(frame, "a", 0, 0, 10, {"building": "house"})]
    sup = [square_fp(frame, "s", 1, 1, 10, {"building:levels": "3"})]  # IoU 81/119
    out = ingest.harmonize_buildings(base, sup)
    assert len(out) == 1 and out[0].levels == 3 and out[0].id == "a"


def test_base_tags_win_over_supplement(frame):
    base = [square_fp(frame, "a", 0, 0, 10, {"building:levels": "2"})]
    sup = [square_fp(frame, "s", 0, 0, 10, {"building:levels": "9"})]
    assert ingest.harmonize_buildings(base, sup)[0].levels == 2


def test_unmatched_supplement_added(frame):
    base = [square_fp(frame, "a", 0, 0, 10)]
    sup = [square_fp(frame, "far", 40, 40, 10, {"building": "shed"})]
    assert sorted(f.id for f in ingest.harmonize_buildings(base, sup)) == ["a", "far"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(4, 10)), min_size=1, max_size=8))
def test_harmonized_pairwise_iou_bounded(squares):
    fr = ingest.make_local_frame((4.9, 52.37))
    fps = [square_fp(fr, f"s{k}", x, y, s, {"building": "yes"}) for k, (x, y, s) in enumerate(squares)]
    out = ingest.harmonize_buildings(fps)
    polys = [ingest._shape(f, fr) for f in out]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            assert ingest._iou(polys[i], polys[j]) <= 0.9


def test_points_array_local_frame(frame):
    pts = np.array([[4.9, 52.37], [4.901, 52.371]])
    xy = ingest.to_local(frame, pts)
    assert xy.shape == (2, 2) and np.allclose(xy[0], 0.0)
