"""Resumable pipeline stages.

Each stage lives in ``<stage_dir>/<stage>/``, reads only upstream stage
outputs and the configured inputs, and finishes by writing
``_COMPLETE.json`` holding a digest of everything it consumed. A stage
whose marker digest matches its current inputs is skipped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from facadescope import dataset, detection, evaluation, images, ingest, projection, quality, visibility
from facadescope._http import ServiceError
from facadescope.config import PipelineConfig

log = logging.getLogger(__name__)

STAGES = ("ingest", "visibility", "extract", "quality", "assemble", "corrupt", "evaluate")
UPSTREAM = {s: STAGES[i - 1] if i else None for i, s in enumerate(STAGES)}
MARKER = "_COMPLETE.json"
PANO_SUFFIXES = (".png", ".jpg", ".jpeg")


class StageMissing(RuntimeError):
    def __init__(self, stage: str):
        super().__init__(f"{stage} stage missing")
        self.stage = stage


class DataError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# small io helpers


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")
    return path


def read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def file_digest(path: Path | None) -> str | None:
    if path is None or not Path(path).exists():
        return None
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(x for x in p.rglob("*") if x.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _with_retries(fn: Callable, retries: int):
    for attempt in range(retries + 1):
        try:
            return fn()
        except ServiceError as exc:
            if not exc.retryable or attempt == retries:
                raise
            log.warning("retrying after %s (attempt %d)", exc, attempt + 1)


# ----------------------------------------------------------------------------
# clients


def make_detector(cfg: PipelineConfig):
    d = cfg.detector
    if d.kind == "fixture":
        return detection.FixtureDetector(cfg.resolve(d.fixture_dir))
    if d.kind == "http":
        return detection.HttpDetector(d.endpoint, d.timeout_s)
    return detection.FallbackDetector()


def make_annotator(cfg: PipelineConfig):
    a = cfg.annotator
    if a.kind == "fixture":
        return dataset.FixtureAnnotator(cfg.resolve(a.fixture_dir))
    if a.kind == "http":
        return dataset.HttpAnnotator(a.endpoint, a.model, a.timeout_s)
    return None


# ----------------------------------------------------------------------------
# shared geometry step (also used to record detector fixtures)


def find_panorama(cfg: PipelineConfig, image_id: str) -> Path | None:
    root = cfg.resolve(cfg.paths.panoramas)
    for suf in PANO_SUFFIXES:
        p = root / f"{image_id}{suf}"
        if p.exists():
            return p
    return None


def candidate_crop(cfg: PipelineConfig, pano: np.ndarray, compass_deg: float, cand: dict) -> tuple[np.ndarray, int]:
    c = cfg.projection.calibration_c
    p_left = projection.azimuth_to_ratio(cand["left_azimuth_deg"], compass_deg, c)
    p_right = projection.azimuth_to_ratio(cand["right_azimuth_deg"], compass_deg, c)
    return projection.crop_aov(pano, p_left, p_right)


def detection_request(cfg: PipelineConfig, crop: np.ndarray) -> detection.DetectionRequest:
    return detection.DetectionRequest(crop, cfg.detector.prompt, cfg.detector.score_threshold)


# ----------------------------------------------------------------------------


@dataclass
class StageResult:
    stage: str
    skipped: bool
    manifest: dict


class Pipeline:
    def __init__(self, cfg: PipelineConfig, stage_dir=None, workers: int = 1):
        self.cfg = cfg
        self.root = Path(stage_dir) if stage_dir is not None else cfg.resolve(cfg.paths.output_root)
        self.workers = max(1, int(workers))

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def _map(self, fn, items):
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))

    def is_complete(self, stage: str) -> bool:
        return (self.dir(stage) / MARKER).exists()

    def manifest(self, stage: str) -> dict:
        if not self.is_complete(stage):
            raise StageMissing(stage)
        return json.loads((self.dir(stage) / "manifest.json").read_text())

    def _input_digest(self, stage: str) -> str:
        cfg = self.cfg
        parts: dict = {"stage": stage, "seed": cfg.seed}
        up = UPSTREAM[stage]
        if up is not None:
            if not self.is_complete(up):
                raise StageMissing(up)
            parts["upstream"] = json.loads((self.dir(up) / MARKER).read_text())["output_digest"]
        sections = {
            "ingest": ["ingest"],
            "visibility": ["visibility"],
            "extract": ["projection", "detector"],
            "quality": ["quality"],
            "assemble": ["annotator", "split"],
            "corrupt": ["corruption"],
            "evaluate": ["evaluation"],
        }[stage]
        parts["config"] = {s: cfg.section_dict(s) for s in sections}
        p = cfg.paths
        files = {
            "ingest": [p.metadata, p.footprints, p.supplements, p.area],
            "extract": [p.panoramas, cfg.detector.fixture_dir if cfg.detector.kind == "fixture" else None],
            "quality": [p.quality_hooks],
            "assemble": [p.footprints, cfg.annotator.fixture_dir if cfg.annotator.kind == "fixture" else None],
            "evaluate": [p.predictions, p.robustness_errors],
        }.get(stage, [])
        parts["files"] = [file_digest(cfg.resolve(f)) for f in files]
        return hashlib.sha256(_dumps(parts).encode()).hexdigest()

    def run(self, stage: str) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        digest = self._input_digest(stage)
        out = self.dir(stage)
        marker = out / MARKER
        if marker.exists():
            prev = json.loads(marker.read_text())
            if prev.get("input_digest") == digest:
                log.info("%s: up to date, skipping", stage)
                return StageResult(stage, True, self.manifest(stage))
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        manifest = getattr(self, f"_stage_{stage}")(out)
        write_json(out / "manifest.json", manifest)
        write_json(marker, {"input_digest": digest, "output_digest": file_digest(out)})
        return StageResult(stage, False, manifest)

    def run_all(self) -> list[StageResult]:
        return [self.run(s) for s in STAGES]

    # ------------------------------------------------------------------ stages

    def _stage_ingest(self, out: Path) -> dict:
        cfg = self.cfg
        meta_path = cfg.resolve(cfg.paths.metadata)
        try:
            with meta_path.open("rb") as fh:
                imgs, img_errors = ingest.parse_image_metadata(fh)
        except FileNotFoundError as exc:
            raise DataError(f"image metadata not found: {meta_path}") from exc
        fps, fp_errors = ingest.parse_footprints(_read_text(cfg.resolve(cfg.paths.footprints)))
        sups: list = []
        if cfg.paths.supplements:
            sups, sup_errors = ingest.parse_footprints(_read_text(cfg.resolve(cfg.paths.supplements)))
            fp_errors += sup_errors
        fps = ingest.harmonize_buildings(fps, sups, cfg.ingest.duplicate_iou, cfg.ingest.match_iou)
        if not fps:
            raise DataError("no usable building footprints")

        all_pts = [p for fp in fps for p in fp.exterior] + [im.position for im in imgs]
        frame = ingest.frame_for_points(all_pts)
        if cfg.paths.area:
            area_doc = json.loads(_read_text(cfg.resolve(cfg.paths.area)))
            geom = area_doc["features"][0]["geometry"] if "features" in area_doc else area_doc.get("geometry", area_doc)
            area = [tuple(c) for c in geom["coordinates"][0]]
        else:
            area = _default_area(fps, frame, cfg.visibility.radius_m)
        kept = ingest.filter_image_metadata(imgs, area, cfg.ingest.min_quality, cfg.ingest.dedup_radius_m)

        write_jsonl(out / "images.jsonl", [im.to_record() for im in kept])
        write_json(out / "footprints.geojson", ingest.serialize_footprints(fps))
        write_json(out / "frame.json", {"origin": list(frame.origin)})
        errors = [{"source": "metadata", "line": e.line, "id": e.record_id, "message": e.message} for e in img_errors]
        errors += [{"source": "footprints", "line": e.line, "id": e.record_id, "message": e.message} for e in fp_errors]
        write_jsonl(out / "errors.jsonl", errors)
        return {
            "images_in": len(imgs),
            "images_kept": len(kept),
            "footprints": len(fps),
            "errors": len(errors),
            "area": [list(p) for p in area],
        }

    def _load_ingest(self):
        d = self.dir("ingest")
        imgs, _ = ingest.parse_image_metadata((d / "images.jsonl").read_text().splitlines())
        fps, _ = ingest.parse_footprints((d / "footprints.geojson").read_text())
        frame = ingest.make_local_frame(tuple(json.loads((d / "frame.json").read_text())["origin"]))
        return imgs, fps, frame

    def _stage_visibility(self, out: Path) -> dict:
        v = self.cfg.visibility
        imgs, fps, frame = self._load_ingest()
        index = visibility.build_spatial_index(fps, frame)
        per_image = self._map(lambda im: visibility.analyze_image(im, index, v.radius_m, v.spacing_m), imgs)
        results = [r for rs in per_image for r in rs]
        cands = visibility.select_candidates(
            results, v.min_aov, v.max_aov, v.max_distance_m, v.dup_azimuth_deg, v.dup_distance_m
        )
        compass = {im.id: im.compass_deg for im in imgs}
        recs = []
        for c in cands:
            rec = c.to_record()
            rec["compass_deg"] = compass[c.result.image_id]
            recs.append(rec)
        write_jsonl(out / "aov.jsonl", recs)
        return {"results": len(recs), "accepted": sum(c.accepted for c in cands)}

    def _stage_extract(self, out: Path) -> dict:
        cfg = self.cfg
        cands = [r for r in read_jsonl(self.dir("visibility") / "aov.jsonl") if r["accepted"]]
        detector = make_detector(cfg)
        lo, hi = cfg.projection.aov_clip_min, cfg.projection.aov_clip_max
        pano_cache: dict[str, np.ndarray] = {}

        def load(pid):
            if pid not in pano_cache:
                path = find_panorama(cfg, pid)
                pano_cache[pid] = None if path is None else images.load_rgb(path)
            return pano_cache[pid]

        for pid in sorted({c["image_id"] for c in cands}):
            load(pid)

        def work(cand):
            pid, bid = cand["image_id"], cand["building_id"]
            pano = pano_cache[pid]
            if pano is None:
                return {"image_id": pid, "building_id": bid, "status": "missing_panorama"}
            crop, offset = candidate_crop(cfg, pano, cand["compass_deg"], cand)
            req = detection_request(cfg, crop)
            dets = _with_retries(lambda: detection.detect_buildings(req, detector), cfg.detector.retries)
            target = detection.pick_target_detection(dets, (crop.shape[1], crop.shape[0]))
            if target is None:
                return {"image_id": pid, "building_id": bid, "status": "no_detection"}
            h, w = pano.shape[:2]
            bbox = projection.bbox_to_pano_coords(target.box, offset, (w, h))
            aov = min(max(cand["aov_deg"], lo), hi)
            persp = projection.reproject(pano, bbox, aov, pano_id=pid, building_id=bid)
            persp.extra["detection"] = target.to_wire()
            persp.extra["crop_offset_px"] = offset
            out_id = _safe(f"{pid}__{bid}")
            png = images.save_png(persp.pixels, out / "images" / f"{out_id}.png")
            write_json(out / "images" / f"{out_id}.json", persp.provenance())
            return {
                "status": "ok",
                "id": out_id,
                "image_id": pid,
                "building_id": bid,
                "path": str(png.relative_to(out)),
                "pixel_digest": images.pixel_digest(persp.pixels),
                "provenance": persp.provenance(),
            }

        recs = self._map(work, cands)
        write_jsonl(out / "extracted.jsonl", recs)
        return {"candidates": len(cands), "extracted": sum(r["status"] == "ok" for r in recs)}

    def _extracted(self) -> list[dict]:
        return [r for r in read_jsonl(self.dir("extract") / "extracted.jsonl") if r["status"] == "ok"]

    def _stage_quality(self, out: Path) -> dict:
        cfg = self.cfg
        q = cfg.quality
        th = quality.QualityThresholds(q.min_blur, q.brightness_lo, q.brightness_hi, q.max_occlusion)
        hooks = quality.load_hooks(cfg.resolve(cfg.paths.quality_hooks))
        recs = self._extracted()

        def work(rec):
            img = images.load_rgb(self.dir("extract") / rec["path"])
            return rec["id"], quality.assess(img, th, hooks.get(rec["id"]))

        items = self._map(work, recs)
        kept, rejected = quality.filter_images(items, th)
        write_jsonl(out / "reports.jsonl", [{"id": k, **r.to_record()} for k, r in items])
        write_jsonl(out / "rejections.jsonl", [{"id": r["key"], "reasons": r["reasons"]} for r in rejected])
        write_jsonl(out / "kept.jsonl", [{"id": k} for k, _ in kept])
        return {"assessed": len(items), "kept": len(kept), "rejected": len(rejected)}

    def _stage_assemble(self, out: Path) -> dict:
        cfg = self.cfg
        _, fps, _ = self._load_ingest()
        by_id = {fp.id: fp for fp in fps}
        kept = {r["id"] for r in read_jsonl(self.dir("quality") / "kept.jsonl")}
        extracted = [r for r in self._extracted() if r["id"] in kept]
        annotator = make_annotator(cfg)
        multi_prompt = dataset.make_multi_attr_prompt()
        cap_prompt = dataset.make_caption_prompt()

        records, rows, skipped = [], [], 0
        for rec in extracted:
            label = dataset.assign_labels(by_id[rec["building_id"]], rec["id"])
            row = {
                "image_id": rec["id"],
                "image_path": str(Path("..") / "extract" / rec["path"]),
                "building_id": rec["building_id"],
                "pano_id": rec["image_id"],
            }
            if annotator is not None:
                pixels = images.load_rgb(self.dir("extract") / rec["path"])
                reply = _with_retries(lambda: dataset.request_annotation(annotator, pixels, multi_prompt), cfg.annotator.retries)
                row["multi_attr_prompt_digest"] = images.text_digest(multi_prompt)
                row["multi_attr_reply_digest"] = images.text_digest(reply.text)
                row["annotator_model"] = reply.model
                try:
                    label.multi_attr = dataset.parse_multi_attr(reply.text)
                except ValueError as exc:
                    row["multi_attr_error"] = str(exc)
                cap = _with_retries(lambda: dataset.request_annotation(annotator, pixels, cap_prompt), cfg.annotator.retries)
                label.caption = cap.text
                row["caption_prompt_digest"] = images.text_digest(cap_prompt)
                row["caption_reply_digest"] = images.text_digest(cap.text)
            if not label.populated():
                skipped += 1
                continue
            row["qa"] = [list(p) for p in dataset.make_single_word_qa(label)]
            row["labels"] = label.to_record()
            records.append(label)
            rows.append(row)

        split = dataset.split_dataset(records, cfg.split.ratio, cfg.seed, cfg.split.balance_attribute) if records else {}
        for row in rows:
            row["split"] = split[row["image_id"]]
        write_jsonl(out / "dataset.jsonl", rows)
        counts = {s: sum(r["split"] == s for r in rows) for s in dataset.SPLITS}
        return {"records": len(rows), "skipped_unlabeled": skipped, "splits": counts}

    def _stage_corrupt(self, out: Path) -> dict:
        cfg = self.cfg
        rows = read_jsonl(self.dir("assemble") / "dataset.jsonl")
        test = [r for r in rows if r["split"] == "test"]
        specs = quality.all_corruption_specs()

        def work(row):
            img = images.load_rgb((self.dir("assemble") / row["image_path"]).resolve())
            made = []
            for spec in specs:
                res = quality.corrupt(img, spec, cfg.seed, row["image_id"], cfg.corruption)
                path = images.save_png(res, quality.corruption_path(out, spec, row["image_id"]))
                made.append(
                    {
                        "image_id": row["image_id"],
                        "kind": spec.kind,
                        "severity": spec.severity,
                        "path": str(path.relative_to(out)),
                        "pixel_digest": images.pixel_digest(res),
                    }
                )
            return made

        recs = [m for made in self._map(work, test) for m in made]
        write_jsonl(out / "corruptions.jsonl", recs)
        return {"images": len(test), "levels": len(specs), "files": len(recs)}

    def _stage_evaluate(self, out: Path) -> dict:
        cfg = self.cfg
        rows = read_jsonl(self.dir("assemble") / "dataset.jsonl")
        summary: dict = {}

        # teacher annotations scored against crowdsourced labels
        preds = []
        field_map = {"type": "building_type", "material": "surface_material", "floors": "floors", "age_year": "building_age"}
        second_map = {"type": "alternate_building_type", "material": "alternate_surface_material"}
        for row in rows:
            labels = row["labels"]
            ma = labels.get("multi_attr")
            if not ma:
                continue
            for attr, key in field_map.items():
                if labels.get(attr) is None or ma.get(key) is None:
                    continue
                rec = {"image_id": row["image_id"], "attribute": attr, "predicted": ma[key], "truth": labels[attr]}
                if attr in second_map:
                    rec["second_choice"] = ma.get(second_map[attr])
                preds.append(rec)
        write_jsonl(out / "teacher_predictions.jsonl", preds)
        summary["teacher"] = _safe_metrics(preds, cfg.evaluation.average, cfg.evaluation.age_reference_year)

        if cfg.paths.predictions:
            ext = evaluation.load_predictions(cfg.resolve(cfg.paths.predictions))
            by_model: dict[str, list] = {}
            for r in ext:
                by_model.setdefault(r.get("model", "model"), []).append(r)
            summary["predictions"] = {m: _safe_metrics(rs, cfg.evaluation.average, cfg.evaluation.age_reference_year) for m, rs in sorted(by_model.items())}

        tables = {"teacher": summary["teacher"], **summary.get("predictions", {})}
        ok_tables = {m: {a: v for a, v in t.items() if "error" not in v} for m, t in tables.items()}
        evaluation.write_classification_table(out / "classification.csv", ok_tables)
        evaluation.write_regression_table(out / "regression.csv", ok_tables)

        if cfg.paths.robustness_errors:
            err = evaluation.load_error_tables(cfg.resolve(cfg.paths.robustness_errors))
            reports = {}
            for attr, models in err.items():
                base = models.get(cfg.evaluation.baseline_model)
                if base is None:
                    raise DataError(f"baseline model {cfg.evaluation.baseline_model} missing for {attr}")
                reports[attr] = [
                    evaluation.robustness_report(m, t, base, cfg.evaluation.per_severity_clean)
                    for m, t in sorted(models.items(), key=lambda kv: (kv[0] != cfg.evaluation.baseline_model, kv[0]))
                ]
            evaluation.write_robustness_table(out / "robustness.csv", reports)
            summary["robustness"] = {a: [r.row() for r in reps] for a, reps in reports.items()}

        write_json(out / "metrics.json", summary)
        return {"teacher_predictions": len(preds), "tables": sorted(p.name for p in out.glob("*.csv"))}


def _safe_metrics(preds: list, average: str, age_reference_year: int | None = None) -> dict:
    out = {}
    by_attr: dict[str, list] = {}
    for r in preds:
        by_attr.setdefault(r["attribute"], []).append(r)
    for attr, rs in sorted(by_attr.items()):
        try:
            out[attr] = evaluation.evaluate_predictions(rs, average, age_reference_year)[attr]
        except evaluation.MetricError as exc:
            out[attr] = {"error": str(exc), "n": len(rs)}
    return out


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"input not found: {path}") from exc


def _default_area(fps, frame, margin_m: float):
    """Footprint bounding box grown by ``margin_m``, as a lon/lat ring."""
    pts = np.vstack([ingest.to_local(frame, np.asarray(fp.exterior)) for fp in fps])
    x0, y0 = pts.min(axis=0) - margin_m
    x1, y1 = pts.max(axis=0) + margin_m
    ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    return [tuple(float(v) for v in ingest.from_local(frame, p)) for p in ring]
