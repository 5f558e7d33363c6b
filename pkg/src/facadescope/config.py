"""Pipeline configuration: nested dataclasses loaded from a YAML file."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from facadescope.quality import CORRUPTION_KINDS, DEFAULT_SEVERITY_TABLE


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


@dataclass
class Paths:
    metadata: str = "metadata.jsonl"
    footprints: str = "footprints.geojson"
    panoramas: str = "panoramas"
    output_root: str = "out"
    supplements: str | None = None
    area: str | None = None
    quality_hooks: str | None = None
    predictions: str | None = None
    robustness_errors: str | None = None


@dataclass
class IngestParams:
    min_quality: float = 0.0
    dedup_radius_m: float = 1.0
    duplicate_iou: float = 0.9
    match_iou: float = 0.5


@dataclass
class VisibilityParams:
    radius_m: float = 50.0
    spacing_m: float = 0.5
    min_aov: float = 10.0
    max_aov: float = 120.0
    max_distance_m: float = 50.0
    dup_azimuth_deg: float = 5.0
    dup_distance_m: float = 5.0


@dataclass
class ProjectionParams:
    calibration_c: float = 180.0
    aov_clip_min: float = 10.0
    aov_clip_max: float = 120.0


@dataclass
class QualityParams:
    min_blur: float = 50.0
    brightness_lo: float = 40.0
    brightness_hi: float = 220.0
    max_occlusion: float = 0.5


@dataclass
class DetectorParams:
    kind: str = "fallback"  # fallback | fixture | http
    fixture_dir: str | None = None
    endpoint: str | None = None
    prompt: str = "building"
    score_threshold: float = 0.35
    timeout_s: float = 30.0
    retries: int = 2


@dataclass
class AnnotatorParams:
    kind: str = "none"  # none | fixture | http
    fixture_dir: str | None = None
    endpoint: str | None = None
    model: str = "teacher"
    timeout_s: float = 60.0
    retries: int = 2


@dataclass
class SplitParams:
    ratio: list[float] = field(default_factory=lambda: [6.0, 1.0, 3.0])
    balance_attribute: str | None = None


@dataclass
class EvaluationParams:
    baseline_model: str = "ResNet50"
    average: str = "macro"
    per_severity_clean: bool = False
    age_reference_year: int | None = None


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    ingest: IngestParams = field(default_factory=IngestParams)
    visibility: VisibilityParams = field(default_factory=VisibilityParams)
    projection: ProjectionParams = field(default_factory=ProjectionParams)
    quality: QualityParams = field(default_factory=QualityParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    annotator: AnnotatorParams = field(default_factory=AnnotatorParams)
    split: SplitParams = field(default_factory=SplitParams)
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    corruption: dict[str, list[float]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SEVERITY_TABLE.items()})
    seed: int = 0
    base_dir: str = field(default=".", metadata={"serialize": False})

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> "PipelineConfig":
        v = self.visibility
        _check("ingest.min_quality", 0.0 <= self.ingest.min_quality <= 1.0, "must be in [0, 1]")
        _check("ingest.dedup_radius_m", self.ingest.dedup_radius_m >= 0, "must be >= 0")
        _check("ingest.duplicate_iou", 0.0 < self.ingest.duplicate_iou <= 1.0, "must be in (0, 1]")
        _check("ingest.match_iou", 0.0 < self.ingest.match_iou <= 1.0, "must be in (0, 1]")
        _check("visibility.radius_m", v.radius_m > 0, "must be > 0")
        _check("visibility.spacing_m", v.spacing_m > 0, "must be > 0")
        _check("visibility.min_aov", 0 <= v.min_aov < 360, "must be in [0, 360)")
        _check("visibility.max_aov", v.min_aov <= v.max_aov <= 360, "must be in [min_aov, 360]")
        _check("visibility.max_distance_m", v.max_distance_m > 0, "must be > 0")
        _check("visibility.dup_azimuth_deg", v.dup_azimuth_deg >= 0, "must be >= 0")
        _check("visibility.dup_distance_m", v.dup_distance_m >= 0, "must be >= 0")
        p = self.projection
        _check("projection.calibration_c", 0 <= p.calibration_c <= 360, "must be in [0, 360]")
        _check("projection.aov_clip_min", 0 < p.aov_clip_min < 180, "must be in (0, 180)")
        _check("projection.aov_clip_max", p.aov_clip_min <= p.aov_clip_max < 180, "must be in [aov_clip_min, 180)")
        q = self.quality
        _check("quality.min_blur", q.min_blur >= 0, "must be >= 0")
        _check("quality.brightness_lo", 0 <= q.brightness_lo <= 255, "must be in [0, 255]")
        _check("quality.brightness_hi", q.brightness_lo <= q.brightness_hi <= 255, "must be in [brightness_lo, 255]")
        _check("quality.max_occlusion", 0 <= q.max_occlusion <= 1, "must be in [0, 1]")
        d = self.detector
        _check("detector.kind", d.kind in ("fallback", "fixture", "http"), "must be fallback, fixture or http")
        _check("detector.fixture_dir", d.kind != "fixture" or d.fixture_dir, "required for fixture detector")
        _check("detector.endpoint", d.kind != "http" or d.endpoint, "required for http detector")
        _check("detector.score_threshold", 0 < d.score_threshold < 1, "must be in (0, 1)")
        _check("detector.retries", d.retries >= 0, "must be >= 0")
        a = self.annotator
        _check("annotator.kind", a.kind in ("none", "fixture", "http"), "must be none, fixture or http")
        _check("annotator.fixture_dir", a.kind != "fixture" or a.fixture_dir, "required for fixture annotator")
        _check("annotator.endpoint", a.kind != "http" or a.endpoint, "required for http annotator")
        _check("annotator.retries", a.retries >= 0, "must be >= 0")
        s = self.split
        _check("split.ratio", len(s.ratio) == 3 and min(s.ratio) >= 0 and sum(s.ratio) > 0, "needs three non-negative weights")
        _check("split.balance_attribute", s.balance_attribute in (None, "type", "material"), "must be type, material or null")
        ary = self.evaluation.age_reference_year
        _check("evaluation.age_reference_year", ary is None or 1000 <= ary <= 3000, "must be a 4-digit year or null")
        _check("evaluation.average", self.evaluation.average in ("macro", "weighted"), "must be macro or weighted")
        for kind in CORRUPTION_KINDS:
            _check(f"corruption.{kind}", len(self.corruption.get(kind, ())) == 3, "needs three severity values")
        for kind, vals in self.corruption.items():
            _check(f"corruption.{kind}", kind in CORRUPTION_KINDS, "unknown corruption kind")
            _check(f"corruption.{kind}", all(x > 0 for x in vals), "values must be > 0")
        _check("corruption.occlusion", all(x < 1 for x in self.corruption["occlusion"]), "fractions must be < 1")
        _check("corruption.motion_blur", all(float(x).is_integer() for x in self.corruption["motion_blur"]), "lengths must be integers")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def section_dict(self, name: str):
        return _to_plain(getattr(self, name))


def _check(name: str, ok, message: str) -> None:
    if not ok:
        raise ConfigError(name, message)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {
            f.name: _to_plain(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if f.metadata.get("serialize", True)
        }
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, name: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, name)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(name, "expected a mapping")
        return _build(tp, value, name + ".")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(name, "expected a list")
        return [_coerce(args[0], v, f"{name}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(name, "expected a mapping")
        return {str(k): _coerce(args[1], v, f"{name}.{k}") for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.metadata.get("serialize", True)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown field")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {})
    # partial corruption tables override per kind
    merged = {k: list(v) for k, v in DEFAULT_SEVERITY_TABLE.items()}
    merged.update(cfg.corruption)
    cfg.corruption = merged
    cfg.base_dir = str(base_dir)
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    return config_from_dict(data or {}, base_dir=path.parent)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
