"""Image feature scoring, filtering and the corruption generator used for
robustness benchmarking."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
MID_GRAY = 128

CORRUPTION_KINDS = ("occlusion", "motion_blur", "gaussian_noise", "brightness_up", "brightness_down")
SEVERITIES = (1, 2, 3)

# per-kind parameter for severities 1..3
DEFAULT_SEVERITY_TABLE: dict[str, tuple[float, float, float]] = {
    "occlusion": (0.10, 0.25, 0.40),  # covered pixel fraction
    "motion_blur": (5, 11, 21),  # kernel length, px
    "gaussian_noise": (10.0, 25.0, 50.0),  # sigma on 0..255
    "brightness_up": (1.25, 1.5, 1.75),
    "brightness_down": (0.75, 0.5, 0.25),
}


@dataclass(frozen=True)
class QualityThresholds:
    min_blur: float = 50.0
    brightness_lo: float = 40.0
    brightness_hi: float = 220.0
    max_occlusion: float = 0.5


@dataclass
class QualityReport:
    blur_score: float
    brightness: float
    flags: dict[str, bool] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"blur_score": self.blur_score, "brightness": self.brightness, "flags": dict(self.flags)}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"invalid severity {self.severity!r}")


def all_corruption_specs() -> list[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CORRUPTION_KINDS for s in SEVERITIES]


def luma(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)[..., :3] @ LUMA_WEIGHTS


def blur_score(img: np.ndarray) -> float:
    """Variance of the Laplacian response of the luma channel."""
    y = luma(img)
    if y.size == 0:
        raise ValueError("empty image")
    resp = ndimage.correlate(y, LAPLACIAN, mode="nearest")
    return float(resp.var())


def brightness_score(img: np.ndarray) -> float:
    y = luma(img)
    if y.size == 0:
        raise ValueError("empty image")
    return float(y.mean())


def assess(img: np.ndarray, thresholds: QualityThresholds = QualityThresholds(), hooks: Mapping[str, Any] | None = None) -> QualityReport:
    """Score an image and set pass/fail flags.

    ``hooks`` carries externally computed scene attributes: ``indoor`` (bool)
    and ``occlusion_fraction`` (0..1). Missing hooks pass.
    """
    b = blur_score(img)
    br = brightness_score(img)
    flags = {
        "blur": b >= thresholds.min_blur,
        "dark": br >= thresholds.brightness_lo,
        "bright": br <= thresholds.brightness_hi,
    }
    hooks = hooks or {}
    if "indoor" in hooks:
        flags["indoor"] = not bool(hooks["indoor"])
    if "occlusion_fraction" in hooks:
        flags["occluded"] = float(hooks["occlusion_fraction"]) <= thresholds.max_occlusion
    return QualityReport(b, br, flags)


def filter_images(items: Sequence[tuple[Any, QualityReport]], thresholds: QualityThresholds = QualityThresholds()):
    """Split (key, report) pairs into kept items and a rejection log.

    Each log entry is ``{"key": key, "reasons": [...]}``; reasons use the
    flag names (``blur``, ``dark``, ``bright`` and any hook flags).
    """
    kept, rejected = [], []
    for key, rep in items:
        reasons = []
        if rep.blur_score < thresholds.min_blur:
            reasons.append("blur")
        if rep.brightness < thresholds.brightness_lo:
            reasons.append("dark")
        if rep.brightness > thresholds.brightness_hi:
            reasons.append("bright")
        for name, ok in rep.flags.items():
            if not ok and name not in reasons:
                reasons.append(name)
        if reasons:
            rejected.append({"key": key, "reasons": reasons})
        else:
            kept.append((key, rep))
    return kept, rejected


def load_hooks(path) -> dict[str, dict]:
    """Sidecar of external scene-model outputs, one JSON record per line keyed by image_id."""
    out = {}
    if path is None or not Path(path).exists():
        return out
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[str(rec["image_id"])] = rec
    return out


# ----------------------------------------------------------------------------
# corruptions


def corruption_rng(seed: int, image_id: str, kind: str) -> np.random.Generator:
    """Per-image generator. Severity is deliberately not mixed in so the same
    noise field scales across severities."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(image_id.encode("utf-8")), CORRUPTION_KINDS.index(kind)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _occlude(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    target = int(round(fraction * h * w))
    mask = np.zeros((h, w), dtype=bool)
    covered = 0
    while covered < target:
        rh = int(rng.integers(max(1, h // 10), max(2, h // 3) + 1))
        rw = int(rng.integers(max(1, w // 10), max(2, w // 3) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        block = ~mask[y0 : y0 + rh, x0 : x0 + rw]
        fresh = int(block.sum())
        if covered + fresh <= target:
            mask[y0 : y0 + rh, x0 : x0 + rw] = True
            covered += fresh
        else:
            # last rectangle: fill its uncovered pixels in raster order up to the target
            ys, xs = np.nonzero(block)
            need = target - covered
            mask[y0 + ys[:need], x0 + xs[:need]] = True
            covered = target
    out = img.copy()
    out[mask] = MID_GRAY
    return out


def corrupt(
    img: np.ndarray,
    spec: CorruptionSpec,
    seed: int,
    image_id: str = "",
    table: Mapping[str, Sequence[float]] | None = None,
) -> np.ndarray:
    """Apply one corruption level. Deterministic in (img, spec, seed, image_id)."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    table = table or DEFAULT_SEVERITY_TABLE
    param = table[spec.kind][spec.severity - 1]
    img = np.asarray(img, dtype=np.uint8)
    rng = corruption_rng(seed, image_id, spec.kind)
    if spec.kind == "occlusion":
        return _occlude(img, float(param), rng)
    if spec.kind == "motion_blur":
        length = int(param)
        kernel = np.full(length, 1.0 / length)
        out = ndimage.convolve1d(img.astype(np.float64), kernel, axis=1, mode="nearest")
    elif spec.kind == "gaussian_noise":
        out = img.astype(np.float64) + float(param) * rng.standard_normal(img.shape)
    else:
        out = img.astype(np.float64) * float(param)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def corruption_path(root, spec: CorruptionSpec, image_id: str) -> Path:
    return Path(root) / "corruptions" / spec.kind / str(spec.severity) / f"{image_id}.png"
