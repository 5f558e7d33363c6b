"""Building detection inside AOV crops through a pluggable detector client.

Clients speak one wire format: a request ``{image_b64, prompt, box_threshold}``
answered by ``{detections: [{box: [x0, y0, x1, y1], score, label}]}``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from facadescope import images
from facadescope._http import ProtocolError, ServiceError, post_json

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.35


@dataclass(frozen=True)
class DetectionRequest:
    crop: np.ndarray
    prompt: str = "building"
    score_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must be in (0, 1)")

    def to_wire(self) -> dict:
        return {
            "image_b64": base64.b64encode(images.png_bytes(self.crop)).decode("ascii"),
            "prompt": self.prompt,
            "box_threshold": self.score_threshold,
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(images.pixel_digest(self.crop).encode())
        h.update(b"\0" + self.prompt.encode("utf-8"))
        h.update(b"\0" + repr(float(self.score_threshold)).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    label: str = "building"

    def to_wire(self) -> dict:
        return {"box": list(self.box), "score": self.score, "label": self.label}


class DetectorClient(Protocol):
    def detect(self, request: DetectionRequest) -> dict: ...


class FallbackDetector:
    """Offline stand-in: the whole AOV crop is the building."""

    def detect(self, request: DetectionRequest) -> dict:
        h, w = request.crop.shape[:2]
        return {"detections": [{"box": [0, 0, w, h], "score": 1.0, "label": request.prompt}]}


class FixtureDetector:
    """Replays recorded responses stored as ``<request digest>.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, request: DetectionRequest) -> Path:
        return self.directory / f"{request.digest()}.json"

    def record(self, request: DetectionRequest, response: dict) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(request)
        path.write_text(json.dumps(response, sort_keys=True, indent=1))
        return path

    def detect(self, request: DetectionRequest) -> dict:
        path = self.path_for(request)
        if not path.exists():
            raise ServiceError(f"no fixture for request {request.digest()[:12]}", retryable=False)
        return json.loads(path.read_text())


class HttpDetector:
    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def detect(self, request: DetectionRequest) -> dict:
        return post_json(self.endpoint, request.to_wire(), self.timeout)


def _parse_detection(item) -> Detection:
    try:
        x0, y0, x1, y1 = (float(v) for v in item["box"])
        score = float(item["score"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed detection {item!r}") from exc
    return Detection((x0, y0, x1, y1), score, str(item.get("label", "building")))


def detect_buildings(req: DetectionRequest, client: DetectorClient) -> list[Detection]:
    """Detections at or above the request threshold, clipped to the crop and
    sorted by descending score."""
    response = client.detect(req)
    items = response.get("detections") if isinstance(response, dict) else None
    if not isinstance(items, list):
        raise ProtocolError("response lacks a 'detections' list")
    h, w = req.crop.shape[:2]
    out = []
    for item in items:
        det = _parse_detection(item)
        if det.score < req.score_threshold:
            continue
        x0, y0, x1, y1 = det.box
        clipped = (min(max(x0, 0.0), w), min(max(y0, 0.0), h), min(max(x1, 0.0), w), min(max(y1, 0.0), h))
        if clipped != det.box:
            log.warning("detection box %s clipped to crop %dx%d", det.box, w, h)
        if clipped[2] <= clipped[0] or clipped[3] <= clipped[1]:
            continue
        out.append(Detection(clipped, min(det.score, 1.0), det.label))
    out.sort(key=lambda d: (-d.score, d.box, d.label))
    return out


def _band_overlap(box, w: float, h: float, band: float) -> float:
    lo, hi = (1.0 - band) / 2.0 * w, (1.0 + band) / 2.0 * w
    x0, y0, x1, y1 = box
    ow = max(0.0, min(x1, hi) - max(x0, lo))
    oh = max(0.0, min(y1, h) - max(y0, 0.0))
    return ow * oh


def pick_target_detection(dets: Sequence[Detection], crop_dims: tuple[int, int], band: float = 0.8) -> Detection | None:
    """The detection overlapping most with the central ``band`` of the crop
    width; ties go to the higher score. ``crop_dims`` is (width, height)."""
    if not dets:
        return None
    w, h = crop_dims
    return min(dets, key=lambda d: (-_band_overlap(d.box, w, h, band), -d.score, d.box, d.label))
