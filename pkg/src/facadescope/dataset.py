"""Label assembly, prompt templates, annotator clients and the
building-disjoint train/val/test split."""
from __future__ import annotations

import base64
import datetime as _dt
import json
import logging
import re
import time
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from facadescope import images
from facadescope._http import ProtocolError, ServiceError, post_json
from facadescope.ingest import BuildingFootprint, leading_year

log = logging.getLogger(__name__)

BUILDING_TYPES = ("apartments", "house", "retail", "office", "hotel", "industrial", "religious", "education", "public", "garage")
MATERIALS = ("brick", "wood", "concrete", "metal", "stone", "glass", "plaster")
SPLITS = ("train", "val", "test")

SINGLE_WORD_QUESTIONS = {
    "type": "Assign a brief label for the building type of the building in the image.",
    "material": "Assign a brief label for the surface material of the building in the image.",
    "floors": "Assign a brief label for the floor count of the building in the image.",
    "age_year": "Assign a brief label for the construction year of the building in the image.",
}


def _options(vocab) -> str:
    return ", ".join(f"'{v}'" for v in vocab)


MULTI_ATTR_PROMPT = "\n".join(
    [
        "Provide concise labels for each category using the following JSON format. "
        "Select appropriate values from the provided options for each category:",
        f'{{"building_type": "(choose one option from: {_options(BUILDING_TYPES)})",',
        f'"alternate_building_type": "(choose one option from: {_options(BUILDING_TYPES)})",',
        '"building_age": "(a 4-digit year indicating the approximate construction date of the building)",',
        '"floors": "(a numeric value representing the total number of floors)",',
        f'"surface_material": "(choose one option from: {_options(MATERIALS)})",',
        f'"alternate_surface_material": "(choose one option from: {_options(MATERIALS)})"}}',
    ]
)

CAPTION_PROMPT = (
    "Analyze the building shown in the image and provide a detailed description of its "
    "architectural features. Then, describe the building type, the building's age (by "
    "specifying an approximate construction year), the primary facade material (the main "
    "material visible on the building's surface), the construction material, and the total "
    "number of floors in the building."
)


class AnnotationParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class VocabularyError(ValueError):
    def __init__(self, field_name: str, value):
        super().__init__(f"{field_name}: {value!r} is not an allowed value")
        self.field = field_name
        self.value = value


@dataclass
class LabelRecord:
    image_id: str
    building_id: str
    type: str | None = None
    material: str | None = None
    floors: int | None = None
    age_year: int | None = None
    caption: str | None = None
    multi_attr: dict | None = None
    city: str | None = None
    unmapped: dict[str, str] = field(default_factory=dict)

    def populated(self) -> list[str]:
        return [k for k in ("type", "material", "floors", "age_year") if getattr(self, k) is not None]

    def to_record(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# labels


def _int_tag(value, name: str) -> int | None:
    try:
        v = float(str(value).strip())
    except ValueError:
        log.warning("unparseable %s tag %r", name, value)
        return None
    if not v.is_integer() or v < 0:
        log.warning("unusable %s tag %r", name, value)
        return None
    return int(v)


def assign_labels(building: BuildingFootprint, image_id: str, city: str | None = None) -> LabelRecord:
    tags = building.tags
    rec = LabelRecord(image_id=image_id, building_id=building.id, city=city)
    btype = tags.get("building")
    if btype not in (None, "", "yes"):
        if btype in BUILDING_TYPES:
            rec.type = btype
        else:
            rec.unmapped["building"] = btype
    material = tags.get("building:material")
    if material:
        if material in MATERIALS:
            rec.material = material
        else:
            rec.unmapped["building:material"] = material
    if tags.get("building:levels") not in (None, ""):
        rec.floors = _int_tag(tags["building:levels"], "building:levels")
    if tags.get("start_date") not in (None, ""):
        year = leading_year(tags["start_date"])
        if year is None or not 1000 <= year <= _dt.date.today().year:
            log.warning("unparseable start_date %r on %s", tags["start_date"], building.id)
        else:
            rec.age_year = year
    return rec


def make_single_word_qa(rec: LabelRecord) -> list[tuple[str, str]]:
    fields = rec.populated()
    if not fields:
        raise ValueError(f"record {rec.image_id} has no populated attribute")
    return [(SINGLE_WORD_QUESTIONS[f], str(getattr(rec, f))) for f in fields]


def make_multi_attr_prompt() -> str:
    return MULTI_ATTR_PROMPT


def make_caption_prompt() -> str:
    return CAPTION_PROMPT


# ----------------------------------------------------------------------------
# multi-attribute replies

MULTI_ATTR_FIELDS = (
    "building_type",
    "alternate_building_type",
    "building_age",
    "floors",
    "surface_material",
    "alternate_surface_material",
)
_VOCAB = {
    "building_type": BUILDING_TYPES,
    "alternate_building_type": BUILDING_TYPES,
    "surface_material": MATERIALS,
    "alternate_surface_material": MATERIALS,
}
_FIRST_INT = re.compile(r"-?\d+")
_YEAR = re.compile(r"(?<!\d)(\d{4})(?!\d)")


def first_json_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _coerce_int(value, name: str, pattern: re.Pattern) -> int:
    if isinstance(value, bool):
        raise VocabularyError(name, value)
    if isinstance(value, (int, float)) and float(value).is_integer():
        return int(value)
    m = pattern.search(str(value))
    if not m:
        raise VocabularyError(name, value)
    return int(m.group(1) if m.groups() else m.group(0))


def parse_multi_attr(reply: str) -> dict:
    """Structured annotation from a model reply. Missing fields become None."""
    if not reply or not reply.strip():
        raise AnnotationParseError("empty reply", reply or "")
    obj = first_json_object(reply)
    if obj is None:
        raise AnnotationParseError("no JSON object in reply", reply)
    out: dict = {}
    for name in MULTI_ATTR_FIELDS:
        value = obj.get(name)
        if value in (None, ""):
            out[name] = None
        elif name in _VOCAB:
            v = str(value).strip().lower()
            if v not in _VOCAB[name]:
                raise VocabularyError(name, value)
            out[name] = v
        elif name == "building_age":
            year = _coerce_int(value, name, _YEAR)
            if not 1000 <= year <= _dt.date.today().year:
                raise VocabularyError(name, value)
            out[name] = year
        else:
            floors = _coerce_int(value, name, _FIRST_INT)
            if floors < 0:
                raise VocabularyError(name, value)
            out[name] = floors
    return out


def make_multi_attr_reply(annotation: Mapping) -> str:
    return json.dumps({k: annotation.get(k) for k in MULTI_ATTR_FIELDS})


# ----------------------------------------------------------------------------
# annotator clients


@dataclass(frozen=True)
class AnnotationReply:
    text: str
    model: str
    latency_s: float


class AnnotatorClient(Protocol):
    def annotate(self, image: np.ndarray, prompt: str) -> dict: ...


def fixture_key(image: np.ndarray, prompt: str) -> str:
    return f"{images.pixel_digest(image)[:32]}_{images.text_digest(prompt)[:16]}"


class FixtureAnnotator:
    """Replays recorded replies stored as ``<image digest>_<prompt digest>.json``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def record(self, image: np.ndarray, prompt: str, reply: str, model: str = "fixture") -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"{fixture_key(image, prompt)}.json"
        path.write_text(json.dumps({"reply": reply, "model": model}, sort_keys=True, indent=1))
        return path

    def annotate(self, image: np.ndarray, prompt: str) -> dict:
        path = self.directory / f"{fixture_key(image, prompt)}.json"
        if not path.exists():
            raise ServiceError("no fixture", retryable=False)
        return json.loads(path.read_text())


class HttpAnnotator:
    def __init__(self, endpoint: str, model: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout

    def annotate(self, image: np.ndarray, prompt: str) -> dict:
        body = {
            "image_b64": base64.b64encode(images.png_bytes(image)).decode("ascii"),
            "prompt": prompt,
            "model": self.model,
        }
        return post_json(self.endpoint, body, self.timeout)


def request_annotation(client: AnnotatorClient, image, prompt: str) -> AnnotationReply:
    pixels = getattr(image, "pixels", image)
    t0 = time.perf_counter()
    payload = client.annotate(pixels, prompt)
    latency = time.perf_counter() - t0
    if not isinstance(payload, dict) or not isinstance(payload.get("reply"), str):
        raise ProtocolError("annotator response lacks a 'reply' string")
    return AnnotationReply(payload["reply"], str(payload.get("model", "")), latency)


# ----------------------------------------------------------------------------
# split


def _class_of(rec: LabelRecord, attr: str | None):
    return getattr(rec, attr) if attr else None


def split_dataset(
    records: Sequence[LabelRecord],
    ratio: Sequence[float] = (6, 1, 3),
    seed: int = 0,
    balance_attribute: str | None = None,
    max_test_class_share: float = 0.5,
) -> dict[str, str]:
    """Assign whole buildings to train/val/test.

    Groups are visited largest first (seeded shuffle among equal sizes) and
    each goes to the split furthest below its image-count target. With
    ``balance_attribute`` set, test takes at most an equal share per class
    of that attribute, and never more than ``max_test_class_share`` of a
    class's images, so the test split is as balanced as the data allows
    under whole-building assignment.
    """
    if not records:
        raise ValueError("no records to split")
    if len(ratio) != 3 or min(ratio) < 0 or sum(ratio) <= 0:
        raise ValueError(f"invalid split ratio {ratio}")
    groups: dict[str, list[LabelRecord]] = defaultdict(list)
    for r in records:
        groups[r.building_id].append(r)
    if len(groups) < 10:
        warnings.warn(f"only {len(groups)} buildings; split will be degenerate", stacklevel=2)

    rng = np.random.default_rng(seed)
    ids = sorted(groups)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    # stable sort keeps the seeded order among equal sizes
    order = sorted(shuffled, key=lambda b: -len(groups[b]))

    total = len(records)
    weights = np.asarray(ratio, dtype=float) / float(sum(ratio))
    targets = weights * total
    counts = np.zeros(3)

    quota: dict | None = None
    test_class = Counter()
    if balance_attribute:
        avail = Counter()
        for r in records:
            c = _class_of(r, balance_attribute)
            if c is not None:
                avail[c] += 1
        quota = _water_fill(targets[2], {c: n * max_test_class_share for c, n in avail.items()})

    assignment: dict[str, str] = {}
    for b in order:
        members = groups[b]
        size = len(members)
        ranked = sorted(range(3), key=lambda k: (-(targets[k] - counts[k]), k))
        choice = ranked[0]
        if quota is not None and choice == 2:
            cls = Counter(_class_of(r, balance_attribute) for r in members)
            over = any(c is not None and test_class[c] + n > quota.get(c, 0.0) + 1e-9 for c, n in cls.items())
            if over:
                choice = ranked[1]
        counts[choice] += size
        if choice == 2:
            for r in members:
                c = _class_of(r, balance_attribute) if quota is not None else None
                if c is not None:
                    test_class[c] += 1
        for r in members:
            assignment[r.image_id] = SPLITS[choice]
    return assignment


def _water_fill(total: float, caps: Mapping) -> dict:
    """Split ``total`` as evenly as possible across classes subject to caps."""
    out = {c: 0.0 for c in caps}
    remaining = total
    open_ = sorted(caps, key=lambda c: caps[c])
    while open_ and remaining > 1e-9:
        share = remaining / len(open_)
        c = open_[0]
        if caps[c] - out[c] <= share:
            remaining -= caps[c] - out[c]
            out[c] = caps[c]
            open_.pop(0)
        else:
            for c in open_:
                out[c] += share
            remaining = 0.0
    return out
