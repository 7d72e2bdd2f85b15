"""Domain types and the annotation / detection file formats.

All thresholds are physical (micrometers); pixel coordinates are only a
storage format and are converted through the per-image resolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from operator import attrgetter
from typing import Iterable, Mapping, Sequence

from .errors import CrossImageError, ImageReferenceError, RangeError, SchemaError


class Label(str, Enum):
    HE_AND_PHH3 = "HE_AND_PHH3"
    HE_ONLY = "HE_ONLY"
    PHH3_ONLY = "PHH3_ONLY"


@dataclass(frozen=True)
class ImageMeta:
    image_id: str
    width_px: int
    height_px: int
    mpp: float  # micrometers per pixel, isotropic

    def __post_init__(self):
        if not self.mpp > 0 or not math.isfinite(self.mpp):
            raise RangeError(f"image {self.image_id!r}: mpp must be positive, got {self.mpp}")
        if self.width_px < 1 or self.height_px < 1:
            raise RangeError(f"image {self.image_id!r}: dimensions must be >= 1")

    @property
    def area_mm2(self) -> float:
        return self.width_px * self.height_px * self.mpp**2 / 1e6

    def contains(self, x_px: float, y_px: float) -> bool:
        return 0 <= x_px <= self.width_px and 0 <= y_px <= self.height_px


@dataclass(frozen=True)
class PointAnnotation:
    annotation_id: str
    rater_id: str
    image_id: str
    x_px: float
    y_px: float
    label: Label = Label.HE_AND_PHH3

    @property
    def sort_key(self) -> tuple[str, str, str]:
        return (self.image_id, self.rater_id, self.annotation_id)


@dataclass(frozen=True)
class Point:
    """A bare located point (ground-truth MF, consensus centre, ...)."""

    image_id: str
    x_px: float
    y_px: float


@dataclass(frozen=True)
class Detection:
    image_id: str
    x_px: float
    y_px: float
    confidence: float
    box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise RangeError(f"confidence {self.confidence} outside [0, 1]")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (x0 < x1 and y0 < y1):
                raise RangeError(f"degenerate box {self.box}")
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            if not (math.isclose(cx, self.x_px, abs_tol=1e-9) and math.isclose(cy, self.y_px, abs_tol=1e-9)):
                raise RangeError(f"detection centre ({self.x_px}, {self.y_px}) is not the box midpoint")

    @classmethod
    def from_box(cls, image_id: str, box: Sequence[float], confidence: float) -> "Detection":
        x0, y0, x1, y1 = (float(v) for v in box)
        return cls(image_id, (x0 + x1) / 2, (y0 + y1) / 2, confidence, (x0, y0, x1, y1))


@dataclass(frozen=True)
class LabelFilter:
    labels: frozenset[Label] = field(default_factory=lambda: frozenset({Label.HE_AND_PHH3, Label.HE_ONLY}))

    def __post_init__(self):
        if not self.labels:
            raise SchemaError("label filter must include at least one label")
        object.__setattr__(self, "labels", frozenset(Label(l) for l in self.labels))

    @classmethod
    def all(cls) -> "LabelFilter":
        return cls(frozenset(Label))

    @classmethod
    def parse(cls, text: str) -> "LabelFilter":
        """Parse a comma separated list such as ``he_and_phh3,he_only``."""
        names = [t.strip().upper() for t in text.split(",") if t.strip()]
        try:
            return cls(frozenset(Label(n) for n in names))
        except ValueError as exc:
            raise SchemaError(f"unknown label in {text!r}") from exc

    def __contains__(self, label: Label) -> bool:
        return label in self.labels

    def to_list(self) -> list[str]:
        return sorted(l.value for l in self.labels)


def distance_um(a, b, mpp: float) -> float:
    """Physical distance between two same-image points."""
    if a.image_id != b.image_id:
        raise CrossImageError(f"{a.image_id!r} vs {b.image_id!r}")
    return mpp * math.hypot(a.x_px - b.x_px, a.y_px - b.y_px)


def filter_labels(annotations: Iterable[PointAnnotation], label_filter: LabelFilter) -> list[PointAnnotation]:
    return [a for a in annotations if a.label in label_filter.labels]


def canonical_order(annotations: Iterable[PointAnnotation]) -> list[PointAnnotation]:
    return sorted(annotations, key=attrgetter("image_id", "rater_id", "annotation_id"))


def image_index(images: Iterable[ImageMeta]) -> dict[str, ImageMeta]:
    return {im.image_id: im for im in images}


# -- file formats ---------------------------------------------------------

_IMAGE_FIELDS = {"image_id": str, "width_px": int, "height_px": int, "mpp_um_per_px": float}
_ANNOTATION_FIELDS = {
    "annotation_id": str,
    "rater_id": str,
    "image_id": str,
    "x_px": float,
    "y_px": float,
    "label": str,
}


def _load_json(data: bytes | str) -> object:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("document is not valid UTF-8") from exc
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc


def _check_type(value, kind, where: str):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
        return float(value) if ok else _bad(where, "number", value)
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
        return value if ok else _bad(where, "integer", value)
    if not isinstance(value, kind):
        _bad(where, kind.__name__, value)
    return value


def _bad(where, expected, value):
    raise SchemaError(f"{where}: expected {expected}, got {value!r}")


def _record(obj, spec: Mapping[str, type], where: str, optional: Mapping[str, type] = {}) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected object")
    missing = set(spec) - set(obj)
    extra = set(obj) - set(spec) - set(optional)
    if missing:
        raise SchemaError(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaError(f"{where}: unexpected fields {sorted(extra)}")
    out = {k: _check_type(obj[k], t, f"{where}.{k}") for k, t in spec.items()}
    for k, t in optional.items():
        if k in obj:
            out[k] = obj[k]
    return out


def _top_level(doc, keys: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    missing = keys - set(doc)
    extra = set(doc) - keys - optional
    if missing or extra:
        raise SchemaError(f"top-level keys: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k in keys:
        if not isinstance(doc[k], list):
            raise SchemaError(f"{k!r} must be a list")
    return doc


def parse_images(records: list) -> list[ImageMeta]:
    images = []
    seen = set()
    for i, rec in enumerate(records):
        r = _record(rec, _IMAGE_FIELDS, f"images[{i}]")
        if r["image_id"] in seen:
            raise SchemaError(f"duplicate image_id {r['image_id']!r}")
        seen.add(r["image_id"])
        images.append(ImageMeta(r["image_id"], r["width_px"], r["height_px"], r["mpp_um_per_px"]))
    return sorted(images, key=lambda im: im.image_id)


def parse_annotations(data: bytes | str) -> tuple[list[ImageMeta], list[PointAnnotation]]:
    """Parse an annotation document into canonically ordered images and annotations."""
    doc = _top_level(_load_json(data), {"images", "annotations"})
    images = parse_images(doc["images"])
    index = image_index(images)
    annotations = []
    seen = set()
    for i, rec in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        r = _record(rec, _ANNOTATION_FIELDS, where)
        try:
            label = Label(r["label"])
        except ValueError:
            raise SchemaError(f"{where}.label: unknown label {r['label']!r}") from None
        if r["annotation_id"] in seen:
            raise SchemaError(f"duplicate annotation_id {r['annotation_id']!r}")
        seen.add(r["annotation_id"])
        image = index.get(r["image_id"])
        if image is None:
            raise ImageReferenceError(f"{where}: unknown image_id {r['image_id']!r}")
        if not image.contains(r["x_px"], r["y_px"]):
            raise RangeError(f"{where}: ({r['x_px']}, {r['y_px']}) outside image {image.image_id!r}")
        annotations.append(
            PointAnnotation(r["annotation_id"], r["rater_id"], r["image_id"], r["x_px"], r["y_px"], label)
        )
    return images, canonical_order(annotations)


def image_records(images: Iterable[ImageMeta]) -> list[dict]:
    return [
        {"image_id": im.image_id, "width_px": im.width_px, "height_px": im.height_px, "mpp_um_per_px": im.mpp}
        for im in sorted(images, key=lambda im: im.image_id)
    ]


def dumps(doc) -> bytes:
    """Deterministic JSON encoding (floats use shortest round-trip repr)."""
    return (json.dumps(doc, indent=1, ensure_ascii=False, allow_nan=False) + "\n").encode("utf-8")


def dump_annotations(images: Iterable[ImageMeta], annotations: Iterable[PointAnnotation]) -> bytes:
    doc = {
        "images": image_records(images),
        "annotations": [
            {
                "annotation_id": a.annotation_id,
                "rater_id": a.rater_id,
                "image_id": a.image_id,
                "x_px": float(a.x_px),
                "y_px": float(a.y_px),
                "label": a.label.value,
            }
            for a in canonical_order(annotations)
        ],
    }
    return dumps(doc)


def parse_detections(data: bytes | str, images: Mapping[str, ImageMeta] | None = None) -> list[Detection]:
    """Parse a detection document; input order is preserved (it breaks confidence ties)."""
    doc = _top_level(_load_json(data), {"detections"})
    spec = {"image_id": str, "x_px": float, "y_px": float, "confidence": float}
    out = []
    for i, rec in enumerate(doc["detections"]):
        where = f"detections[{i}]"
        r = _record(rec, spec, where, optional={"box": list})
        box = r.get("box")
        if box is not None:
            if not isinstance(box, list) or len(box) != 4:
                raise SchemaError(f"{where}.box: expected [x0, y0, x1, y1]")
            box = tuple(_check_type(v, float, f"{where}.box") for v in box)
        if images is not None:
            image = images.get(r["image_id"])
            if image is None:
                raise ImageReferenceError(f"{where}: unknown image_id {r['image_id']!r}")
            if not image.contains(r["x_px"], r["y_px"]):
                raise RangeError(f"{where}: centre outside image {image.image_id!r}")
        out.append(Detection(r["image_id"], r["x_px"], r["y_px"], r["confidence"], box))
    return out


def dump_detections(detections: Iterable[Detection]) -> bytes:
    recs = []
    for d in detections:
        rec = {"image_id": d.image_id, "x_px": float(d.x_px), "y_px": float(d.y_px), "confidence": float(d.confidence)}
        if d.box is not None:
            rec["box"] = [float(v) for v in d.box]
        recs.append(rec)
    return dumps({"detections": recs})
