"""Head/image annotation records, the JSON dataset file, and category buckets.

Dataset file layout::

    {"version": 1,
     "images": [{"id": "...", "width": W, "height": H, "scene_label": "...",
                 "weather": "none|rain|snow|fog_haze", "is_distractor": false,
                 "split": "train|val|test",
                 "heads": [[x, y, occlusion, blur, size_level], ...]}]}

occlusion: 0 un-occluded, 1 partially occluded, 2 fully occluded.
blur: 0 blur, 1 no-blur.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetParseError, UsageError, ValidationError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOW_MAX = 50
MEDIUM_MAX = 500


class Occlusion(enum.IntEnum):
    UNOCCLUDED = 0
    PARTIALLY_OCCLUDED = 1
    FULLY_OCCLUDED = 2


class Blur(enum.IntEnum):
    BLUR = 0
    NO_BLUR = 1


class Weather(str, enum.Enum):
    NONE = "none"
    RAIN = "rain"
    SNOW = "snow"
    FOG_HAZE = "fog_haze"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Category(str, enum.Enum):
    DISTRACTORS = "Distractors"
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"
    WEATHER = "Weather"
    OVERALL = "Overall"


# reporting order, matching the benchmark table columns
CATEGORY_ORDER = (
    Category.DISTRACTORS, Category.LOW, Category.MEDIUM, Category.HIGH, Category.WEATHER, Category.OVERALL,
)


@dataclass(frozen=True)
class HeadAnnotation:
    x: float
    y: float
    occlusion: Occlusion = Occlusion.UNOCCLUDED
    blur: Blur = Blur.NO_BLUR
    size_level: int = 0

    def to_row(self) -> list:
        return [self.x, self.y, int(self.occlusion), int(self.blur), self.size_level]


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: int
    height: int
    heads: tuple = ()
    scene_label: str = ""
    weather: Weather = Weather.NONE
    is_distractor: bool = False
    split: Split = Split.TRAIN

    @property
    def count(self) -> int:
        return len(self.heads)

    def points(self) -> list[tuple[float, float]]:
        return [(h.x, h.y) for h in self.heads]

    def with_split(self, split: Split) -> "ImageRecord":
        return replace(self, split=split)


def validate_record(rec: ImageRecord) -> list[str]:
    """Invariant violations for one record (empty list when valid)."""
    problems = []
    if not isinstance(rec.width, int) or not isinstance(rec.height, int) or rec.width < 1 or rec.height < 1:
        problems.append(f"width/height must be positive integers, got {rec.width}x{rec.height}")
        return problems
    if rec.is_distractor and rec.heads:
        problems.append(f"is_distractor: distractor image has {len(rec.heads)} heads")
    for n, h in enumerate(rec.heads):
        if not (math.isfinite(h.x) and math.isfinite(h.y)):
            problems.append(f"heads[{n}]: non-finite coordinate")
        elif not (0 <= h.x < rec.width and 0 <= h.y < rec.height):
            problems.append(f"heads[{n}]: head out of bounds ({h.x}, {h.y}) for {rec.width}x{rec.height}")
        if not isinstance(h.size_level, int) or h.size_level < 0:
            problems.append(f"heads[{n}]: size_level must be a non-negative integer")
    return problems


_IMAGE_KEYS = ("id", "width", "height", "scene_label", "weather", "is_distractor", "split", "heads")


def record_to_dict(rec: ImageRecord) -> dict:
    return {
        "id": rec.id,
        "width": rec.width,
        "height": rec.height,
        "scene_label": rec.scene_label,
        "weather": rec.weather.value,
        "is_distractor": rec.is_distractor,
        "split": rec.split.value,
        "heads": [h.to_row() for h in rec.heads],
    }


def _head_from_row(row, rid, n) -> HeadAnnotation:
    if not isinstance(row, list) or len(row) != 5:
        raise ValidationError([(rid, f"heads[{n}]: expected [x, y, occlusion, blur, size_level]")])
    x, y, occ, blur, size = row
    try:
        return HeadAnnotation(float(x), float(y), Occlusion(occ), Blur(blur), size)
    except (ValueError, TypeError) as exc:
        raise ValidationError([(rid, f"heads[{n}]: {exc}")]) from None


def record_from_dict(obj: dict, strict: bool = True) -> ImageRecord:
    rid = str(obj.get("id", "<missing id>"))
    unknown = sorted(set(obj) - set(_IMAGE_KEYS))
    if unknown:
        if strict:
            raise ValidationError([(rid, f"unknown keys {unknown}")])
        log.warning("record %s: ignoring unknown keys %s", rid, unknown)
    missing = [k for k in _IMAGE_KEYS if k not in obj]
    if missing:
        raise ValidationError([(rid, f"missing keys {missing}")])
    try:
        weather = Weather(obj["weather"])
    except ValueError:
        raise ValidationError([(rid, f"weather: invalid value {obj['weather']!r}")]) from None
    try:
        split = Split(obj["split"])
    except ValueError:
        raise ValidationError([(rid, f"split: invalid value {obj['split']!r}")]) from None
    if not isinstance(obj["is_distractor"], bool):
        raise ValidationError([(rid, "is_distractor: must be a boolean")])
    if not isinstance(obj["heads"], list):
        raise ValidationError([(rid, "heads: must be an array")])
    heads = tuple(_head_from_row(row, rid, n) for n, row in enumerate(obj["heads"]))
    return ImageRecord(
        id=rid, width=obj["width"], height=obj["height"], heads=heads,
        scene_label=str(obj["scene_label"]), weather=weather,
        is_distractor=obj["is_distractor"], split=split,
    )


def loads_dataset(text: str, strict: bool = True) -> list[ImageRecord]:
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise DatasetParseError("top level must be an object")
    extra = sorted(set(doc) - {"version", "images"})
    if extra:
        if strict:
            raise DatasetParseError(f"unknown top-level keys {extra}")
        log.warning("ignoring unknown top-level keys %s", extra)
    if doc.get("version") != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported version {doc.get('version')!r}")
    images = doc.get("images")
    if not isinstance(images, list):
        raise DatasetParseError("'images' must be an array")

    records, diagnostics = [], []
    seen = set()
    for obj in images:
        if not isinstance(obj, dict):
            diagnostics.append(("<unknown>", "image entry must be an object"))
            continue
        try:
            rec = record_from_dict(obj, strict=strict)
        except ValidationError as exc:
            diagnostics.extend(exc.diagnostics)
            continue
        if rec.id in seen:
            diagnostics.append((rec.id, "id: duplicate record id"))
        seen.add(rec.id)
        diagnostics.extend((rec.id, p) for p in validate_record(rec))
        records.append(rec)
    if diagnostics:
        raise ValidationError(diagnostics)
    return records


def parse_dataset(path, strict: bool = True) -> list[ImageRecord]:
    """Read and validate a dataset file. Raises on the first bad file, after
    collecting every record-level problem."""
    return loads_dataset(Path(path).read_text(encoding="utf-8"), strict=strict)


def dumps_dataset(records) -> str:
    doc = {"version": FORMAT_VERSION, "images": [record_to_dict(r) for r in records]}
    return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"


def write_dataset(records, path) -> None:
    Path(path).write_text(dumps_dataset(records), encoding="utf-8")


def categorize(record: ImageRecord, distractors_in_low: bool = False) -> set[Category]:
    """Reporting buckets for one image, from its ground-truth count.

    Low/Medium/High are inclusive ranges 0-50 / 51-500 / >500. Distractors are
    kept out of Low unless ``distractors_in_low``. Weather overlays the density
    bucket.
    """
    cats = {Category.OVERALL}
    n = record.count
    if record.is_distractor:
        cats.add(Category.DISTRACTORS)
        if distractors_in_low:
            cats.add(Category.LOW)
    elif n <= LOW_MAX:
        cats.add(Category.LOW)
    elif n <= MEDIUM_MAX:
        cats.add(Category.MEDIUM)
    else:
        cats.add(Category.HIGH)
    if record.weather is not Weather.NONE:
        cats.add(Category.WEATHER)
    return cats


def split_train_val(records, val_fraction: float = 0.10, seed: int = 0):
    """Hold out round(val_fraction * N) training images for validation.

    Returns (train, val); the chosen images get ``split=VAL``. Selection is
    made on whole images, before any patch cropping.
    """
    if not 0 < val_fraction < 1:
        raise UsageError(f"val_fraction must be in (0, 1), got {val_fraction}")
    records = list(records)
    n = len(records)
    if n < 2:
        raise UsageError(f"need at least 2 training images to split, got {n}")
    n_val = int(math.floor(val_fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.permutation(n)[:n_val].tolist())
    train = [r.with_split(Split.TRAIN) for k, r in enumerate(records) if k not in val_idx]
    val = [r.with_split(Split.VAL) for k, r in enumerate(records) if k in val_idx]
    return train, val
