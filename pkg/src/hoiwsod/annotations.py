"""HOI annotation data model, JSON I/O and source/target splitting."""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

NUM_JOINTS = 18
NO_INTERACTION = "no_interaction"

Keypoint = Optional[tuple[float, float]]


class AnnotationError(ValueError):
    """Raised when an annotation file or record violates the schema."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise AnnotationError(f"non-finite box coordinates {vals}")
        if min(vals) < 0:
            raise AnnotationError(f"negative box coordinates {vals}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise AnnotationError(f"inverted box corners {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def inside(self, width: float, height: float) -> bool:
        return self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class HoiTuple:
    """One (verb, object) interaction of the single annotated human."""

    verb: str
    object_class: str
    object_box: Optional[BoundingBox]
    keypoints: tuple[Keypoint, ...]

    def __post_init__(self) -> None:
        if not self.verb:
            raise AnnotationError("empty verb")
        if not self.object_class:
            raise AnnotationError("empty object_class")
        if len(self.keypoints) != NUM_JOINTS:
            raise AnnotationError(
                f"expected {NUM_JOINTS} keypoint slots, got {len(self.keypoints)}"
            )

    def with_box(self, box: Optional[BoundingBox]) -> "HoiTuple":
        return HoiTuple(self.verb, self.object_class, box, self.keypoints)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_path: str
    width: int
    height: int
    tuples: tuple[HoiTuple, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: non-positive image size")
        for j, t in enumerate(self.tuples):
            if t.object_box is not None and not t.object_box.inside(self.width, self.height):
                raise AnnotationError(
                    f"{self.image_id}: tuple {j} object_box {t.object_box.as_list()} "
                    f"outside {self.width}x{self.height} image"
                )
            for k, kp in enumerate(t.keypoints):
                if kp is None:
                    continue
                x, y = kp
                if not (0 <= x <= self.width and 0 <= y <= self.height):
                    raise AnnotationError(
                        f"{self.image_id}: tuple {j} keypoint {k} {kp} outside image"
                    )


@dataclass(frozen=True)
class SplitSpec:
    source_classes: frozenset[str]
    target_classes: frozenset[str]
    verbs: frozenset[str]

    def __post_init__(self) -> None:
        overlap = self.source_classes & self.target_classes
        if overlap:
            raise AnnotationError(f"classes on both sides of the split: {sorted(overlap)}")

    def classes(self, side: str) -> frozenset[str]:
        if side == "source":
            return self.source_classes
        if side == "target":
            return self.target_classes
        raise ValueError(f"unknown split side {side!r} (expected 'source' or 'target')")

    def to_json(self) -> dict:
        return {
            "source_classes": sorted(self.source_classes),
            "target_classes": sorted(self.target_classes),
            "verbs": sorted(self.verbs),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplitSpec":
        return cls(
            frozenset(doc["source_classes"]),
            frozenset(doc["target_classes"]),
            frozenset(doc["verbs"]),
        )


# --------------------------------------------------------------------------
# JSON (de)serialization


def _parse_tuple(raw: dict, image_id: str, j: int) -> HoiTuple:
    where = f"image {image_id!r} tuple {j}"
    try:
        verb = raw["verb"]
        cls = raw["object_class"]
        box_raw = raw.get("object_box")
        kps_raw = raw["keypoints"]
    except KeyError as exc:
        raise AnnotationError(f"{where}: missing field {exc.args[0]!r}") from None
    if not isinstance(verb, str) or not isinstance(cls, str):
        raise AnnotationError(f"{where}: verb/object_class must be strings")
    box = None
    if box_raw is not None:
        if not isinstance(box_raw, list) or len(box_raw) != 4:
            raise AnnotationError(f"{where}: field 'object_box' must be 4 numbers or null")
        try:
            box = BoundingBox(*(float(v) for v in box_raw))
        except AnnotationError as exc:
            raise AnnotationError(f"{where}: field 'object_box': {exc}") from None
    if not isinstance(kps_raw, list) or len(kps_raw) != NUM_JOINTS:
        n = len(kps_raw) if isinstance(kps_raw, list) else "non-list"
        raise AnnotationError(f"{where}: field 'keypoints' must have {NUM_JOINTS} slots, got {n}")
    kps: list[Keypoint] = []
    for k, kp in enumerate(kps_raw):
        if kp is None:
            kps.append(None)
        elif isinstance(kp, list) and len(kp) == 2:
            kps.append((float(kp[0]), float(kp[1])))
        else:
            raise AnnotationError(f"{where}: field 'keypoints'[{k}] must be [x, y] or null")
    try:
        return HoiTuple(verb, cls, box, tuple(kps))
    except AnnotationError as exc:
        raise AnnotationError(f"{where}: {exc}") from None


def records_from_json(doc: dict) -> list[ImageRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise AnnotationError("annotation document must be an object with an 'images' list")
    records = []
    seen: set[str] = set()
    for i, raw in enumerate(doc["images"]):
        image_id = str(raw.get("image_id", f"#{i}"))
        for key in ("image_id", "image_path", "width", "height", "tuples"):
            if key not in raw:
                raise AnnotationError(f"image {image_id!r}: missing field {key!r}")
        if image_id in seen:
            raise AnnotationError(f"image {image_id!r}: duplicate image_id")
        seen.add(image_id)
        tuples = tuple(_parse_tuple(t, image_id, j) for j, t in enumerate(raw["tuples"]))
        try:
            rec = ImageRecord(image_id, str(raw["image_path"]), int(raw["width"]),
                              int(raw["height"]), tuples)
        except AnnotationError as exc:
            msg = str(exc)
            if not msg.startswith(image_id):
                msg = f"image {image_id!r}: {msg}"
            raise AnnotationError(msg) from None
        records.append(rec)
    return records


def records_to_json(records: Sequence[ImageRecord]) -> dict:
    images = []
    for rec in records:
        images.append({
            "image_id": rec.image_id,
            "image_path": rec.image_path,
            "width": rec.width,
            "height": rec.height,
            "tuples": [
                {
                    "verb": t.verb,
                    "object_class": t.object_class,
                    "object_box": None if t.object_box is None else t.object_box.as_list(),
                    "keypoints": [None if kp is None else [kp[0], kp[1]] for kp in t.keypoints],
                }
                for t in rec.tuples
            ],
        })
    return {"images": images}


def write_json_atomic(path: str | os.PathLike, doc) -> None:
    """Write ``doc`` as JSON via a temp file + rename in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str | os.PathLike) -> list[ImageRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: invalid JSON: {exc}") from None
    return records_from_json(doc)


def save_dataset(records: Sequence[ImageRecord], path: str | os.PathLike) -> None:
    write_json_atomic(path, records_to_json(records))


def load_split(path: str | os.PathLike) -> SplitSpec:
    with open(path) as fh:
        return SplitSpec.from_json(json.load(fh))


def save_split(spec: SplitSpec, path: str | os.PathLike) -> None:
    write_json_atomic(path, spec.to_json())


# --------------------------------------------------------------------------
# Dataset operations


def filter_no_interaction(records: Sequence[ImageRecord],
                          excluded_verb: str = NO_INTERACTION) -> list[ImageRecord]:
    out = []
    for rec in records:
        kept = tuple(t for t in rec.tuples if t.verb != excluded_verb)
        if not kept:
            continue
        if len(kept) == len(rec.tuples):
            out.append(rec)
        else:
            out.append(ImageRecord(rec.image_id, rec.image_path, rec.width, rec.height, kept))
    return out


def class_frequencies(records: Sequence[ImageRecord]) -> Counter:
    return Counter(t.object_class for rec in records for t in rec.tuples)


def split_by_frequency(records: Sequence[ImageRecord], n_target: int) -> SplitSpec:
    """Put the ``n_target`` rarest object classes on the target side.

    Ties at equal tuple count are broken by class label, so the
    lexicographically smaller label is considered rarer.
    """
    freq = class_frequencies(records)
    if not 0 < n_target < len(freq):
        raise ValueError(f"n_target={n_target} out of range for {len(freq)} object classes")
    ranked = sorted(freq, key=lambda c: (freq[c], c))
    target = frozenset(ranked[:n_target])
    source = frozenset(ranked[n_target:])
    source_verbs = {t.verb for rec in records for t in rec.tuples if t.object_class in source}
    target_verbs = {t.verb for rec in records for t in rec.tuples if t.object_class in target}
    missing = target_verbs - source_verbs
    if missing:
        raise AnnotationError(
            f"verbs used by target tuples never appear on the source side: {sorted(missing)}"
        )
    return SplitSpec(source, target, frozenset(source_verbs | target_verbs))


def enumerate_tuples(records: Sequence[ImageRecord], spec: SplitSpec,
                     side: str) -> Iterator[tuple[ImageRecord, int, HoiTuple]]:
    """Yield ``(record, tuple_index, tuple)`` for every tuple on ``side``.

    Ordered by image_id, then tuple index; an image is yielded once per
    matching tuple.
    """
    classes = spec.classes(side)
    for rec in sorted(records, key=lambda r: r.image_id):
        for j, t in enumerate(rec.tuples):
            if t.object_class in classes:
                yield rec, j, t


def restrict(records: Sequence[ImageRecord], classes: frozenset[str] | set[str]) -> list[ImageRecord]:
    """Keep only tuples of ``classes``; drop images left empty."""
    out = []
    for rec in records:
        kept = tuple(t for t in rec.tuples if t.object_class in classes)
        if kept:
            out.append(ImageRecord(rec.image_id, rec.image_path, rec.width, rec.height, kept))
    return out


def strip_boxes(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    return [
        ImageRecord(r.image_id, r.image_path, r.width, r.height,
                    tuple(t.with_box(None) for t in r.tuples))
        for r in records
    ]
