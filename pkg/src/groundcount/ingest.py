"""File loaders for benchmark records, COCO-style annotations, and detections.

All loaders are strict by default: a malformed entry raises ``IngestError``
carrying every individual problem with its location, instead of silently
dropping or clamping values. ``load_benchmark`` additionally offers a lenient
mode that skips bad lines and logs how many were skipped.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .schema import AnnotationSet, Detection, DetectionSet, GroundTruthObject, VqaRecord

logger = logging.getLogger(__name__)

BENCHMARK_KEYS = ("id", "image", "task", "variant", "question", "context", "gold")


class IngestError(ValueError):
    """Raised when an input file fails validation.

    ``errors`` holds one message per offending entry, each prefixed with its
    location (line number or image id).
    """

    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = errors or []
        if self.errors:
            message = message + "\n  " + "\n  ".join(self.errors)
        super().__init__(message)


def _record_from_obj(obj: dict) -> VqaRecord:
    if not isinstance(obj, dict):
        raise ValueError(f"expected an object, got {type(obj).__name__}")
    missing = [k for k in ("id", "image", "task", "variant", "question", "gold") if k not in obj]
    if missing:
        raise ValueError(f"missing keys {missing}")
    return VqaRecord(
        record_id=str(obj["id"]),
        image_ref=str(obj["image"]),
        task=obj["task"],
        variant=obj["variant"],
        question=obj["question"],
        gold=obj["gold"],
        context=obj.get("context"),
    )


def load_benchmark(
    path: str | Path,
    predicate: Callable[[VqaRecord], bool] | None = None,
    lenient: bool = False,
) -> list[VqaRecord]:
    """Load a JSON Lines benchmark file into validated records.

    Args:
        path: UTF-8 JSONL file, one record object per line.
        predicate: optional record filter applied after validation.
        lenient: skip invalid lines (logging the count) instead of raising.

    Returns:
        Records in file order, restricted to those matching ``predicate``.

    Raises:
        IngestError: missing file, or (in strict mode) any invalid line; the
            error lists every bad line with its 1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"benchmark file not found: {path}")

    records: list[VqaRecord] = []
    errors: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(_record_from_obj(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                errors.append(f"line {lineno}: {exc}")

    if errors:
        if not lenient:
            raise IngestError(f"{path}: {len(errors)} invalid record(s)", errors)
        logger.warning("%s: skipped %d invalid record(s) in lenient mode", path, len(errors))

    if predicate is not None:
        records = [r for r in records if predicate(r)]
    return records


def serialize_benchmark(records: Iterable[VqaRecord]) -> str:
    """Canonical JSONL form of ``records`` (inverse of ``load_benchmark``)."""
    lines = []
    for r in records:
        obj: dict = {
            "id": r.record_id,
            "image": r.image_ref,
            "task": r.task,
            "variant": r.variant,
            "question": r.question,
        }
        if r.context is not None:
            obj["context"] = r.context
        obj["gold"] = r.gold
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")


def load_annotations(path: str | Path) -> dict[str, AnnotationSet]:
    """Load a COCO-style instances file into per-image annotation sets.

    Every image listed in ``images`` gets an entry, including images with no
    annotations. Category ids are resolved to names; boxes keep their
    (x, y, w, h) form exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"annotations file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        doc = json.load(fh)

    errors: list[str] = []
    categories: dict[int, str] = {}
    for cat in doc.get("categories", []):
        categories[cat["id"]] = cat["name"]

    images: dict[int, tuple[int, int]] = {}
    for img in doc.get("images", []):
        try:
            images[img["id"]] = (int(img["width"]), int(img["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"image {img.get('id')}: {exc}")

    objects: dict[int, list[GroundTruthObject]] = {img_id: [] for img_id in images}
    for i, ann in enumerate(doc.get("annotations", [])):
        img_id = ann.get("image_id")
        cat_id = ann.get("category_id")
        if img_id not in images:
            errors.append(f"annotation #{i}: unknown image id {img_id}")
            continue
        if cat_id not in categories:
            errors.append(f"annotation #{i}: unknown category id {cat_id}")
            continue
        try:
            objects[img_id].append(
                GroundTruthObject(category=categories[cat_id], bbox=tuple(ann["bbox"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"annotation #{i} (image {img_id}): {exc}")

    result: dict[str, AnnotationSet] = {}
    for img_id, (width, height) in images.items():
        try:
            result[str(img_id)] = AnnotationSet(
                image_id=str(img_id), width=width, height=height,
                objects=tuple(objects[img_id]),
            )
        except ValueError as exc:
            errors.append(f"image {img_id}: {exc}")

    if errors:
        raise IngestError(f"{path}: {len(errors)} invalid annotation entr(ies)", errors)
    return result


def load_detections(path: str | Path) -> dict[str, DetectionSet]:
    """Load a detections JSON file into per-image detection sets.

    The file layout is ``{"images": [{"image_id", "width", "height",
    "detections": [{"category", "confidence", "bbox": [x1, y1, x2, y2]}]}]}``.
    Confidences outside [0, 1] and inverted boxes are errors, never repaired.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"detections file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        doc = json.load(fh)

    errors: list[str] = []
    result: dict[str, DetectionSet] = {}
    for entry in doc.get("images", []):
        image_id = str(entry.get("image_id", "?"))
        if image_id in result:
            errors.append(f"image {image_id}: duplicate entry")
            continue
        try:
            dset = detection_set_from_obj(entry)
        except ValueError as exc:
            errors.append(f"image {image_id}: {exc}")
            continue
        result[image_id] = dset

    if errors:
        raise IngestError(f"{path}: {len(errors)} invalid image entr(ies)", errors)
    return result


def detection_set_from_obj(entry: Mapping) -> DetectionSet:
    """Build one DetectionSet from a parsed per-image JSON object."""
    if "image_id" not in entry:
        raise ValueError("missing image_id")
    if "width" not in entry or "height" not in entry:
        raise ValueError("missing image dimensions")
    detections = []
    for j, det in enumerate(entry.get("detections", [])):
        try:
            detections.append(
                Detection(
                    category=det["category"],
                    confidence=float(det["confidence"]),
                    bbox=tuple(det["bbox"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"detection #{j}: {exc}") from exc
    return DetectionSet(
        image_id=str(entry["image_id"]),
        width=int(entry["width"]),
        height=int(entry["height"]),
        detections=tuple(detections),
    )


def serialize_detections(sets: Mapping[str, DetectionSet]) -> str:
    """Canonical JSON form of detection sets, images sorted by id."""
    payload = {
        "images": [
            {
                "image_id": dset.image_id,
                "width": dset.width,
                "height": dset.height,
                "detections": [
                    {
                        "category": d.category,
                        "confidence": d.confidence,
                        "bbox": list(d.bbox),
                    }
                    for d in dset.detections
                ],
            }
            for _, dset in sorted(sets.items())
        ]
    }
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
