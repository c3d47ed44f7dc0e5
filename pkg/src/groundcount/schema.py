"""Shared domain model: benchmark records, annotations, and detections.

Every type validates its invariants at construction and is immutable
afterwards, so instances are safe to share across evaluation workers.
"""

from __future__ import annotations

from dataclasses import dataclass

TASKS = ("object", "attribute", "positional", "counting", "sentiment")
VARIANTS = ("base", "sec", "icc", "ccs")
CONTEXT_VARIANTS = ("sec", "icc")
GOLD_VALUES = ("yes", "no")


@dataclass(frozen=True)
class VqaRecord:
    """One benchmark question with its binary gold answer."""

    record_id: str
    image_ref: str
    task: str
    variant: str
    question: str
    gold: str
    context: str | None = None

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.gold not in GOLD_VALUES:
            raise ValueError(f"gold must be one of {GOLD_VALUES}, got {self.gold!r}")
        if not self.question:
            raise ValueError("question must be non-empty")
        if self.context is not None and self.variant not in CONTEXT_VARIANTS:
            raise ValueError(
                f"context is only allowed for variants {CONTEXT_VARIANTS}, "
                f"got variant {self.variant!r}"
            )


@dataclass(frozen=True)
class GroundTruthObject:
    """A ground-truth annotation box, kept in COCO (x, y, w, h) form."""

    category: str
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if not self.category:
            raise ValueError("category must be non-empty")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        _, _, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"box must have positive extent, got w={w}, h={h}")

    def corners(self) -> tuple[float, float, float, float]:
        """Corner-form (x1, y1, x2, y2), the convention used downstream."""
        x, y, w, h = self.bbox
        return (x, y, x + w, y + h)


@dataclass(frozen=True)
class AnnotationSet:
    """All ground-truth objects of one image, plus the image dimensions."""

    image_id: str
    width: int
    height: int
    objects: tuple[GroundTruthObject, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.width}x{self.height}"
            )
        object.__setattr__(self, "objects", tuple(self.objects))
        for i, obj in enumerate(self.objects):
            x1, y1, x2, y2 = obj.corners()
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(
                    f"object #{i} ({obj.category}) outside image bounds "
                    f"{self.width}x{self.height}: {obj.bbox}"
                )


@dataclass(frozen=True)
class Detection:
    """One detector output: category, confidence, and a corner-form box."""

    category: str
    confidence: float
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if not self.category:
            raise ValueError("category must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"inverted box {self.bbox}")

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.bbox
        return ((x1 + x2) / 2.0, (y1 + y2) / 2.0)


@dataclass(frozen=True)
class DetectionSet:
    """All detections of one image, in the detector's emission order."""

    image_id: str
    width: int
    height: int
    detections: tuple[Detection, ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.width}x{self.height}"
            )
        object.__setattr__(self, "detections", tuple(self.detections))
        for i, det in enumerate(self.detections):
            x1, y1, x2, y2 = det.bbox
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(
                    f"detection #{i} ({det.category}) outside image bounds "
                    f"{self.width}x{self.height}: {det.bbox}"
                )

    def __len__(self) -> int:
        return len(self.detections)
