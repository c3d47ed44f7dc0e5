"""Deterministic detection-to-text pipeline.

Converts a set of detections into a compact textual grounding block:
confidence filtering, 3x3 grid position naming, a total spatial ordering,
per-category instance indices, and the final line rendering. The same
sequencing rules also render training targets from ground-truth annotations,
and a pointing-mode helper draws the boxes onto the image instead.

All functions here are pure: identical inputs produce byte-identical output.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

from PIL import Image, ImageDraw

from .schema import AnnotationSet, Detection, DetectionSet

ROW_LABELS = ("upper", "middle", "lower")
COL_LABELS = ("left", "center", "right")
GRID_SIZE = 3

GROUNDING_HEADER = "Detected objects (from an object detection model):"

# Outline colors for category boxes; assignment is a stable hash of the name.
PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (128, 128, 0),
    (0, 128, 128),
)


@dataclass(frozen=True)
class GridCell:
    """One of the nine positions of the 3x3 image grid."""

    row: int
    col: int

    def __post_init__(self) -> None:
        if not (0 <= self.row < GRID_SIZE and 0 <= self.col < GRID_SIZE):
            raise ValueError(f"grid cell ({self.row}, {self.col}) out of range")

    @property
    def label(self) -> str:
        return f"{ROW_LABELS[self.row]}-{COL_LABELS[self.col]}"


@dataclass(frozen=True)
class GroundingConfig:
    """Knobs of the grounding block renderer.

    ``include_position`` / ``include_confidence`` switch off the position and
    confidence tokens for the corresponding ablations; ``confidence_threshold``
    is the inclusive keep boundary (a detection survives when its confidence
    is >= the threshold).
    """

    confidence_threshold: float = 0.5
    include_position: bool = True
    include_confidence: bool = True
    confidence_decimals: int = 2
    empty_sentinel: str = "no objects detected"
    grid_size: int = GRID_SIZE

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"threshold {self.confidence_threshold} outside [0, 1]")
        if self.confidence_decimals < 0:
            raise ValueError("confidence_decimals must be >= 0")
        if self.grid_size != GRID_SIZE:
            raise ValueError(f"only a {GRID_SIZE}x{GRID_SIZE} grid is supported")


@dataclass(frozen=True)
class GroundedPrompt:
    """The rendered grounding block plus the configuration that produced it."""

    lines: tuple[str, ...]
    rendered: str
    config: GroundingConfig
    source_count: int


def cell_for_point(cx: float, cy: float, width: int, height: int) -> GridCell:
    """Map a point to its grid cell; points on a grid line fall to the
    higher-index cell, and the far edge clamps into the last cell."""
    col = min(int(GRID_SIZE * cx / width), GRID_SIZE - 1)
    row = min(int(GRID_SIZE * cy / height), GRID_SIZE - 1)
    return GridCell(row=row, col=col)


def assign_cell(det: Detection, width: int, height: int) -> GridCell:
    """Grid cell of a detection, from its box center (y grows downward)."""
    cx, cy = det.center
    return cell_for_point(cx, cy, width, height)


def filter_detections(dset: DetectionSet, threshold: float) -> DetectionSet:
    """Keep detections with confidence >= threshold, preserving order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    kept = tuple(d for d in dset.detections if d.confidence >= threshold)
    return replace(dset, detections=kept)


def _order_key(indexed: tuple[int, Detection]) -> tuple:
    i, det = indexed
    cx, cy = det.center
    # cx ascending, cy descending (lower in the image first), then category,
    # confidence descending, and input index to make the order total.
    return (cx, -cy, det.category, -det.confidence, i)


def order_detections(dset: DetectionSet) -> tuple[Detection, ...]:
    """Total spatial order: left-to-right, then lower-to-upper by center."""
    return tuple(det for _, det in sorted(enumerate(dset.detections), key=_order_key))


def _sequence(dset: DetectionSet) -> list[tuple[Detection, int, GridCell]]:
    """Ordered (detection, per-category 1-based index, cell) triples."""
    counts: dict[str, int] = {}
    out = []
    for det in order_detections(dset):
        counts[det.category] = counts.get(det.category, 0) + 1
        out.append((det, counts[det.category], assign_cell(det, dset.width, dset.height)))
    return out


def render_prompt(dset: DetectionSet, config: GroundingConfig | None = None) -> GroundedPrompt:
    """Render the grounding block for one image.

    Each surviving detection becomes one line, "[class] [index] [position]:
    [confidence]", with the position or confidence token dropped when the
    config disables it. Lines are joined with "; "; an empty result renders
    the configured sentinel instead.
    """
    config = config or GroundingConfig()
    filtered = filter_detections(dset, config.confidence_threshold)
    lines = []
    for det, index, cell in _sequence(filtered):
        parts = [f"{det.category} {index}"]
        if config.include_position:
            parts.append(cell.label)
        line = " ".join(parts)
        if config.include_confidence:
            line += f": {det.confidence:.{config.confidence_decimals}f}"
        lines.append(line)
    rendered = "; ".join(lines) if lines else config.empty_sentinel
    return GroundedPrompt(
        lines=tuple(lines), rendered=rendered, config=config, source_count=len(lines)
    )


def detection_set_from_annotations(ann: AnnotationSet) -> DetectionSet:
    """View ground-truth annotations as unit-confidence corner-form detections,
    so they can run through the same sequencing pipeline."""
    return DetectionSet(
        image_id=ann.image_id,
        width=ann.width,
        height=ann.height,
        detections=tuple(
            Detection(category=o.category, confidence=1.0, bbox=o.corners())
            for o in ann.objects
        ),
    )


def render_training_target(ann: AnnotationSet) -> str:
    """Render the structured spatial description used as a training target.

    Applies the detection sequencing rules to ground-truth boxes (no
    confidence filtering) and emits "[class] [index] in [position]" segments
    joined with "; ". An empty annotation set renders the empty string.
    """
    dset = detection_set_from_annotations(ann)
    segments = [
        f"{det.category} {index} in {cell.label}" for det, index, cell in _sequence(dset)
    ]
    return "; ".join(segments)


def augment_user_prompt(question: str, context: str | None, grounded: GroundedPrompt) -> str:
    """Append the grounding block to the user prompt.

    Layout (frozen by a golden test): optional context line, the question,
    a blank line, the labeled grounding block, trailing newline.
    """
    if not question:
        raise ValueError("question must be non-empty")
    head = f"{context}\n{question}" if context else question
    return f"{head}\n\n{GROUNDING_HEADER}\n{grounded.rendered}\n"


def category_color(category: str) -> tuple[int, int, int]:
    """Stable palette color for a category name."""
    return PALETTE[zlib.crc32(category.encode("utf-8")) % len(PALETTE)]


def overlay_boxes(image: Image.Image, dset: DetectionSet) -> Image.Image:
    """Return a copy of ``image`` with one-pixel box outlines drawn on it.

    The input image is left untouched. Raises ValueError when the image
    dimensions do not match the detection set's.
    """
    if (image.width, image.height) != (dset.width, dset.height):
        raise ValueError(
            f"image is {image.width}x{image.height} but detections are for "
            f"{dset.width}x{dset.height}"
        )
    out = image.copy()
    draw = ImageDraw.Draw(out)
    for det in dset.detections:
        draw.rectangle(det.bbox, outline=category_color(det.category), width=1)
    return out
