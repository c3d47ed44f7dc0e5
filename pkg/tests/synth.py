"""Synthetic scenes, questions, and in-memory providers shared by tests."""

from __future__ import annotations

import random

from groundcount.lexicon import pluralize
from groundcount.schema import Detection, DetectionSet

CATEGORIES = ("person", "bowl", "dog", "cat", "bird", "skateboard")


def random_detection(
    rng: random.Random, width: int, height: int, category: str | None = None
) -> Detection:
    x1 = rng.uniform(0, width - 2)
    y1 = rng.uniform(0, height - 2)
    x2 = rng.uniform(x1 + 1, width)
    y2 = rng.uniform(y1 + 1, height)
    return Detection(
        category=category or rng.choice(CATEGORIES),
        confidence=round(rng.uniform(0.05, 0.99), 4),
        bbox=(x1, y1, x2, y2),
    )

def random_scene(
    rng: random.Random,
    image_id: str = "img",
    width: int = 640,
    height: int = 480,
    max_detections: int = 12,
) -> DetectionSet:
    n = rng.randint(0, max_detections)
    return DetectionSet(
        image_id=image_id,
        width=width,
        height=height,
        detections=tuple(random_detection(rng, width, height) for _ in range(n)),
    )


def count_question(rng: random.Random, category: str, count: int) -> str:
    plural = pluralize(category)
    if rng.random() < 0.5:
        return f"Is the number of {plural} in the image {count}?"
    return f"Are there {count} {plural}?"


class MapProvider:
    """Detection provider backed by an in-memory dict."""

    kind = "file_backed"

    def __init__(self, sets: dict[str, DetectionSet], threshold_at_source: float = 0.0):
        self.threshold_at_source = threshold_at_source
        self._sets = sets
        self.fetch_count = 0

    def fetch(self, image_ref: str) -> DetectionSet:
        self.fetch_count += 1
        return self._sets[image_ref]
