"""Pluggable detection providers with a shared, thread-safe cache.

Evaluation never runs a detector in-process: detections come either from a
previously exported file or from an external detection service. The cache
coalesces concurrent misses for the same image into a single provider call,
and a guard refuses to serve detections when the provider already filtered
at a higher threshold than the evaluation requests (that information is
gone and cannot be recovered).
"""

from __future__ import annotations

import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .ingest import detection_set_from_obj, load_detections
from .schema import DetectionSet


class UnknownImageError(KeyError):
    """The provider has no detections for the requested image."""


class PrefilterError(ValueError):
    """Requested threshold is below the provider's source threshold."""


def check_threshold(threshold_at_source: float, requested: float | None) -> None:
    if requested is not None and requested < threshold_at_source:
        raise PrefilterError(
            "irrecoverable pre-filtering: provider already filtered at "
            f"{threshold_at_source}, cannot serve threshold {requested}"
        )


class FileProvider:
    """Serve detections from a detections JSON file loaded at construction."""

    kind = "file_backed"

    def __init__(self, source: str | Path, threshold_at_source: float = 0.0):
        if not 0.0 <= threshold_at_source <= 1.0:
            raise ValueError(f"threshold_at_source {threshold_at_source} outside [0, 1]")
        self.source = str(source)
        self.threshold_at_source = threshold_at_source
        self._sets = load_detections(source)

    def fetch(self, image_ref: str) -> DetectionSet:
        try:
            return self._sets[image_ref]
        except KeyError:
            raise UnknownImageError(f"no detections for image {image_ref!r} in {self.source}")

    def known_images(self) -> tuple[str, ...]:
        return tuple(self._sets)


class ServiceProvider:
    """Fetch detections from an external service by posting the image bytes.

    The service replies with the detections JSON schema, either the full
    ``{"images": [...]}`` envelope (first entry taken) or a bare per-image
    object. Image refs are resolved to files under ``image_root``.
    """

    kind = "external_service"

    def __init__(
        self,
        source: str,
        image_root: str | Path,
        threshold_at_source: float = 0.0,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        if not 0.0 <= threshold_at_source <= 1.0:
            raise ValueError(f"threshold_at_source {threshold_at_source} outside [0, 1]")
        self.source = source
        self.image_root = Path(image_root)
        self.threshold_at_source = threshold_at_source
        self.timeout = timeout
        self._session = session or requests.Session()

    def fetch(self, image_ref: str) -> DetectionSet:
        image_path = self.image_root / image_ref
        if not image_path.is_file():
            raise UnknownImageError(f"image file not found: {image_path}")
        resp = self._session.post(
            self.source, data=image_path.read_bytes(),
            headers={"Content-Type": "application/octet-stream"},
            timeout=self.timeout,
        )
        if resp.status_code != 200:
            raise RuntimeError(f"detector service HTTP {resp.status_code}: {resp.text[:200]}")
        doc = resp.json()
        entry = doc["images"][0] if "images" in doc else doc
        return detection_set_from_obj(entry)


@dataclass
class WarmupReport:
    """Outcome of a bulk cache load: entries served plus per-image failures."""

    loaded: int
    failures: dict[str, str] = field(default_factory=dict)


class CachedDetections:
    """Thread-safe per-image cache in front of a provider.

    Cached and uncached lookups return equal values; concurrent misses for
    the same image coalesce into one provider call. ``provider_calls`` counts
    actual fetches for cache-behavior assertions.
    """

    def __init__(self, provider):
        self.provider = provider
        self._lock = threading.Lock()
        self._entries: dict[str, Future] = {}
        self.provider_calls = 0

    def get(self, image_ref: str, requested_threshold: float | None = None) -> DetectionSet:
        check_threshold(self.provider.threshold_at_source, requested_threshold)
        with self._lock:
            entry = self._entries.get(image_ref)
            owner = entry is None
            if owner:
                entry = Future()
                self._entries[image_ref] = entry
        if owner:
            try:
                with self._lock:
                    self.provider_calls += 1
                entry.set_result(self.provider.fetch(image_ref))
            except BaseException as exc:
                entry.set_exception(exc)
                with self._lock:
                    self._entries.pop(image_ref, None)
        return entry.result()

    def warm(self, image_refs, requested_threshold: float | None = None) -> WarmupReport:
        """Bulk ``get``; failures are collected per image, not raised."""
        loaded = 0
        failures: dict[str, str] = {}
        for ref in image_refs:
            try:
                self.get(ref, requested_threshold)
                loaded += 1
            except Exception as exc:
                failures[ref] = str(exc)
        return WarmupReport(loaded=loaded, failures=failures)


def get_detections(
    provider, image_ref: str, requested_threshold: float | None = None
) -> DetectionSet:
    """Uncached single lookup with the same pre-filtering guard."""
    check_threshold(provider.threshold_at_source, requested_threshold)
    return provider.fetch(image_ref)
