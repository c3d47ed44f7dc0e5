from __future__ import annotations

import threading
import time

import pytest

from groundcount.odm_backend import (
    CachedDetections,
    FileProvider,
    PrefilterError,
    ServiceProvider,
    UnknownImageError,
    get_detections,
)
from groundcount.schema import Detection, DetectionSet

from synth import MapProvider

IMAGES = [
    {"image_id": "a", "width": 100, "height": 100,
     "detections": [{"category": "dog", "confidence": 0.8, "bbox": [1, 1, 20, 20]}]},
    {"image_id": "b", "width": 100, "height": 100, "detections": []},
    {"image_id": "c", "width": 100, "height": 100, "detections": []},
]


@pytest.fixture
def file_provider(write_detections):
    return FileProvider(write_detections(IMAGES))


def test_file_provider_lookup(file_provider):
    dset = file_provider.fetch("a")
    assert dset.detections[0].category == "dog"


def test_file_provider_unknown_image(file_provider):
    with pytest.raises(UnknownImageError):
        file_provider.fetch("zzz")


def test_prefilter_guard_fires_below_source_threshold(write_detections):
    provider = FileProvider(write_detections(IMAGES), threshold_at_source=0.5)
    with pytest.raises(PrefilterError, match="irrecoverable pre-filtering"):
        get_detections(provider, "a", requested_threshold=0.3)


def test_prefilter_guard_allows_equal_or_higher(write_detections):
    provider = FileProvider(write_detections(IMAGES), threshold_at_source=0.5)
    assert get_detections(provider, "a", requested_threshold=0.5)
    assert get_detections(provider, "a", requested_threshold=0.9)
    assert get_detections(provider, "a")


def test_cache_serves_second_call_without_provider(file_provider):
    cache = CachedDetections(file_provider)
    first = cache.get("a")
    second = cache.get("a")
    assert cache.provider_calls == 1
    assert first == second


def test_cache_transparency(file_provider):
    cache = CachedDetections(file_provider)
    assert cache.get("a") == file_provider.fetch("a")


def test_warm_cache_counts(file_provider):
    cache = CachedDetections(file_provider)
    assert cache.warm(["a", "b", "c"]).loaded == 3
    report = CachedDetections(file_provider).warm(["a", "b", "nope"])
    assert report.loaded == 2
    assert set(report.failures) == {"nope"}
    assert CachedDetections(file_provider).warm([]).loaded == 0


def test_cache_error_is_not_cached(file_provider):
    cache = CachedDetections(file_provider)
    with pytest.raises(UnknownImageError):
        cache.get("missing")
    with pytest.raises(UnknownImageError):
        cache.get("missing")
    assert cache.provider_calls == 2


def test_concurrent_misses_coalesce():
    dset = DetectionSet(
        image_id="a", width=10, height=10,
        detections=(Detection("dog", 0.9, (1, 1, 5, 5)),),
    )

    class SlowProvider(MapProvider):
        def fetch(self, image_ref):
            time.sleep(0.05)
            return super().fetch(image_ref)

    cache = CachedDetections(SlowProvider({"a": dset}))
    results = []

    def hit():
        results.append(cache.get("a"))

    threads = [threading.Thread(target=hit) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.provider_calls == 1
    assert all(r == dset for r in results)


def test_service_provider_posts_image_bytes(stub_server, tmp_path):
    image_path = tmp_path / "img.png"
    image_path.write_bytes(b"\x89PNG not really")
    payload = {"images": [IMAGES[0]]}
    server = stub_server(lambda body, i: (200, payload, 0))
    provider = ServiceProvider(server.url, image_root=tmp_path)
    dset = provider.fetch("img.png")
    assert dset.image_id == "a"
    assert dset.detections[0].category == "dog"
    request = server.requests[0]
    assert request["body"] == image_path.read_bytes()
    assert request["headers"]["content-type"] == "application/octet-stream"


def test_service_provider_accepts_bare_image_object(stub_server, tmp_path):
    (tmp_path / "img.png").write_bytes(b"bytes")
    server = stub_server(lambda body, i: (200, IMAGES[0], 0))
    provider = ServiceProvider(server.url, image_root=tmp_path)
    assert provider.fetch("img.png").image_id == "a"


def test_service_provider_missing_image_file(stub_server, tmp_path):
    server = stub_server(lambda body, i: (200, {}, 0))
    provider = ServiceProvider(server.url, image_root=tmp_path)
    with pytest.raises(UnknownImageError):
        provider.fetch("ghost.png")
