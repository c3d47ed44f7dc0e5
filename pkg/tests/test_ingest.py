from __future__ import annotations

import json

import pytest

from groundcount.ingest import (
    IngestError,
    load_annotations,
    load_benchmark,
    load_detections,
    serialize_benchmark,
    serialize_detections,
)

FIVE_TASK_ROWS = [
    {"id": "r1", "image": "a.jpg", "task": "object", "variant": "base",
     "question": "Is there a dog?", "gold": "yes"},
    {"id": "r2", "image": "b.jpg", "task": "attribute", "variant": "base",
     "question": "Is the car red?", "gold": "no"},
    {"id": "r3", "image": "c.jpg", "task": "positional", "variant": "sec",
     "question": "Is the cat on the left?", "context": "A cat sits on a couch.",
     "gold": "yes"},
    {"id": "r4", "image": "d.jpg", "task": "counting", "variant": "base",
     "question": "Are there 3 dogs?", "gold": "no"},
    {"id": "r5", "image": "e.jpg", "task": "sentiment", "variant": "base",
     "question": "Does the scene look cheerful?", "gold": "yes"},
]


def test_load_benchmark_one_record_per_task(write_benchmark):
    records = load_benchmark(write_benchmark(FIVE_TASK_ROWS))
    assert len(records) == 5
    assert [r.task for r in records] == [
        "object", "attribute", "positional", "counting", "sentiment",
    ]


def test_benchmark_round_trip(write_benchmark):
    path = write_benchmark(FIVE_TASK_ROWS)
    records = load_benchmark(path)
    assert serialize_benchmark(records) == path.read_text(encoding="utf-8")


def test_ccs_variant_without_context_accepted(write_benchmark):
    rows = [{"id": "x", "image": "a.jpg", "task": "counting", "variant": "ccs",
             "question": "Are there 2 cats?", "gold": "no"}]
    records = load_benchmark(write_benchmark(rows))
    assert len(records) == 1
    assert records[0].variant == "ccs"
    assert records[0].context is None


def test_unknown_task_token_names_token_and_line(write_benchmark):
    rows = FIVE_TASK_ROWS[:2] + [
        {"id": "bad", "image": "z.jpg", "task": "colour", "variant": "base",
         "question": "Is it blue?", "gold": "yes"},
    ]
    with pytest.raises(IngestError) as excinfo:
        load_benchmark(write_benchmark(rows))
    message = str(excinfo.value)
    assert "line 3" in message
    assert "colour" in message


def test_context_rejected_outside_sec_icc(write_benchmark):
    rows = [{"id": "x", "image": "a.jpg", "task": "object", "variant": "base",
             "question": "Is there a dog?", "context": "misplaced", "gold": "yes"}]
    with pytest.raises(IngestError):
        load_benchmark(write_benchmark(rows))


def test_missing_benchmark_file(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        load_benchmark(tmp_path / "nope.jsonl")


def test_lenient_mode_skips_bad_lines(write_benchmark):
    rows = FIVE_TASK_ROWS[:2] + [
        {"id": "bad", "image": "z.jpg", "task": "colour", "variant": "base",
         "question": "Is it blue?", "gold": "yes"},
    ]
    records = load_benchmark(write_benchmark(rows), lenient=True)
    assert [r.record_id for r in records] == ["r1", "r2"]


def test_filter_returns_exact_subset(write_benchmark):
    path = write_benchmark(FIVE_TASK_ROWS)
    everything = load_benchmark(path)
    counting = load_benchmark(path, predicate=lambda r: r.task == "counting")
    assert counting == [r for r in everything if r.task == "counting"]
    assert len(counting) == 1


COCO_DOC = {
    "images": [{"id": 7, "file_name": "birds.jpg", "width": 300, "height": 300}],
    "annotations": [
        {"image_id": 7, "category_id": 16, "bbox": [10, 10, 40, 30]},
        {"image_id": 7, "category_id": 16, "bbox": [130, 130, 40, 40]},
        {"image_id": 7, "category_id": 16, "bbox": [240, 240, 40, 40]},
    ],
    "categories": [{"id": 16, "name": "bird"}],
}


def test_load_annotations_resolves_categories(write_coco):
    sets = load_annotations(write_coco(COCO_DOC))
    assert set(sets) == {"7"}
    ann = sets["7"]
    assert (ann.width, ann.height) == (300, 300)
    assert len(ann.objects) == 3
    assert all(o.category == "bird" for o in ann.objects)
    assert ann.objects[0].bbox == (10.0, 10.0, 40.0, 30.0)


def test_load_annotations_empty_annotations(write_coco):
    doc = {"images": COCO_DOC["images"], "annotations": [], "categories": []}
    sets = load_annotations(write_coco(doc))
    assert sets["7"].objects == ()


def test_load_annotations_unknown_category_id(write_coco):
    doc = dict(COCO_DOC, annotations=[{"image_id": 7, "category_id": 99, "bbox": [1, 1, 5, 5]}])
    with pytest.raises(IngestError, match="unknown category id 99"):
        load_annotations(write_coco(doc))


def test_load_annotations_unknown_image_id(write_coco):
    doc = dict(COCO_DOC, annotations=[{"image_id": 404, "category_id": 16, "bbox": [1, 1, 5, 5]}])
    with pytest.raises(IngestError, match="unknown image id 404"):
        load_annotations(write_coco(doc))


def test_load_annotations_rejects_nonpositive_extent(write_coco):
    doc = dict(COCO_DOC, annotations=[{"image_id": 7, "category_id": 16, "bbox": [1, 1, 0, 5]}])
    with pytest.raises(IngestError, match="positive extent"):
        load_annotations(write_coco(doc))


def test_load_detections_single(write_detections):
    images = [{"image_id": "img1", "width": 640, "height": 480,
               "detections": [{"category": "person", "confidence": 0.9,
                               "bbox": [10, 10, 100, 200]}]}]
    sets = load_detections(write_detections(images))
    assert len(sets["img1"]) == 1
    det = sets["img1"].detections[0]
    assert det.category == "person"
    assert det.confidence == 0.9


def test_load_detections_inverted_box(write_detections):
    images = [{"image_id": "img1", "width": 640, "height": 480,
               "detections": [{"category": "person", "confidence": 0.9,
                               "bbox": [100, 10, 10, 200]}]}]
    with pytest.raises(IngestError, match="inverted box"):
        load_detections(write_detections(images))


def test_load_detections_confidence_out_of_range_is_error(write_detections):
    images = [{"image_id": "img1", "width": 640, "height": 480,
               "detections": [{"category": "person", "confidence": 1.2,
                               "bbox": [10, 10, 100, 200]}]}]
    with pytest.raises(IngestError, match="outside"):
        load_detections(write_detections(images))


def test_load_detections_two_images(write_detections):
    images = [
        {"image_id": "a", "width": 100, "height": 100, "detections": []},
        {"image_id": "b", "width": 100, "height": 100, "detections": []},
    ]
    assert set(load_detections(write_detections(images))) == {"a", "b"}


def test_load_detections_missing_dimensions(write_detections):
    images = [{"image_id": "a", "detections": []}]
    with pytest.raises(IngestError, match="missing image dimensions"):
        load_detections(write_detections(images))


def test_detections_round_trip(tmp_path):
    payload = {
        "images": [
            {
                "image_id": "a",
                "width": 100,
                "height": 100,
                "detections": [
                    {"category": "dog", "confidence": 0.75, "bbox": [1.0, 2.0, 30.0, 40.0]},
                ],
            },
            {"image_id": "b", "width": 50, "height": 60, "detections": []},
        ]
    }
    path = tmp_path / "dets.json"
    canonical = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    path.write_text(canonical, encoding="utf-8")
    assert serialize_detections(load_detections(path)) == canonical
