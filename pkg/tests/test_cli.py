from __future__ import annotations

import json

from groundcount.cli import main

from conftest import chat_reply

BENCH_ROWS = [
    {"id": "q1", "image": "img1", "task": "counting", "variant": "base",
     "question": "Are there 2 bowls?", "gold": "yes"},
    {"id": "q2", "image": "img1", "task": "counting", "variant": "base",
     "question": "Are there 3 bowls?", "gold": "no"},
]

DET_IMAGES = [
    {"image_id": "img1", "width": 640, "height": 480,
     "detections": [
         {"category": "bowl", "confidence": 0.93, "bbox": [100, 200, 200, 300]},
         {"category": "bowl", "confidence": 0.88, "bbox": [320, 180, 420, 280]},
     ]}
]

COCO_DOC = {
    "images": [{"id": 7, "file_name": "birds.jpg", "width": 300, "height": 300}],
    "annotations": [
        {"image_id": 7, "category_id": 16, "bbox": [10, 10, 40, 30]},
        {"image_id": 7, "category_id": 16, "bbox": [130, 130, 40, 40]},
    ],
    "categories": [{"id": 16, "name": "bird"}],
}


def test_ground_prints_block(write_detections, capsys):
    code = main([
        "ground", "--image-id", "img1",
        "--detections", str(write_detections(DET_IMAGES)),
    ])
    assert code == 0
    out = capsys.readouterr().out.strip()
    assert out == "bowl 1 middle-left: 0.93; bowl 2 middle-center: 0.88"


def test_ground_no_confidence_flag(write_detections, capsys):
    main([
        "ground", "--image-id", "img1", "--no-confidence",
        "--detections", str(write_detections(DET_IMAGES)),
    ])
    out = capsys.readouterr().out.strip()
    assert out == "bowl 1 middle-left; bowl 2 middle-center"


def test_ground_unknown_image_is_config_error(write_detections, capsys):
    code = main([
        "ground", "--image-id", "ghost",
        "--detections", str(write_detections(DET_IMAGES)),
    ])
    assert code == 1
    assert "ghost" in capsys.readouterr().err


def test_prep_train_writes_targets(write_coco, tmp_path, capsys):
    out = tmp_path / "targets.jsonl"
    code = main(["prep-train", "--coco", str(write_coco(COCO_DOC)), "--out", str(out)])
    assert code == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    row = json.loads(lines[0])
    assert row == {
        "image_id": "7",
        "target": "bird 1 in upper-left; bird 2 in middle-center",
    }


def test_eval_against_stub_backend(write_benchmark, write_detections, tmp_path,
                                   stub_server, capsys):
    server = stub_server(lambda body, i: (200, chat_reply("Yes."), 0))
    out_dir = tmp_path / "report"
    code = main([
        "eval",
        "--backend", server.url,
        "--model", "stub-model",
        "--benchmark", str(write_benchmark(BENCH_ROWS)),
        "--detections", str(write_detections(DET_IMAGES)),
        "--ablation", "full",
        "--tasks", "counting",
        "--out", str(out_dir),
    ])
    assert code == 0
    assert (out_dir / "report.md").is_file()
    assert (out_dir / "heatmap.csv").is_file()
    assert (out_dir / "records.jsonl").is_file()
    assert (out_dir / "accuracy_heatmap.png").is_file()
    # "Yes." answers: q1 correct, q2 wrong.
    assert "accuracy 50.0%" in capsys.readouterr().out
    body = json.loads(server.requests[0]["body"])
    assert "Detected objects" in body["messages"][0]["content"]


def test_eval_missing_benchmark_is_exit_1(tmp_path, capsys):
    code = main([
        "eval", "--backend", "http://localhost:9", "--model", "m",
        "--benchmark", str(tmp_path / "missing.jsonl"),
        "--out", str(tmp_path / "r"),
    ])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_eval_failure_rate_above_ceiling_is_exit_2(write_benchmark, tmp_path,
                                                   stub_server, capsys):
    server = stub_server(lambda body, i: (500, {"error": "down"}, 0))
    code = main([
        "eval",
        "--backend", server.url,
        "--model", "m",
        "--benchmark", str(write_benchmark(BENCH_ROWS)),
        "--max-retries", "0",
        "--max-failure-rate", "0.5",
        "--out", str(tmp_path / "r"),
    ])
    assert code == 2
    assert "exceeds ceiling" in capsys.readouterr().err


def test_odm_only_subcommand(write_benchmark, write_detections, tmp_path, capsys):
    out_dir = tmp_path / "odm"
    code = main([
        "odm-only",
        "--benchmark", str(write_benchmark(BENCH_ROWS)),
        "--detections", str(write_detections(DET_IMAGES)),
        "--out", str(out_dir),
    ])
    assert code == 0
    assert "accuracy 100.0%" in capsys.readouterr().out
    assert (out_dir / "report.md").is_file()


def test_fusion_check_passes(capsys):
    code = main(["fusion-check", "--dims", "8,9,4,4", "--seeds", "2"])
    assert code == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "max relative error" in out


def test_fusion_check_train_writes_loss_curve(tmp_path, capsys):
    code = main([
        "fusion-check", "--train", "--steps", "5", "--dims", "8,9,4,4",
        "--out", str(tmp_path / "fus"),
    ])
    assert code == 0
    loss_csv = tmp_path / "fus" / "loss.csv"
    assert loss_csv.is_file()
    assert len(loss_csv.read_text().splitlines()) == 7  # header + initial + 5 steps
    assert (tmp_path / "fus" / "loss_curve.png").is_file()


def test_fusion_check_bad_dims_is_exit_1(capsys):
    assert main(["fusion-check", "--dims", "1,2,3"]) == 1
    assert "d_vit,d_cnn,d_attn,d_out" in capsys.readouterr().err
