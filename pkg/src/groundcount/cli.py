"""Command-line interface.

Subcommands: ``eval`` (run the benchmark against a served model),
``odm-only`` (detector-only counting baseline), ``ground`` (print the
grounding block for one image), ``prep-train`` (render training targets
from a COCO instances file), and ``fusion-check`` (gradient check and toy
training for the fusion block).

Exit codes: 0 success, 1 configuration or input error, 2 backend failure
rate above the configured ceiling.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import fusion
from .evaluator import (
    ConfigError,
    Report,
    RunSpec,
    odm_only_eval,
    run_eval,
)
from .grounding import GroundingConfig, render_prompt, render_training_target
from .ingest import IngestError, load_annotations, load_benchmark, load_detections
from .odm_backend import CachedDetections, FileProvider, PrefilterError
from .report import emit_report, write_loss_curve
from .vlm_client import ENDPOINT_ENV, TOKEN_ENV, BackendConfig

ABLATION_TOKENS = {
    "none": "none",
    "full": "full_odm",
    "noconf": "no_confidence",
    "nopos": "no_position",
    "lowthr": "low_threshold",
    "pointing": "pointing",
}


def _csv_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _record_predicate(tasks, variants):
    if tasks is None and variants is None:
        return None
    return lambda r: (tasks is None or r.task in tasks) and (
        variants is None or r.variant in variants
    )


def _print_summary(report: Report) -> None:
    for row in report.rows:
        print(
            f"{row.task}/{row.variant}: accuracy {100.0 * row.accuracy:.1f}% "
            f"({row.correct}/{row.n}), mean latency {row.mean_latency:.3f}s, "
            f"indeterminate {row.indeterminate}, failures {row.failures}"
        )


def cmd_eval(args: argparse.Namespace) -> int:
    endpoint = args.backend or os.getenv(ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(f"no backend endpoint given (--backend or ${ENDPOINT_ENV})")
    cfg = BackendConfig(
        endpoint=endpoint,
        model=args.model,
        token=args.token or os.getenv(TOKEN_ENV),
        timeout=args.timeout,
        max_retries=args.max_retries,
        max_tokens=args.max_tokens,
    )
    ablation = ABLATION_TOKENS[args.ablation]
    records = load_benchmark(
        args.benchmark,
        predicate=_record_predicate(args.tasks, args.variants),
        lenient=args.lenient,
    )
    detections = None
    if args.detections:
        detections = CachedDetections(
            FileProvider(args.detections, threshold_at_source=args.provider_threshold)
        )
    spec = RunSpec(
        backend=cfg,
        ablation=ablation,
        grounding=GroundingConfig(confidence_threshold=args.threshold),
        tasks=args.tasks,
        variants=args.variants,
        parallelism=args.parallelism,
        image_root=args.image_root,
    )
    report = run_eval(spec, records, detections=detections)
    written = emit_report(report, args.out)
    _print_summary(report)
    for path in written:
        print(f"wrote {path}")
    if report.failure_rate > args.max_failure_rate:
        print(
            f"backend failure rate {report.failure_rate:.3f} exceeds ceiling "
            f"{args.max_failure_rate:.3f}",
            file=sys.stderr,
        )
        return 2
    return 0


def cmd_odm_only(args: argparse.Namespace) -> int:
    records = load_benchmark(
        args.benchmark,
        predicate=_record_predicate(args.tasks, args.variants),
        lenient=args.lenient,
    )
    detection_sets = load_detections(args.detections)
    report = odm_only_eval(records, detection_sets, threshold=args.threshold)
    written = emit_report(report, args.out)
    _print_summary(report)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_ground(args: argparse.Namespace) -> int:
    detection_sets = load_detections(args.detections)
    if args.image_id not in detection_sets:
        raise ConfigError(f"image {args.image_id!r} not found in {args.detections}")
    config = GroundingConfig(
        confidence_threshold=args.threshold,
        include_position=not args.no_position,
        include_confidence=not args.no_confidence,
    )
    grounded = render_prompt(detection_sets[args.image_id], config)
    print(grounded.rendered)
    return 0


def cmd_prep_train(args: argparse.Namespace) -> int:
    annotations = load_annotations(args.coco)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for image_id in sorted(annotations):
            target = render_training_target(annotations[image_id])
            fh.write(json.dumps({"image_id": image_id, "target": target}) + "\n")
    print(f"wrote {len(annotations)} target(s) to {out}")
    return 0


def cmd_fusion_check(args: argparse.Namespace) -> int:
    parts = _csv_list(args.dims)
    if len(parts) != 4:
        raise ConfigError(f"--dims expects d_vit,d_cnn,d_attn,d_out, got {args.dims!r}")
    dims = fusion.FusionDims(*(int(v) for v in parts))

    if args.train:
        result = fusion.toy_train(dims, steps=args.steps, base_lr=args.lr, seed=args.seed)
        written = write_loss_curve(result.losses, args.out)
        print(
            f"trained {args.steps} step(s): loss {result.initial_loss:.4f} -> "
            f"{result.final_loss:.4f}, accuracy {100.0 * result.final_accuracy:.1f}%"
        )
        for path in written:
            print(f"wrote {path}")
        return 0

    print(f"gradient check with dims {dims} over {args.seeds} seed(s):")
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        result = fusion.gradient_check(dims, seed=seed)
        worst = max(worst, result.max_rel_error)
        print(f"  seed {seed}: max relative error {result.max_rel_error:.3e}")
    verdict = "PASS" if worst <= args.tolerance else "FAIL"
    print(f"{verdict}: worst relative error {worst:.3e} (tolerance {args.tolerance:.1e})")
    return 0 if worst <= args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundcount",
        description="Detection-grounded VQA evaluation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="run the benchmark against a served model")
    p_eval.add_argument("--backend", help=f"chat-completion endpoint URL (or ${ENDPOINT_ENV})")
    p_eval.add_argument("--model", required=True, help="model identifier")
    p_eval.add_argument("--token", help=f"bearer token (or ${TOKEN_ENV})")
    p_eval.add_argument("--benchmark", required=True, help="benchmark JSONL file")
    p_eval.add_argument("--detections", help="detections JSON file")
    p_eval.add_argument(
        "--ablation", choices=sorted(ABLATION_TOKENS), default="none",
        help="prompt ablation (default: none, the unaugmented baseline)",
    )
    p_eval.add_argument("--tasks", type=_csv_list, help="comma-separated task filter")
    p_eval.add_argument("--variants", type=_csv_list, help="comma-separated variant filter")
    p_eval.add_argument("--threshold", type=float, default=0.5, help="confidence threshold")
    p_eval.add_argument(
        "--provider-threshold", type=float, default=0.0,
        help="threshold the detections file was already filtered at",
    )
    p_eval.add_argument("--image-root", help="directory of image assets (pointing mode)")
    p_eval.add_argument("--parallelism", type=int, default=1)
    p_eval.add_argument("--timeout", type=float, default=120.0)
    p_eval.add_argument("--max-retries", type=int, default=2)
    p_eval.add_argument("--max-tokens", type=int, default=1024)
    p_eval.add_argument(
        "--max-failure-rate", type=float, default=0.25,
        help="exit 2 when the backend failure rate exceeds this fraction",
    )
    p_eval.add_argument("--lenient", action="store_true", help="skip invalid benchmark lines")
    p_eval.add_argument("--out", required=True, help="report output directory")
    p_eval.set_defaults(func=cmd_eval)

    p_odm = sub.add_parser("odm-only", help="detector-only counting baseline")
    p_odm.add_argument("--benchmark", required=True)
    p_odm.add_argument("--detections", required=True)
    p_odm.add_argument("--tasks", type=_csv_list, default=("counting",))
    p_odm.add_argument("--variants", type=_csv_list)
    p_odm.add_argument("--threshold", type=float, default=0.5)
    p_odm.add_argument("--lenient", action="store_true")
    p_odm.add_argument("--out", required=True)
    p_odm.set_defaults(func=cmd_odm_only)

    p_ground = sub.add_parser("ground", help="print the grounding block for one image")
    p_ground.add_argument("--image-id", required=True)
    p_ground.add_argument("--detections", required=True)
    p_ground.add_argument("--threshold", type=float, default=0.5)
    p_ground.add_argument("--no-position", action="store_true")
    p_ground.add_argument("--no-confidence", action="store_true")
    p_ground.set_defaults(func=cmd_ground)

    p_prep = sub.add_parser("prep-train", help="render training targets from COCO annotations")
    p_prep.add_argument("--coco", required=True, help="COCO instances JSON file")
    p_prep.add_argument("--out", required=True, help="output JSONL file")
    p_prep.set_defaults(func=cmd_prep_train)

    p_fus = sub.add_parser("fusion-check", help="gradient check / toy training")
    p_fus.add_argument("--dims", default="16,12,8,8", help="d_vit,d_cnn,d_attn,d_out")
    p_fus.add_argument("--seed", type=int, default=0)
    p_fus.add_argument("--seeds", type=int, default=10, help="number of seeds to check")
    p_fus.add_argument("--tolerance", type=float, default=1e-4)
    p_fus.add_argument("--train", action="store_true", help="run toy training instead")
    p_fus.add_argument("--steps", type=int, default=200)
    p_fus.add_argument("--lr", type=float, default=0.5)
    p_fus.add_argument("--out", default="fusion_report", help="loss curve output directory")
    p_fus.set_defaults(func=cmd_fusion_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError, PrefilterError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
