"""Report emission: markdown accuracy table, CSV rows, per-record JSONL log,
and matplotlib figures rendered to files next to the delimited output.

The text formats are byte-deterministic given a report; figures are rendered
through the Agg backend so no display is required.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .evaluator import Report
from .schema import TASKS, VARIANTS

CSV_FIELDS = (
    "model", "ablation", "task", "variant", "n", "correct", "accuracy",
    "mean_latency_s", "mean_provider_latency_s", "indeterminate", "failures",
)


def render_markdown(report: Report) -> str:
    """Task-by-variant accuracy matrix plus a per-row detail table."""
    lines = [
        "# Evaluation report",
        "",
        f"- model: `{report.model}`",
        f"- ablation: `{report.ablation}`",
        f"- records: {len(report.records)}"
        f" (backend failures: {sum(r.error is not None for r in report.records)})",
        "",
        "## Accuracy (%) by task and variant",
        "",
    ]
    by_cell = {(row.task, row.variant): row for row in report.rows}
    tasks = [t for t in TASKS if any(row.task == t for row in report.rows)]
    lines.append("| task | " + " | ".join(VARIANTS) + " |")
    lines.append("| --- | " + " | ".join("---" for _ in VARIANTS) + " |")
    for task in tasks:
        cells = []
        for variant in VARIANTS:
            row = by_cell.get((task, variant))
            cells.append(f"{100.0 * row.accuracy:.1f}" if row else "-")
        lines.append(f"| {task} | " + " | ".join(cells) + " |")
    lines += [
        "",
        "## Detail",
        "",
        "| task | variant | n | correct | accuracy (%) | indeterminate | failures"
        " | mean latency (s) | mean provider latency (s) |",
        "| --- | --- | --- | --- | --- | --- | --- | --- | --- |",
    ]
    for row in report.rows:
        lines.append(
            f"| {row.task} | {row.variant} | {row.n} | {row.correct}"
            f" | {100.0 * row.accuracy:.1f} | {row.indeterminate} | {row.failures}"
            f" | {row.mean_latency:.3f} | {row.mean_provider_latency:.3f} |"
        )
    return "\n".join(lines) + "\n"


def render_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in report.rows:
        writer.writerow(
            [
                report.model, report.ablation, row.task, row.variant, row.n,
                row.correct, f"{row.accuracy:.6f}", f"{row.mean_latency:.6f}",
                f"{row.mean_provider_latency:.6f}", row.indeterminate, row.failures,
            ]
        )
    return buf.getvalue()


def render_records_jsonl(report: Report) -> str:
    lines = []
    for r in report.records:
        lines.append(
            json.dumps(
                {
                    "record_id": r.record_id,
                    "task": r.task,
                    "variant": r.variant,
                    "ablation": r.ablation,
                    "prompt_sha256": r.prompt_sha256,
                    "verdict": r.verdict,
                    "gold": r.gold,
                    "correct": r.correct,
                    "latency": r.latency,
                    "provider_latency": r.provider_latency,
                    "indeterminate": r.indeterminate,
                    "error": r.error,
                },
                ensure_ascii=False,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def _accuracy_figure(report: Report, path: Path) -> None:
    tasks = [t for t in TASKS if any(row.task == t for row in report.rows)]
    data = np.full((len(tasks), len(VARIANTS)), np.nan)
    for row in report.rows:
        data[tasks.index(row.task), VARIANTS.index(row.variant)] = 100.0 * row.accuracy
    fig = Figure(figsize=(6.0, 1.2 + 0.9 * len(tasks)))
    ax = fig.subplots()
    im = ax.imshow(data, vmin=0.0, vmax=100.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(VARIANTS)), VARIANTS)
    ax.set_yticks(range(len(tasks)), tasks)
    for i in range(len(tasks)):
        for j in range(len(VARIANTS)):
            if not np.isnan(data[i, j]):
                ax.text(j, i, f"{data[i, j]:.1f}", ha="center", va="center", color="white")
    ax.set_title(f"Accuracy (%) - {report.model} / {report.ablation}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def _latency_figure(report: Report, path: Path) -> None:
    labels = [f"{row.task}/{row.variant}" for row in report.rows]
    values = [row.mean_latency for row in report.rows]
    fig = Figure(figsize=(max(4.0, 1.0 + 0.8 * len(labels)), 3.5))
    ax = fig.subplots()
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_ylabel("mean latency (s)")
    ax.set_title(f"Latency - {report.model} / {report.ablation}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def emit_report(report: Report, out_dir: str | Path, figures: bool = True) -> list[Path]:
    """Write report.md, heatmap.csv, records.jsonl, and (for non-empty
    reports) the accuracy and latency figures into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in (
        ("report.md", render_markdown(report)),
        ("heatmap.csv", render_csv(report)),
        ("records.jsonl", render_records_jsonl(report)),
    ):
        path = out / name
        path.write_text(content, encoding="utf-8")
        written.append(path)
    if figures and report.rows:
        acc_path = out / "accuracy_heatmap.png"
        _accuracy_figure(report, acc_path)
        written.append(acc_path)
        lat_path = out / "latency.png"
        _latency_figure(report, lat_path)
        written.append(lat_path)
    return written


def write_loss_curve(losses, out_dir: str | Path, figures: bool = True) -> list[Path]:
    """Write a training loss curve as CSV and, optionally, a PNG figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "loss.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(losses):
        writer.writerow([step, f"{loss:.8f}"])
    csv_path.write_text(buf.getvalue(), encoding="utf-8")
    written = [csv_path]
    if figures:
        fig = Figure(figsize=(5.0, 3.5))
        ax = fig.subplots()
        ax.plot(range(len(losses)), losses)
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.set_title("Toy training loss")
        fig.tight_layout()
        png_path = out / "loss_curve.png"
        fig.savefig(png_path, dpi=120)
        written.append(png_path)
    return written
