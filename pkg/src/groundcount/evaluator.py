"""Run orchestration and scoring.

Drives the question/variant/ablation matrix against a backend, scores
yes/no verdicts against gold answers (indeterminate counts as incorrect,
never re-asked), aggregates per-record results into accuracy rows, and
implements the detector-only counting baseline that answers count-assertion
questions straight from detection counts.
"""

from __future__ import annotations

import hashlib
import io
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from PIL import Image

from .grounding import (
    GroundingConfig,
    augment_user_prompt,
    filter_detections,
    overlay_boxes,
    render_prompt,
)
from .lexicon import default_lexicon
from .odm_backend import CachedDetections
from .schema import DetectionSet, VqaRecord
from .vlm_client import (
    VERDICT_INDETERMINATE,
    VERDICT_NO,
    VERDICT_YES,
    BackendConfig,
    BackendError,
    HttpBackend,
)

ABLATIONS = ("none", "full_odm", "no_confidence", "no_position", "low_threshold", "pointing")

LOW_THRESHOLD = 0.3


class ConfigError(ValueError):
    """A run specification is inconsistent or missing required assets."""


@dataclass(frozen=True)
class RunSpec:
    """One cell of the run matrix: backend, ablation, and record selection."""

    backend: BackendConfig
    ablation: str = "none"
    grounding: GroundingConfig = GroundingConfig()
    tasks: tuple[str, ...] | None = None
    variants: tuple[str, ...] | None = None
    parallelism: int = 1
    image_root: str | None = None

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


def grounding_config_for(spec: RunSpec) -> GroundingConfig | None:
    """Effective grounding configuration for the run's ablation, or None
    when the run is unaugmented."""
    if spec.ablation == "none":
        return None
    cfg = spec.grounding
    if spec.ablation == "no_confidence":
        return replace(cfg, include_confidence=False)
    if spec.ablation == "no_position":
        return replace(cfg, include_position=False)
    if spec.ablation == "low_threshold":
        return replace(cfg, confidence_threshold=LOW_THRESHOLD)
    return cfg


@dataclass(frozen=True)
class RecordResult:
    """Per-record log entry; the report rows aggregate exactly these."""

    record_id: str
    task: str
    variant: str
    ablation: str
    prompt_sha256: str
    verdict: str
    gold: str
    correct: bool
    latency: float
    provider_latency: float
    indeterminate: bool
    error: str | None = None


@dataclass(frozen=True)
class ResultRow:
    task: str
    variant: str
    ablation: str
    n: int
    correct: int
    accuracy: float
    mean_latency: float
    mean_provider_latency: float
    indeterminate: int
    failures: int


@dataclass(frozen=True)
class Report:
    """Aggregated rows plus the full per-record log and a config snapshot."""

    model: str
    ablation: str
    rows: tuple[ResultRow, ...]
    records: tuple[RecordResult, ...]
    config: dict = field(default_factory=dict)

    @property
    def failure_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.error is not None for r in self.records) / len(self.records)


def score(verdict: str, gold: str) -> bool:
    """Exact yes/no match; indeterminate never scores."""
    return verdict == gold


def plain_prompt(record: VqaRecord) -> str:
    """Unaugmented prompt: the optional context line, then the question."""
    if record.context:
        return f"{record.context}\n{record.question}"
    return record.question


def _prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _overlay_payload(image_root: str, image_ref: str, dset: DetectionSet) -> bytes:
    path = Path(image_root) / image_ref
    with Image.open(path) as img:
        boxed = overlay_boxes(img.convert("RGB"), dset)
    buf = io.BytesIO()
    boxed.save(buf, format="PNG")
    return buf.getvalue()


def _select(records: Iterable[VqaRecord], spec: RunSpec) -> list[VqaRecord]:
    return [
        r
        for r in records
        if (spec.tasks is None or r.task in spec.tasks)
        and (spec.variants is None or r.variant in spec.variants)
    ]


def run_eval(
    spec: RunSpec,
    records: Iterable[VqaRecord],
    detections: CachedDetections | None = None,
    backend=None,
) -> Report:
    """Evaluate every selected record and aggregate the outcomes.

    Grounded ablations render the grounding block from the provider's
    detections and append it to the prompt; pointing sends the box overlay
    as the image with the plain text prompt. Backend failures are recorded
    per record, counted incorrect, and excluded from latency means.
    Aggregation is a pure fold over the per-record log, so parallel and
    serial runs produce the same report.
    """
    if backend is None:
        backend = HttpBackend(spec.backend)
    selected = _select(records, spec)
    gcfg = grounding_config_for(spec)
    if gcfg is not None and detections is None:
        raise ConfigError(f"ablation {spec.ablation!r} requires a detection source")
    if spec.ablation == "pointing" and spec.image_root is None:
        raise ConfigError("pointing mode requires image assets (image_root)")

    def worker(record: VqaRecord) -> RecordResult:
        provider_latency = 0.0
        image_payload = None
        if gcfg is not None:
            fetch_start = time.perf_counter()
            dset = detections.get(record.image_ref, requested_threshold=gcfg.confidence_threshold)
            provider_latency = time.perf_counter() - fetch_start
            if spec.ablation == "pointing":
                prompt = plain_prompt(record)
                image_payload = _overlay_payload(
                    spec.image_root,
                    record.image_ref,
                    filter_detections(dset, gcfg.confidence_threshold),
                )
            else:
                grounded = render_prompt(dset, gcfg)
                prompt = augment_user_prompt(record.question, record.context, grounded)
        else:
            prompt = plain_prompt(record)

        base = dict(
            record_id=record.record_id,
            task=record.task,
            variant=record.variant,
            ablation=spec.ablation,
            prompt_sha256=_prompt_hash(prompt),
            gold=record.gold,
            provider_latency=provider_latency,
        )
        try:
            resp = backend.send(prompt, image=image_payload)
        except BackendError as exc:
            return RecordResult(
                verdict=VERDICT_INDETERMINATE, correct=False, latency=0.0,
                indeterminate=False, error=str(exc), **base,
            )
        return RecordResult(
            verdict=resp.verdict,
            correct=score(resp.verdict, record.gold),
            latency=resp.latency,
            indeterminate=resp.verdict == VERDICT_INDETERMINATE,
            error=None,
            **base,
        )

    if spec.parallelism > 1 and selected:
        with ThreadPoolExecutor(max_workers=spec.parallelism) as pool:
            results = list(pool.map(worker, selected))
    else:
        results = [worker(r) for r in selected]

    return aggregate(
        results,
        model=spec.backend.model,
        ablation=spec.ablation,
        config=_config_snapshot(spec, gcfg),
    )


def _config_snapshot(spec: RunSpec, gcfg: GroundingConfig | None) -> dict:
    snap = {
        "model": spec.backend.model,
        "endpoint": spec.backend.endpoint,
        "max_tokens": spec.backend.max_tokens,
        "decoding": spec.backend.decoding,
        "ablation": spec.ablation,
        "tasks": list(spec.tasks) if spec.tasks is not None else None,
        "variants": list(spec.variants) if spec.variants is not None else None,
        "parallelism": spec.parallelism,
    }
    if gcfg is not None:
        snap["grounding"] = {
            "confidence_threshold": gcfg.confidence_threshold,
            "include_position": gcfg.include_position,
            "include_confidence": gcfg.include_confidence,
            "confidence_decimals": gcfg.confidence_decimals,
        }
    return snap


def aggregate(
    results: Sequence[RecordResult],
    model: str,
    ablation: str,
    config: dict | None = None,
) -> Report:
    """Fold per-record results into (task, variant) rows; order-independent."""
    groups: dict[tuple[str, str], list[RecordResult]] = {}
    for rr in results:
        groups.setdefault((rr.task, rr.variant), []).append(rr)
    rows = []
    for task, variant in sorted(groups):
        group = groups[(task, variant)]
        clean = [r for r in group if r.error is None]
        n = len(group)
        correct = sum(r.correct for r in group)
        rows.append(
            ResultRow(
                task=task,
                variant=variant,
                ablation=ablation,
                n=n,
                correct=correct,
                accuracy=correct / n,
                mean_latency=sum(r.latency for r in clean) / len(clean) if clean else 0.0,
                mean_provider_latency=(
                    sum(r.provider_latency for r in clean) / len(clean) if clean else 0.0
                ),
                indeterminate=sum(r.indeterminate for r in group),
                failures=sum(r.error is not None for r in group),
            )
        )
    return Report(
        model=model,
        ablation=ablation,
        rows=tuple(rows),
        records=tuple(results),
        config=config or {},
    )


_NON_ALNUM_RE = re.compile(r"[^a-z0-9 ]+")

# Words that terminate a noun phrase in a count-assertion question.
_PHRASE_STOPWORDS = frozenset(
    "in on at of the this that these those is are was were be being been "
    "image picture photo photograph scene frame shown visible present here "
    "there equal equals exactly to and or with".split()
)


def parse_count_assertion(
    question: str, lexicon: Mapping[str, str] | None = None
) -> tuple[str, int] | None:
    """Extract (category, count) from a count-assertion question.

    Handles "number of <noun> ... <k>" and "<k> <noun>" phrasings; the noun
    (possibly multi-word, singular or plural) is resolved through the
    lexicon. Returns None when no pattern matches or the noun is unknown.
    """
    if lexicon is None:
        lexicon = default_lexicon()
    words = _NON_ALNUM_RE.sub(" ", question.lower()).split()

    for i in range(len(words) - 1):
        if words[i] == "number" and words[i + 1] == "of":
            phrase = []
            j = i + 2
            while j < len(words) and words[j] not in _PHRASE_STOPWORDS and not words[j].isdigit():
                phrase.append(words[j])
                j += 1
            count = next((int(w) for w in words[j:] if w.isdigit()), None)
            category = _lookup_noun(phrase, lexicon)
            if category is not None and count is not None:
                return (category, count)
            break

    for j, word in enumerate(words):
        if word.isdigit():
            phrase = []
            m = j + 1
            while m < len(words) and words[m] not in _PHRASE_STOPWORDS:
                phrase.append(words[m])
                m += 1
            category = _lookup_noun(phrase, lexicon)
            if category is not None:
                return (category, int(word))
    return None


def _lookup_noun(phrase: list[str], lexicon: Mapping[str, str]) -> str | None:
    # Longest-prefix match lets trailing words ("standing", "together") slide.
    for end in range(len(phrase), 0, -1):
        candidate = " ".join(phrase[:end])
        if candidate in lexicon:
            return lexicon[candidate]
    return None


def odm_only_answer(
    question: str,
    dset: DetectionSet,
    threshold: float = 0.5,
    lexicon: Mapping[str, str] | None = None,
    fallback: str = "no",
) -> str:
    """Answer a count-assertion question from detection counts alone.

    Yes iff the number of above-threshold detections of the asserted
    category equals the asserted count. Unparsable questions default to
    "no" (most negatives assert a wrong count); pass fallback="abstain"
    to return indeterminate instead.
    """
    if fallback not in ("no", "abstain"):
        raise ValueError(f"fallback must be 'no' or 'abstain', got {fallback!r}")
    parsed = parse_count_assertion(question, lexicon)
    if parsed is None:
        return VERDICT_NO if fallback == "no" else VERDICT_INDETERMINATE
    category, asserted = parsed
    count = sum(
        1 for d in dset.detections if d.category == category and d.confidence >= threshold
    )
    return VERDICT_YES if count == asserted else VERDICT_NO


def odm_only_eval(
    records: Iterable[VqaRecord],
    detection_sets: Mapping[str, DetectionSet],
    threshold: float = 0.5,
    lexicon: Mapping[str, str] | None = None,
    fallback: str = "no",
) -> Report:
    """Score the detector-only baseline over benchmark records."""
    results = []
    for record in records:
        dset = detection_sets.get(record.image_ref)
        if dset is None:
            results.append(
                RecordResult(
                    record_id=record.record_id, task=record.task, variant=record.variant,
                    ablation="odm_only", prompt_sha256=_prompt_hash(record.question),
                    verdict=VERDICT_INDETERMINATE, gold=record.gold, correct=False,
                    latency=0.0, provider_latency=0.0, indeterminate=False,
                    error=f"no detections for image {record.image_ref!r}",
                )
            )
            continue
        verdict = odm_only_answer(record.question, dset, threshold, lexicon, fallback)
        results.append(
            RecordResult(
                record_id=record.record_id, task=record.task, variant=record.variant,
                ablation="odm_only", prompt_sha256=_prompt_hash(record.question),
                verdict=verdict, gold=record.gold, correct=score(verdict, record.gold),
                latency=0.0, provider_latency=0.0,
                indeterminate=verdict == VERDICT_INDETERMINATE, error=None,
            )
        )
    return aggregate(
        results, model="odm-only", ablation="odm_only",
        config={"threshold": threshold, "fallback": fallback},
    )
