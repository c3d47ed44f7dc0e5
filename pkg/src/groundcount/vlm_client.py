"""HTTP client for chat-completion-compatible vision-language backends.

Requests always carry temperature 0 and a fixed token budget so runs are
reproducible. Replies are split into an optional thinking segment and the
final answer text, from which a yes/no/indeterminate verdict is extracted.
A scripted in-process mock backend supports end-to-end tests with no network.
"""

from __future__ import annotations

import base64
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import requests

VERDICT_YES = "yes"
VERDICT_NO = "no"
VERDICT_INDETERMINATE = "indeterminate"

ENDPOINT_ENV = "GROUNDCOUNT_ENDPOINT"
TOKEN_ENV = "GROUNDCOUNT_TOKEN"

_WORD_RE = re.compile(r"[a-z]+")


class BackendError(RuntimeError):
    """Transport failure, non-success HTTP status, or malformed reply."""


class UnscriptedPromptError(Exception):
    """A mock backend received a prompt no script rule matches."""


@dataclass(frozen=True)
class BackendConfig:
    """Connection and decoding settings for one served model.

    Decoding is always greedy (temperature 0); ``max_tokens`` bounds both
    thinking and answer generation. ``think_open``/``think_close`` are the
    reasoning-segment delimiters, which vary by model family.
    """

    endpoint: str
    model: str
    token: str | None = None
    timeout: float = 120.0
    max_retries: int = 2
    max_tokens: int = 1024
    decoding: str = "greedy"
    think_open: str = "<think>"
    think_close: str = "</think>"

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.decoding != "greedy":
            raise ValueError(f"only greedy decoding is supported, got {self.decoding!r}")


@dataclass(frozen=True)
class ThinkSplit:
    thinking: str | None
    answer_text: str
    truncated: bool = False


@dataclass(frozen=True)
class VlmResponse:
    """One model reply: raw text, parsed parts, verdict, and latency."""

    raw: str
    thinking: str | None
    answer_text: str
    verdict: str
    latency: float
    completion_tokens: int | None = None
    truncated_thinking: bool = False
    retries: int = 0


def strip_thinking(raw: str, open_tag: str = "<think>", close_tag: str = "</think>") -> ThinkSplit:
    """Split a reply into its leading thinking segment and the answer text.

    Only the first well-formed leading span is stripped; anything after it,
    including further delimiter pairs, stays in the answer text. An opener
    with no closer marks the split as truncated, with an empty answer.
    """
    stripped = raw.lstrip()
    if not stripped.startswith(open_tag):
        return ThinkSplit(thinking=None, answer_text=raw)
    body = stripped[len(open_tag):]
    end = body.find(close_tag)
    if end < 0:
        return ThinkSplit(thinking=body, answer_text="", truncated=True)
    return ThinkSplit(thinking=body[:end], answer_text=body[end + len(close_tag):].strip())


def extract_verdict(answer_text: str) -> str:
    """Normalize an answer into yes/no/indeterminate.

    The leading word decides when it is "yes" or "no" (case-insensitive,
    punctuation ignored); otherwise the first standalone "yes"/"no" anywhere
    in the text decides; otherwise the verdict is indeterminate.
    """
    words = _WORD_RE.findall(answer_text.lower())
    if words and words[0] in (VERDICT_YES, VERDICT_NO):
        return words[0]
    for word in words:
        if word in (VERDICT_YES, VERDICT_NO):
            return word
    return VERDICT_INDETERMINATE


def encode_image_payload(data: bytes, mime: str = "image/png") -> dict:
    """Image bytes as a base64 data-URL content part."""
    b64 = base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{b64}"}}


class HttpBackend:
    """Shareable handle for a chat-completion endpoint.

    ``send`` may be called concurrently; each call is an independent request.
    Transport failures and 5xx statuses are retried up to ``max_retries``
    times; well-formed replies and 4xx statuses are never retried.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        session: requests.Session | None = None,
        image_encoder: Callable[[bytes], dict] = encode_image_payload,
    ):
        self.cfg = cfg
        self._session = session or requests.Session()
        self._encode_image = image_encoder
        endpoint = cfg.endpoint.rstrip("/")
        if not endpoint.endswith("/chat/completions"):
            endpoint += "/chat/completions"
        self._url = endpoint

    def send(self, prompt: str, image: bytes | None = None) -> VlmResponse:
        cfg = self.cfg
        if image is None:
            content: object = prompt
        else:
            content = [{"type": "text", "text": prompt}, self._encode_image(image)]
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0.0,
            "max_tokens": cfg.max_tokens,
        }
        headers = {}
        if cfg.token:
            headers["Authorization"] = f"Bearer {cfg.token}"

        last_error: str = ""
        for attempt in range(cfg.max_retries + 1):
            started = time.perf_counter()
            try:
                resp = self._session.post(
                    self._url, json=payload, headers=headers, timeout=cfg.timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                continue
            elapsed = time.perf_counter() - started
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                continue
            if resp.status_code != 200:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp, latency=elapsed, retries=attempt)
        raise BackendError(
            f"request failed after {cfg.max_retries + 1} attempt(s): {last_error}"
        )

    def _parse(self, resp: requests.Response, latency: float, retries: int) -> VlmResponse:
        try:
            data = resp.json()
            raw = data["choices"][0]["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise BackendError(f"response missing message content: {exc}") from exc
        if raw is None:
            raise BackendError("response missing message content")
        usage = data.get("usage") or {}
        split = strip_thinking(raw, self.cfg.think_open, self.cfg.think_close)
        return VlmResponse(
            raw=raw,
            thinking=split.thinking,
            answer_text=split.answer_text,
            verdict=extract_verdict(split.answer_text),
            latency=latency,
            completion_tokens=usage.get("completion_tokens"),
            truncated_thinking=split.truncated,
            retries=retries,
        )


def send(cfg: BackendConfig, prompt: str, image: bytes | None = None) -> VlmResponse:
    """One-shot convenience wrapper around ``HttpBackend.send``."""
    return HttpBackend(cfg).send(prompt, image=image)


@dataclass
class MockBackend:
    """Deterministic scripted backend for tests; zero network.

    ``rules`` is an ordered list of (predicate over the prompt, canned raw
    reply); the first match wins. Unmatched prompts fall back to ``default``
    or raise ``UnscriptedPromptError``. Every call is recorded in ``calls``
    as (prompt, image was attached).
    """

    rules: Sequence[tuple[Callable[[str], bool], str]]
    default: str | None = None
    latency: float = 0.0
    calls: list[tuple[str, bool]] = field(default_factory=list)

    def send(self, prompt: str, image: bytes | None = None) -> VlmResponse:
        self.calls.append((prompt, image is not None))
        reply = None
        for predicate, canned in self.rules:
            if predicate(prompt):
                reply = canned
                break
        if reply is None:
            if self.default is None:
                raise UnscriptedPromptError(f"unscripted prompt: {prompt[:120]!r}")
            reply = self.default
        split = strip_thinking(reply)
        return VlmResponse(
            raw=reply,
            thinking=split.thinking,
            answer_text=split.answer_text,
            verdict=extract_verdict(split.answer_text),
            latency=self.latency,
            truncated_thinking=split.truncated,
        )


def mock_backend(
    rules: Sequence[tuple[Callable[[str], bool], str]],
    default: str | None = None,
    latency: float = 0.0,
) -> MockBackend:
    """Build a scripted backend satisfying the ``send`` contract."""
    return MockBackend(rules=list(rules), default=default, latency=latency)
