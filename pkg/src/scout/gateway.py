"""Uniform client for chat-completion model endpoints.

Speaks the de-facto JSON chat-completions protocol served by common local
inference servers, with token budgeting, retry with exponential backoff and
full request/response capture. Nothing in this module ever touches the
evidence tree.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .errors import BudgetTooSmall, EndpointUnreachable, GatewayTimeout, ModelError

log = logging.getLogger(__name__)

# Fraction of the context window chunking may fill; compensates for the
# crude byte-based token estimator.
CONTEXT_SAFETY_FACTOR = 0.8

DEFAULT_TEMPERATURE = 0.2
DEFAULT_MAX_CONTEXT_TOKENS = 128_000


@dataclass(frozen=True)
class ModelProfile:
    """One configured model endpoint."""

    name: str
    endpoint_url: str
    model_id: str
    modality: str = "text"  # "text" | "vision"
    max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    timeout_s: int = 120
    max_retries: int = 3
    video_native: bool = True  # endpoint accepts whole-video parts

    def __post_init__(self):
        if self.max_context_tokens <= 0:
            raise ValueError(f"profile {self.name}: max_context_tokens must be > 0")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"profile {self.name}: temperature must be in [0, 2]")
        if self.modality not in ("text", "vision"):
            raise ValueError(f"profile {self.name}: unknown modality {self.modality!r}")


@dataclass(frozen=True)
class TextChunk:
    """One budget-sized slice of model-ready text."""

    text: str
    index: int  # 0-based position within the evidence item
    ref: str    # provenance label, e.g. "packets 1-500", "emails 0-2"


@dataclass
class ChatRequest:
    profile_name: str
    messages: list[dict]  # [{"role": ..., "content": str | [parts]}]

    @property
    def request_digest(self) -> str:
        return sha256_hex(canonical_request_json(self).encode("utf-8"))


@dataclass
class ChatResponse:
    raw_text: str
    token_usage: dict | None
    latency_ms: int
    attempt_count: int


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_request_json(request: ChatRequest) -> str:
    """Stable serialization used for request digests; identical logical
    requests digest identically across processes."""
    return json.dumps(
        {"profile": request.profile_name, "messages": request.messages},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )


def estimate_tokens(text: str) -> int:
    """Overcount-tolerant heuristic: ceil(utf-8 bytes / 4). Monotone in length."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def usable_budget(profile: ModelProfile, overhead_tokens: int = 0) -> int:
    budget = math.floor(profile.max_context_tokens * CONTEXT_SAFETY_FACTOR) - overhead_tokens
    if budget <= 0:
        raise BudgetTooSmall(
            f"prompt overhead ({overhead_tokens} tokens) exceeds usable window of "
            f"profile {profile.name}"
        )
    return budget


def chunk_text(text: str, profile: ModelProfile, overhead_tokens: int = 0) -> list[TextChunk]:
    """Split text to fit the profile's window after prompt overhead.

    Splits at line boundaries first, hard-splits oversized lines; chunk
    concatenation reproduces the input exactly.
    """
    budget = usable_budget(profile, overhead_tokens)
    return pack_lines(text.splitlines(keepends=True), budget)


def pack_lines(lines: list[str], budget: int) -> list[TextChunk]:
    """Greedy line packing into chunks whose token estimate stays <= budget."""
    pieces: list[str] = []
    for line in lines:
        if estimate_tokens(line) <= budget:
            pieces.append(line)
        else:
            pieces.extend(_hard_split(line, budget))

    chunks: list[TextChunk] = []
    current: list[str] = []
    start_line = 0

    def flush(end_line: int):
        if current:
            chunks.append(
                TextChunk(
                    text="".join(current),
                    index=len(chunks),
                    ref=f"lines {start_line}-{end_line}",
                )
            )

    for i, piece in enumerate(pieces):
        candidate = "".join(current) + piece
        if current and estimate_tokens(candidate) > budget:
            flush(i - 1)
            current = [piece]
            start_line = i
        else:
            current.append(piece)
    flush(len(pieces) - 1)
    return chunks


def _hard_split(line: str, budget: int) -> list[str]:
    # estimate(s) <= budget iff utf-8 length <= 4 * budget
    max_bytes = 4 * budget
    parts: list[str] = []
    buf: list[str] = []
    size = 0
    for ch in line:
        n = len(ch.encode("utf-8"))
        if buf and size + n > max_bytes:
            parts.append("".join(buf))
            buf, size = [], 0
        buf.append(ch)
        size += n
    if buf:
        parts.append("".join(buf))
    return parts


def text_message(role: str, text: str) -> dict:
    return {"role": role, "content": text}


def image_part(mime: str, payload_b64: str) -> dict:
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{payload_b64}"}}


def video_part(mime: str, payload_b64: str) -> dict:
    return {"type": "video_url", "video_url": {"url": f"data:{mime};base64,{payload_b64}"}}


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


class Gateway:
    """Shared client for all configured model profiles.

    A single bounded semaphore caps in-flight calls across workers; capture
    files land under the run store, never the evidence tree.
    """

    def __init__(
        self,
        profiles: dict[str, ModelProfile],
        max_concurrent: int = 2,
        capture_dir: Path | None = None,
        backoff_base_s: float = 1.0,
    ):
        self.profiles = dict(profiles)
        self._slots = threading.BoundedSemaphore(max(1, max_concurrent))
        self.capture_dir = Path(capture_dir) if capture_dir else None
        self.backoff_base_s = backoff_base_s

    def profile(self, name: str) -> ModelProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise KeyError(f"no model profile named {name!r}") from None

    def chat_complete(self, request: ChatRequest, capture_key: str | None = None) -> ChatResponse:
        """POST the request; retry 5xx/transport failures with exponential backoff.

        4xx responses raise ModelError immediately. Retries resend the exact
        same body bytes.
        """
        profile = self.profile(request.profile_name)
        _check_request(request, profile)
        wire = {
            "model": profile.model_id,
            "temperature": profile.temperature,
            "messages": request.messages,
        }
        body = json.dumps(wire, ensure_ascii=False).encode("utf-8")
        digest = request.request_digest

        attempts = 0
        started = time.monotonic()
        last_failure: Exception | None = None
        timed_out = False

        with self._slots:
            while attempts <= profile.max_retries:
                if attempts:
                    time.sleep(self.backoff_base_s * (2 ** (attempts - 1)))
                attempts += 1
                try:
                    resp = requests.post(
                        profile.endpoint_url,
                        data=body,
                        headers={"Content-Type": "application/json"},
                        timeout=profile.timeout_s,
                    )
                except requests.Timeout as exc:
                    timed_out = True
                    last_failure = exc
                    log.warning("timeout from %s (attempt %d)", profile.name, attempts)
                    continue
                except requests.RequestException as exc:
                    timed_out = False
                    last_failure = exc
                    log.warning("transport failure to %s (attempt %d): %s",
                                profile.name, attempts, exc)
                    continue

                if 400 <= resp.status_code < 500:
                    raise ModelError(resp.status_code, resp.text[:2000])
                if resp.status_code >= 500:
                    timed_out = False
                    last_failure = ModelError(resp.status_code, resp.text[:2000])
                    log.warning("HTTP %d from %s (attempt %d)",
                                resp.status_code, profile.name, attempts)
                    continue

                latency_ms = int((time.monotonic() - started) * 1000)
                raw_text, usage = _extract_completion(resp)
                response = ChatResponse(
                    raw_text=raw_text,
                    token_usage=usage,
                    latency_ms=latency_ms,
                    attempt_count=attempts,
                )
                self._capture(capture_key, digest, request, response)
                return response

        if timed_out:
            raise GatewayTimeout(f"{profile.name}: timed out after {attempts} attempts")
        raise EndpointUnreachable(
            f"{profile.name}: gave up after {attempts} attempts: {last_failure}"
        )

    def _capture(self, key: str | None, digest: str, request: ChatRequest,
                 response: ChatResponse) -> None:
        if not (self.capture_dir and key):
            return
        self.capture_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "request_digest": digest,
            "profile": request.profile_name,
            "messages": request.messages,
            "raw_text": response.raw_text,
            "token_usage": response.token_usage,
            "latency_ms": response.latency_ms,
            "attempt_count": response.attempt_count,
        }
        path = self.capture_dir / f"{key}.json"
        path.write_text(json.dumps(record, ensure_ascii=False, indent=2), encoding="utf-8")


def _check_request(request: ChatRequest, profile: ModelProfile) -> None:
    if not any(m.get("role") == "user" for m in request.messages):
        raise ValueError("chat request needs at least one user message")
    has_attachments = any(
        isinstance(m.get("content"), list) for m in request.messages)
    if has_attachments and profile.modality != "vision":
        raise ValueError(
            f"profile {profile.name} is text-only but the request carries attachments")


def _extract_completion(resp: requests.Response) -> tuple[str, dict | None]:
    try:
        payload = resp.json()
        raw_text = payload["choices"][0]["message"]["content"]
        if not isinstance(raw_text, str):
            raw_text = json.dumps(raw_text, ensure_ascii=False)
    except (ValueError, LookupError, TypeError):
        # Endpoint answered 2xx with an off-protocol body; surface it verbatim
        # and let the verdict parser degrade.
        return resp.text, None
    usage = payload.get("usage")
    token_usage = None
    if isinstance(usage, dict):
        token_usage = {
            "prompt": usage.get("prompt_tokens"),
            "completion": usage.get("completion_tokens"),
        }
    return raw_text, token_usage
