"""Chat-completion client with retries, token accounting and a mock backend."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import httpx

from prefcal.errors import (
    BackendError,
    ContentError,
    CredentialError,
    ParameterError,
    TransientBackendError,
    TransportError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "PREFCAL_API_KEY"
ROLES = ("observer", "debater", "judge", "single", "miner")

# Per-million-token rates (USD) for the default model.
INPUT_RATE = 2.50
OUTPUT_RATE = 10.00


@dataclass(frozen=True)
class VlmRequest:
    """One outbound call.

    ``images`` are opaque references: URLs, ``data:`` URIs, local paths, or
    plain image ids for mock backends. ``tags`` is structured metadata
    (category, dimension names, image ids, stage) that real backends ignore;
    it feeds logging and lets mock backends answer without parsing prompts.
    """

    prompt: str
    images: tuple[str, ...] = ()
    temperature: float = 0.0
    role_tag: str = "single"
    tags: Mapping[str, Any] = field(default_factory=dict)
    max_tokens: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if not 0.0 <= self.temperature <= 2.0:
            raise ParameterError(f"temperature {self.temperature} outside [0, 2]")
        if self.role_tag not in ROLES:
            raise ParameterError(f"unknown role tag {self.role_tag!r}")
        if len(self.images) > 2:
            raise ParameterError("a request carries at most two images")

    def digest(self) -> str:
        body = json.dumps(
            {"prompt": self.prompt, "images": list(self.images), "temperature": self.temperature,
             "role": self.role_tag},
            sort_keys=True,
        )
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    finish_reason: str = "stop"


class Backend(Protocol):
    def complete(self, req: VlmRequest) -> Completion: ...


def estimate_tokens(text: str) -> int:
    """Rough token count (four characters per token)."""
    return max(1, (len(text) + 3) // 4)


class MockBackend:
    """Offline backend.

    Answers from ``fixtures`` (keyed by request digest, or by exact prompt
    text) or by calling ``responder(request)``. A responder may return a
    string or a :class:`Completion`, or raise a :class:`BackendError` to
    simulate failures.
    """

    def __init__(
        self,
        fixtures: Mapping[str, str] | None = None,
        responder: Callable[[VlmRequest], str | Completion] | None = None,
    ):
        if fixtures is None and responder is None:
            raise ParameterError("MockBackend needs fixtures or a responder")
        self.fixtures = dict(fixtures or {})
        self.responder = responder
        self._lock = threading.Lock()
        self.requests: list[VlmRequest] = []

    def complete(self, req: VlmRequest) -> Completion:
        with self._lock:
            self.requests.append(req)
        for key in (req.digest(), req.prompt):
            if key in self.fixtures:
                out: str | Completion = self.fixtures[key]
                break
        else:
            if self.responder is None:
                raise ContentError(f"no fixture for request {req.digest()[:12]}")
            out = self.responder(req)
        if isinstance(out, Completion):
            return out
        return Completion(out, estimate_tokens(req.prompt), estimate_tokens(out))


def _image_part(ref: str) -> dict:
    if ref.startswith(("http://", "https://", "data:")):
        url = ref
    else:
        path = Path(ref)
        try:
            payload = base64.b64encode(path.read_bytes()).decode("ascii")
        except OSError as exc:
            raise BackendError(f"cannot read image {ref}: {exc}") from exc
        mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
        url = f"data:{mime};base64,{payload}"
    return {"type": "image_url", "image_url": {"url": url}}


class HttpBackend:
    """Backend for a chat-completions style endpoint (``POST {base_url}/chat/completions``)."""

    def __init__(
        self,
        base_url: str = "https://api.openai.com/v1",
        model: str = "gpt-4o",
        api_key: str | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise CredentialError(f"no API key; set {API_KEY_ENV}")
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def build_body(self, req: VlmRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": req.prompt}]
        content.extend(_image_part(ref) for ref in req.images)
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
        }
        if req.max_tokens is not None:
            body["max_tokens"] = req.max_tokens
        return body

    def complete(self, req: VlmRequest) -> Completion:
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions",
                json=self.build_body(req),
                headers={"Authorization": f"Bearer {self.api_key}"},
            )
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if resp.status_code in (401, 403):
            raise CredentialError(f"backend rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ContentError(f"unexpected response body: {exc}") from exc
        usage = data.get("usage") or {}
        return Completion(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            finish_reason=str(choice.get("finish_reason") or "stop"),
        )


class CostCounter:
    """Thread-safe tally of calls and tokens."""

    def __init__(self, input_rate: float = INPUT_RATE, output_rate: float = OUTPUT_RATE):
        self.input_rate = input_rate
        self.output_rate = output_rate
        self._lock = threading.Lock()
        self.calls = 0
        self.input_tokens = 0
        self.output_tokens = 0
        self.by_role: dict[str, int] = {}

    def record(self, role: str, completion: Completion) -> None:
        with self._lock:
            self.calls += 1
            self.input_tokens += completion.input_tokens
            self.output_tokens += completion.output_tokens
            self.by_role[role] = self.by_role.get(role, 0) + 1

    @property
    def cost(self) -> float:
        return (self.input_tokens * self.input_rate + self.output_tokens * self.output_rate) / 1e6

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "calls": self.calls,
                "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens,
                "cost_usd": round(self.cost, 6),
                "by_role": dict(sorted(self.by_role.items())),
            }


class VlmClient:
    """Wraps a backend with capped exponential backoff and accounting.

    Transient failures are retried up to ``max_attempts`` calls in total with
    delays ``base_delay * 2**i`` capped at ``max_delay``. Credential errors
    and other backend errors are raised immediately. A completion cut short
    by the token limit is a :class:`ContentError`.
    """

    def __init__(
        self,
        backend: Backend,
        max_attempts: int = 5,
        base_delay: float = 0.5,
        max_delay: float = 8.0,
        sleep: Callable[[float], None] = time.sleep,
        counter: CostCounter | None = None,
    ):
        if max_attempts < 1:
            raise ParameterError("max_attempts must be >= 1")
        self.backend = backend
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.sleep = sleep
        self.counter = counter or CostCounter()

    def complete(self, req: VlmRequest) -> str:
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                completion = self.backend.complete(req)
            except TransientBackendError as exc:
                last = exc
                if attempt == self.max_attempts:
                    break
                delay = min(self.max_delay, self.base_delay * 2 ** (attempt - 1))
                logger.warning("attempt %d/%d failed (%s); retrying in %.2fs",
                               attempt, self.max_attempts, exc, delay)
                self.sleep(delay)
                continue
            self.counter.record(req.role_tag, completion)
            if attempt > 1:
                logger.info("request succeeded after %d attempts", attempt)
            if completion.finish_reason == "length":
                raise ContentError("response truncated at the token limit")
            return completion.text
        raise TransportError(f"giving up after {self.max_attempts} attempts: {last}", self.max_attempts)
