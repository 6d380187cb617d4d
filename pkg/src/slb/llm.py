"""Chat-completion gateway: request types, providers, retries, rate limiting, and the format guard."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

SQL_ENVELOPE_SCHEMA = {
    "name": "sql_query",
    "schema": {
        "type": "object",
        "properties": {"sql": {"type": "string"}},
        "required": ["sql"],
        "additionalProperties": False,
    },
}


class ProviderError(Exception):
    pass


class TransientError(ProviderError):
    """Timeouts, rate limiting and server-side failures; safe to retry."""


class ProviderExhausted(ProviderError):
    pass


class AuthFailure(ProviderError):
    pass


class RequestTooLarge(ProviderError):
    pass


class ScriptMiss(ProviderError):
    def __init__(self, request: "ChatRequest", key: str):
        prompt = "\n\n".join(f"[{role}]\n{content}" for role, content in request.messages)
        super().__init__(f"no scripted response for {key}\n--- prompt ---\n{prompt}")
        self.request = request


class UnrecoverableFormat(Exception):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    response_schema: dict | None = field(default=None, hash=False)
    max_output_tokens: int = 1024
    # routing label for logs and test doubles; not part of the fingerprint
    purpose: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("messages must be non-empty")
        if msgs[0][0] not in ("system", "user"):
            raise ValueError("first message must be system or user")
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.model_id, [list(m) for m in self.messages], self.temperature, self.response_schema],
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @property
    def prompt_chars(self) -> int:
        return sum(len(c) for _, c in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    output_tokens: int = 0
    latency: float = 0.0

    def __post_init__(self) -> None:
        if self.finish_reason not in ("stop", "length", "error"):
            raise ValueError(f"bad finish_reason {self.finish_reason!r}")
        if self.finish_reason == "stop" and not self.text:
            raise ValueError("a stopped completion must carry text")


@dataclass
class ProviderConfig:
    endpoint: str = "https://api.openai.com/v1"
    api_key_env: str = "SLB_API_KEY"
    requests_per_minute: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    timeout: float = 120.0
    structured_output: bool = True

    def __post_init__(self) -> None:
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_env(cls, **overrides: Any) -> "ProviderConfig":
        base = os.environ.get("SLB_API_BASE")
        if base and "endpoint" not in overrides:
            overrides["endpoint"] = base
        return cls(**overrides)


class ChatProvider(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def user_request(model_id: str, system: str, user: str, **kwargs: Any) -> ChatRequest:
    messages = [("system", system), ("user", user)] if system else [("user", user)]
    return ChatRequest(model_id, tuple(messages), **kwargs)


# ---------------------------------------------------------------------------
# rate limiting and retries


class RateLimiter:
    """Sliding-window cap of ``per_minute`` acquisitions in any 60 s window."""

    def __init__(self, per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        self.capacity = max(1, int(per_minute))
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.capacity:
                    self._stamps.append(now)
                    return
                wait = self.window - (now - self._stamps[0])
            # floor avoids spinning on float residue when the clock is coarse
            self._sleep(max(wait, 1e-3))


class Gateway:
    """Wraps a backend provider with a shared rate limiter and retry policy."""

    def __init__(self, backend: ChatProvider, config: ProviderConfig | None = None,
                 sleep: Callable[[float], None] = time.sleep, rng: random.Random | None = None,
                 limiter: RateLimiter | None = None):
        self.backend = backend
        self.config = config or ProviderConfig()
        self._sleep = sleep
        self._rng = rng or random.Random(0)
        self._rng_lock = threading.Lock()
        self.limiter = limiter or RateLimiter(self.config.requests_per_minute, sleep=sleep)
        self.retries = 0

    def _backoff(self, attempt: int) -> float:
        with self._rng_lock:
            jitter = self._rng.uniform(0, self.config.backoff_base)
        return self.config.backoff_base * (2 ** attempt) + jitter

    def complete(self, request: ChatRequest) -> ChatResponse:
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.retries += 1
                self._sleep(self._backoff(attempt - 1))
            self.limiter.acquire()
            try:
                return self.backend.complete(request)
            except TransientError as exc:
                last = exc
                logger.info("transient failure (attempt %d): %s", attempt + 1, exc)
        raise ProviderExhausted(f"gave up after {self.config.max_retries} retries: {last}") from last


def complete(request: ChatRequest, config: ProviderConfig, backend: ChatProvider | None = None) -> ChatResponse:
    """One-shot completion through a :class:`Gateway`; defaults to the HTTP backend."""
    return Gateway(backend or OpenAICompatibleProvider(config), config).complete(request)


# ---------------------------------------------------------------------------
# HTTP backend

_CONTEXT_MARKERS = ("context_length", "context length", "maximum context", "too many tokens", "too long")


class OpenAICompatibleProvider:
    """OpenAI-style ``/chat/completions`` backend."""

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env, "")
        return {"Authorization": f"Bearer {key}"} if key else {}

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.response_schema is not None and self.config.structured_output:
            body["response_format"] = {"type": "json_schema", "json_schema": request.response_schema}
        return body

    def complete(self, request: ChatRequest) -> ChatResponse:
        url = self.config.endpoint.rstrip("/") + "/chat/completions"
        start = time.monotonic()
        try:
            resp = self.client.post(url, json=self.payload(request), headers=self._headers())
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthFailure(resp.text[:500])
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code in (400, 413):
            text = resp.text.lower()
            if resp.status_code == 413 or any(m in text for m in _CONTEXT_MARKERS):
                raise RequestTooLarge(resp.text[:500])
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        if resp.status_code >= 300:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        choice = data["choices"][0]
        text = choice.get("message", {}).get("content") or ""
        reason = choice.get("finish_reason") or "stop"
        if reason not in ("stop", "length"):
            reason = "stop" if text else "error"
        if reason == "stop" and not text:
            reason = "error"
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            finish_reason=reason,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            latency=time.monotonic() - start,
        )


# ---------------------------------------------------------------------------
# scripted provider and record/replay

_SCRIPTED_ERRORS = {
    "transient": TransientError,
    "auth": AuthFailure,
    "too_large": RequestTooLarge,
    "provider": ProviderError,
}


class ScriptedProvider:
    """Deterministic offline provider answering from a script.

    ``script`` entries are dicts with either ``fingerprint`` or ``index`` plus
    ``response_text``; an entry may instead carry ``error`` (one of
    ``transient``, ``auth``, ``too_large``, ``provider``) to simulate a
    failure. Index entries answer calls in arrival order. A plain list of
    strings is shorthand for an index script.
    """

    def __init__(self, script: Sequence[dict | str] | dict[str, str], context_limit: int | None = None):
        if not script:
            raise ValueError("script must be non-empty")
        self.by_fingerprint: dict[str, dict] = {}
        self.by_index: dict[int, dict] = {}
        if isinstance(script, dict):
            entries: Iterable[dict] = [{"fingerprint": k, "response_text": v} for k, v in script.items()]
        else:
            entries = [
                {"index": i, "response_text": e} if isinstance(e, str) else e for i, e in enumerate(script)
            ]
        for entry in entries:
            if "fingerprint" in entry:
                self.by_fingerprint[entry["fingerprint"]] = entry
            elif "index" in entry:
                self.by_index[int(entry["index"])] = entry
            else:
                raise ValueError(f"script entry needs 'fingerprint' or 'index': {entry}")
        self.context_limit = context_limit
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs: Any) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            index = len(self.calls)
            self.calls.append(request)
        if self.context_limit is not None and request.prompt_chars // 4 > self.context_limit:
            raise RequestTooLarge(
                f"prompt of ~{request.prompt_chars // 4} tokens exceeds limit {self.context_limit}"
            )
        fp = request.fingerprint()
        entry = self.by_fingerprint.get(fp)
        key = f"fingerprint {fp}"
        if entry is None:
            entry = self.by_index.get(index)
            key += f" / index {index}"
        if entry is None:
            logger.error("script miss for %s", key)
            raise ScriptMiss(request, key)
        if "error" in entry:
            raise _SCRIPTED_ERRORS[entry["error"]](entry.get("message", f"scripted {entry['error']}"))
        text = entry["response_text"]
        return ChatResponse(text=text, finish_reason="stop" if text else "error")


class FunctionProvider:
    """Provider backed by a plain ``request -> text`` callable."""

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
        text = self.fn(request)
        return ChatResponse(text=text, finish_reason="stop" if text else "error")


class RecordingProvider:
    """Passes calls through to ``inner`` and keeps a fingerprint script of the responses."""

    def __init__(self, inner: ChatProvider):
        self.inner = inner
        self.records: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        with self._lock:
            self.records[request.fingerprint()] = response.text
        return response

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        entries = [{"fingerprint": fp, "response_text": text} for fp, text in sorted(self.records.items())]
        path.write_text(json.dumps(entries, indent=2, ensure_ascii=False), encoding="utf-8")
        return path


class CountingProvider:
    """Counts completions issued through it (thread-safe)."""

    def __init__(self, inner: ChatProvider):
        self.inner = inner
        self.count = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.count += 1
        return self.inner.complete(request)


# ---------------------------------------------------------------------------
# format guard

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n?(.*?)```", re.S)

GUARD_SYSTEM = (
    "You reformat text. Return a JSON object with a single key \"sql\" whose value is the "
    "SQL query contained in the user's text, copied exactly. Do not change the query."
)


def parse_sql_envelope(raw: str) -> str | None:
    """The ``sql`` string of a ``{"sql": ...}`` JSON object, or None."""
    text = raw.strip()
    if not text.startswith("{"):
        return None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return None
    if isinstance(obj, dict) and isinstance(obj.get("sql"), str) and obj["sql"].strip():
        return obj["sql"]
    return None


def last_fenced_block(raw: str) -> str | None:
    blocks = [body.strip() for _, body in _FENCE.findall(raw)]
    blocks = [b for b in blocks if b]
    return blocks[-1] if blocks else None


def format_guard(raw: str, guard_model: str, provider: ChatProvider | None) -> str:
    """Extract the SQL string from a model's raw output.

    Order: a JSON ``{"sql": ...}`` envelope is returned unchanged; otherwise
    the last fenced code block; otherwise one identity call to
    ``guard_model`` in JSON mode.
    """
    if not raw or not raw.strip():
        raise UnrecoverableFormat("empty model output")
    sql = parse_sql_envelope(raw)
    if sql is not None:
        return sql
    block = last_fenced_block(raw)
    if block is not None:
        inner = parse_sql_envelope(block)
        return inner if inner is not None else block
    if provider is None:
        raise UnrecoverableFormat("output is neither JSON nor fenced and no guard provider is set")
    request = user_request(
        guard_model, GUARD_SYSTEM, raw, response_schema=SQL_ENVELOPE_SCHEMA, purpose="guard"
    )
    try:
        guarded = provider.complete(request).text
    except ProviderError as exc:
        raise UnrecoverableFormat(f"guard call failed: {exc}") from exc
    sql = parse_sql_envelope(guarded)
    if sql is None:
        block = last_fenced_block(guarded)
        sql = parse_sql_envelope(block) if block else None
    if sql is None:
        raise UnrecoverableFormat(f"guard output still unparseable: {guarded[:200]!r}")
    return sql
