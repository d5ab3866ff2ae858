"""Chat-completion transport with retries, bounded concurrency, and replay.

All external model calls go through a ``Transport`` that takes the JSON
request payload and returns the JSON response body (the de-facto
``POST /v1/chat/completions`` schema). Besides the real HTTP transport there
is a scriptable mock for tests, plus recording/replay transports so any
pipeline can be re-run byte-identically without a live endpoint.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence


class ClientError(RuntimeError):
    """Base class for chat-client failures."""


class TransportError(ClientError):
    """The endpoint could not be reached or kept failing after retries."""


class ProtocolError(ClientError):
    """The endpoint answered, but not with a usable completion."""


@dataclass(frozen=True)
class ChatMessage:
    """One conversation turn; images attach as content parts on the wire."""

    role: str
    content: str
    images: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"role must be system/user/assistant, got {self.role!r}")

    def to_wire(self) -> dict:
        if not self.images:
            return {"role": self.role, "content": self.content}
        parts: list[dict] = [{"type": "text", "text": self.content}]
        parts.extend(
            {"type": "image_url", "image_url": {"url": ref}} for ref in self.images
        )
        return {"role": self.role, "content": parts}


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")

    def to_payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [m.to_wire() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = ""
    auth_env: str = "SIMREC_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base: float = 0.5  # seconds; doubles per retry

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


class Transport:
    """Maps a chat payload to a response body; subclasses define how."""

    def send(self, payload: dict) -> dict:
        raise NotImplementedError


class HttpTransport(Transport):
    """JSON-over-HTTP transport; the auth token comes from the environment."""

    def __init__(self, cfg: EndpointConfig) -> None:
        if not cfg.base_url:
            raise ValueError("HTTP transport needs a base URL")
        self.cfg = cfg

    def send(self, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + "/v1/chat/completions"
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.auth_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        request = urllib.request.Request(
            url, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(request, timeout=self.cfg.timeout) as response:
                return json.loads(response.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise TransportError(f"{url}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(f"{url}: {exc}") from exc


class MockTransport(Transport):
    """Scriptable in-memory transport for tests.

    Either a ``responder`` callable (payload -> response dict or raw text) or
    a ``script`` of canned entries consumed in order; entries may be response
    dicts, raw strings, or exceptions to raise. Tracks total and concurrent
    calls so tests can assert retry counts and in-flight bounds.
    """

    def __init__(
        self,
        script: Sequence[object] | None = None,
        responder: Callable[[dict], object] | None = None,
        latency: float = 0.0,
    ) -> None:
        if (script is None) == (responder is None):
            raise ValueError("provide exactly one of script or responder")
        self._script = list(script) if script is not None else None
        self._responder = responder
        self._latency = latency
        self._lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight_seen = 0

    def send(self, payload: dict) -> dict:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self.in_flight)
            if self._script is not None:
                if not self._script:
                    raise AssertionError("mock script exhausted")
                entry = self._script.pop(0)
            else:
                entry = None
        try:
            if self._latency:
                time.sleep(self._latency)
            if entry is None:
                assert self._responder is not None
                entry = self._responder(payload)
            if isinstance(entry, Exception):
                raise entry
            if isinstance(entry, str):
                return text_response(entry)
            return entry  # type: ignore[return-value]
        finally:
            with self._lock:
                self.in_flight -= 1


def text_response(content: str) -> dict:
    """A minimal completion body whose first choice says ``content``."""
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


class RecordingTransport(Transport):
    """Wraps another transport and appends {request, response} JSONL rows."""

    def __init__(self, inner: Transport, path: str | Path) -> None:
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def send(self, payload: dict) -> dict:
        response = self.inner.send(payload)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(
                    json.dumps({"request": payload, "response": response}, sort_keys=True) + "\n"
                )
        return response


class ReplayTransport(Transport):
    """Serves recorded responses keyed by the exact request payload.

    Repeated identical requests replay their recorded responses in order.
    An unrecorded request is a transport error.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._responses: dict[str, list[dict]] = {}
        self._lock = threading.Lock()
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                self._responses.setdefault(_canonical(row["request"]), []).append(row["response"])

    def send(self, payload: dict) -> dict:
        key = _canonical(payload)
        with self._lock:
            queue = self._responses.get(key)
            if not queue:
                raise TransportError(f"{self.path}: no recorded response for request")
            return queue.pop(0)


@dataclass
class ClientStats:
    """Counters complete() updates; shared across a batch."""

    requests: int = 0
    retries: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, attempts: int) -> None:
        with self._lock:
            self.requests += 1
            self.retries += attempts - 1


def complete(
    req: ChatRequest,
    cfg: EndpointConfig,
    transport: Transport | None = None,
    stats: ClientStats | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send one chat request and return the first choice's message content.

    Transport failures are retried up to ``cfg.max_retries`` times with
    exponential backoff; a malformed success body raises ProtocolError.
    """
    if transport is None:
        transport = HttpTransport(cfg)
    payload = req.to_payload()
    last_error: TransportError | None = None
    for attempt in range(cfg.max_retries + 1):
        try:
            body = transport.send(payload)
        except TransportError as exc:
            last_error = exc
            if attempt < cfg.max_retries and cfg.backoff_base > 0:
                sleep(cfg.backoff_base * (2**attempt))
            continue
        if stats is not None:
            stats.record(attempt + 1)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion body: {exc}") from exc
        if not isinstance(content, str):
            raise ProtocolError("completion content is not text")
        return content
    assert last_error is not None
    if stats is not None:
        stats.record(cfg.max_retries + 1)
    raise TransportError(f"giving up after {cfg.max_retries + 1} attempts: {last_error}")


def complete_batch(
    reqs: Sequence[ChatRequest],
    cfg: EndpointConfig,
    transport: Transport | None = None,
    stats: ClientStats | None = None,
) -> list[str | ClientError]:
    """Complete many requests with at most ``cfg.max_in_flight`` concurrent.

    Results come back in input order regardless of completion order;
    per-request failures are returned positionally instead of aborting the
    batch.
    """
    if not reqs:
        return []
    if transport is None:
        transport = HttpTransport(cfg)

    def one(req: ChatRequest) -> str | ClientError:
        try:
            return complete(req, cfg, transport=transport, stats=stats)
        except ClientError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(one, reqs))
