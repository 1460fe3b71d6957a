"""Vision-chat providers: an OpenAI-compatible HTTP client, a scripted mock and a replay source.

All providers share one contract, :meth:`Provider.complete`, and are safe to
share between threads: concurrency (``max_in_flight``), request rate and the
per-(strategy, stage) call counters are enforced per provider instance.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union

from . import parsing

logger = logging.getLogger(__name__)

COMPLETE = "complete"
TRUNCATED = "truncated"
REFUSED = "refused"

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ProviderError(RuntimeError):
    """Base class for provider failures."""


class CredentialMissing(ProviderError):
    pass


class RequestRejected(ProviderError):
    def __init__(self, status: int | None, detail: str = ""):
        self.status = status
        super().__init__(f"request rejected (status {status}): {detail[:200]}")


class RetriesExhausted(ProviderError):
    def __init__(self, attempts: int, last_status: int | None, detail: str = ""):
        self.attempts = attempts
        self.last_status = last_status
        super().__init__(f"gave up after {attempts} attempts (last status {last_status}): {detail[:200]}")


class ReplayMiss(ProviderError):
    pass


@dataclass(frozen=True)
class RequestTag:
    video_id: str
    strategy: str
    stage: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/jpeg"

    def data_url(self) -> str:
        return f"data:{self.media_type};base64," + base64.b64encode(self.data).decode("ascii")


UserPart = Union[str, ImagePart]


@dataclass(frozen=True)
class VisionChatRequest:
    system_text: str
    user_parts: tuple[UserPart, ...]
    tag: RequestTag
    model_id: str = "mock"
    temperature: float = 0.0
    max_output: int = 1024

    def validate(self, max_image_bytes: int) -> None:
        if not self.user_parts:
            raise ValueError("request needs at least one user part")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        for part in self.user_parts:
            if isinstance(part, ImagePart) and len(part.data) > max_image_bytes:
                raise ValueError(f"image payload of {len(part.data)} bytes exceeds cap {max_image_bytes}")

    @property
    def text(self) -> str:
        return "\n".join(p for p in self.user_parts if isinstance(p, str))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.user_parts if isinstance(p, ImagePart)]


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: str = COMPLETE
    latency_ms: float = 0.0
    attempt_count: int = 1


@dataclass
class ProviderConfig:
    kind: str = "mock"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    credential_env: str = "MARSVID_API_KEY"
    max_in_flight: int = 4
    requests_per_minute: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_image_bytes: int = 4 * 1024 * 1024
    timeout: float = 120.0

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock", "replay"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class CallCounter:
    """Thread-safe call counts keyed by (strategy, stage)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: Counter = Counter()

    def increment(self, strategy: str, stage: str) -> None:
        with self._lock:
            self._counts[(strategy, stage)] += 1

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._counts.values())

    def by_stage(self) -> dict[tuple[str, str], int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


class RateLimiter:
    """Sliding 60-second window limiter; ``clock`` and ``sleep`` are injectable for tests."""

    window = 60.0

    def __init__(self, requests_per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.limit = max(1, int(requests_per_minute))
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._sent: deque[float] = deque()

    def acquire(self) -> float:
        """Block until a request may be dispatched; return the dispatch timestamp."""
        while True:
            with self._lock:
                now = self.clock()
                while self._sent and now - self._sent[0] >= self.window:
                    self._sent.popleft()
                if len(self._sent) < self.limit:
                    self._sent.append(now)
                    return now
                wait = self.window - (now - self._sent[0])
            self.sleep(max(wait, 1e-3))


class Provider:
    """Shared machinery: in-flight cap, call accounting and request validation."""

    kind = "base"

    def __init__(self, config: ProviderConfig | None = None):
        self.config = config or ProviderConfig(kind=self.kind if self.kind != "base" else "mock")
        self.counter = CallCounter()
        self.network_calls = 0
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self._net_lock = threading.Lock()

    def complete(self, request: VisionChatRequest) -> ModelResponse:
        request.validate(self.config.max_image_bytes)
        with self._slots:
            response = self._complete(request)
        self.counter.increment(request.tag.strategy, request.tag.stage)
        return response

    def _complete(self, request: VisionChatRequest) -> ModelResponse:
        raise NotImplementedError

    def _count_network_call(self) -> None:
        with self._net_lock:
            self.network_calls += 1


# -- HTTP ---------------------------------------------------------------------

Transport = Callable[[str, dict, dict, float], tuple[int, Any]]


def httpx_transport(url: str, headers: dict, payload: dict, timeout: float) -> tuple[int, Any]:
    import httpx

    try:
        resp = httpx.post(url, headers=headers, json=payload, timeout=timeout)
    except httpx.TransportError as exc:
        return 0, str(exc)
    try:
        body = resp.json()
    except ValueError:
        body = resp.text
    return resp.status_code, body


class HttpProvider(Provider):
    """Client for OpenAI-compatible ``/chat/completions`` endpoints with image parts.

    Transient failures (rate limiting, 5xx, connection errors reported as
    status 0) are retried with exponential backoff. Content-filter refusals
    are returned as ``finish_reason="refused"`` and never retried.
    """

    kind = "http"

    def __init__(self, config: ProviderConfig, transport: Transport = httpx_transport,
                 sleep: Callable[[float], None] = time.sleep, rate_limiter: RateLimiter | None = None):
        super().__init__(config)
        self.transport = transport
        self.sleep = sleep
        self.rate_limiter = rate_limiter or RateLimiter(config.requests_per_minute)

    def _credential(self) -> str:
        key = os.environ.get(self.config.credential_env)
        if not key:
            raise CredentialMissing(f"environment variable {self.config.credential_env} is not set")
        return key

    @staticmethod
    def payload(request: VisionChatRequest) -> dict:
        content = []
        for part in request.user_parts:
            if isinstance(part, ImagePart):
                content.append({"type": "image_url", "image_url": {"url": part.data_url()}})
            else:
                content.append({"type": "text", "text": part})
        return {
            "model": request.model_id,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
        }

    @staticmethod
    def _read_choice(body: Any) -> tuple[str, str]:
        choice = body["choices"][0]
        message = choice.get("message") or {}
        text = message.get("content") or ""
        if isinstance(text, list):
            text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
        reason = choice.get("finish_reason")
        if message.get("refusal") or reason == "content_filter":
            return text or (message.get("refusal") or ""), REFUSED
        if reason == "length":
            return text, TRUNCATED
        return text, COMPLETE

    def _complete(self, request: VisionChatRequest) -> ModelResponse:
        headers = {"Authorization": f"Bearer {self._credential()}", "Content-Type": "application/json"}
        payload = self.payload(request)
        started = time.monotonic()
        attempts = 0
        last_status: int | None = None
        detail = ""
        while attempts <= self.config.max_retries:
            if attempts:
                self.sleep(self.config.backoff_base * 2 ** (attempts - 1))
            attempts += 1
            self.rate_limiter.acquire()
            self._count_network_call()
            status, body = self.transport(self.config.endpoint, headers, payload, self.config.timeout)
            last_status = status
            if status == 200:
                try:
                    text, reason = self._read_choice(body)
                except (KeyError, IndexError, TypeError, AttributeError):
                    raise RequestRejected(status, f"unexpected response body: {str(body)[:200]}") from None
                return ModelResponse(text, reason, (time.monotonic() - started) * 1000.0, attempts)
            detail = body if isinstance(body, str) else json.dumps(body)[:500]
            if status != 0 and status not in RETRYABLE_STATUS and status < 500:
                raise RequestRejected(status, detail)
            logger.warning("%s/%s: transient status %s (attempt %d)", request.tag.video_id,
                           request.tag.stage, status, attempts)
        raise RetriesExhausted(attempts, last_status, detail)


# -- Mock ---------------------------------------------------------------------

ECHO_SCHEMA = "echo_schema"
MALFORMED = "malformed"
REFUSE = "refuse"

MALFORMED_TEXT = '{"analysis": [unterminated <<< output cut'
REFUSAL_TEXT = "I'm sorry, but I can't help with this request."


@dataclass
class MockScript:
    """Canned responses keyed by (video_id, stage), with a default for everything else."""

    responses: dict[tuple[str, str], str] = field(default_factory=dict)
    default_behavior: str = ECHO_SCHEMA
    seed: int = 0

    def __post_init__(self) -> None:
        if self.default_behavior not in (ECHO_SCHEMA, MALFORMED, REFUSE):
            raise ValueError(f"unknown default behaviour {self.default_behavior!r}")

    def set(self, video_id: str, stage: str, response: str | dict) -> None:
        if not isinstance(response, str):
            response = json.dumps(response, sort_keys=True)
        self.responses[(video_id, stage)] = response

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        script = cls(default_behavior=data.get("default", ECHO_SCHEMA), seed=int(data.get("seed", 0)))
        for video_id, stages in (data.get("responses") or {}).items():
            for stage, response in stages.items():
                script.set(video_id, stage, response)
        return script

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        nested: dict[str, dict[str, str]] = {}
        for (video_id, stage), text in sorted(self.responses.items()):
            nested.setdefault(video_id, {})[stage] = text
        return {"default": self.default_behavior, "seed": self.seed, "responses": nested}

    def _seeded_confidence(self, video_id: str, stage: str) -> float:
        digest = hashlib.sha256(f"{self.seed}:{video_id}:{stage}".encode()).digest()
        return round(0.3 + 0.4 * digest[0] / 255.0, 2)

    def echo(self, video_id: str, stage: str) -> str:
        """Minimal schema-valid output for a stage (non-hateful, seeded confidence)."""
        schema = parsing.STAGE_SCHEMA.get(stage, parsing.DECISION_SCHEMA)
        conf = self._seeded_confidence(video_id, stage)
        if schema == parsing.DESCRIPTION_SCHEMA:
            obj: dict = {"description": f"Mock description of {video_id} ({stage})."}
        elif schema == parsing.HYPOTHESIS_SCHEMA:
            obj = {"evidence": f"mock {stage} evidence", "reasoning": f"mock {stage} reasoning", "confidence": conf}
        else:
            obj = {"label": "non-hateful", "confidence": conf, "key_factors": ["mock"], "rationale": "mock rationale"}
        return json.dumps(obj, sort_keys=True)


def mock_complete(request: VisionChatRequest, script: MockScript) -> ModelResponse:
    key = (request.tag.video_id, request.tag.stage)
    if key in script.responses:
        return ModelResponse(script.responses[key])
    if script.default_behavior == MALFORMED:
        return ModelResponse(MALFORMED_TEXT)
    if script.default_behavior == REFUSE:
        return ModelResponse(REFUSAL_TEXT, REFUSED)
    return ModelResponse(script.echo(*key))


class MockProvider(Provider):
    """Deterministic offline provider driven by a :class:`MockScript`.

    ``on_request`` (if given) sees every request; tests use it to capture
    rendered prompts.
    """

    kind = "mock"

    def __init__(self, script: MockScript | None = None, config: ProviderConfig | None = None,
                 on_request: Callable[[VisionChatRequest], None] | None = None):
        super().__init__(config or ProviderConfig(kind="mock"))
        self.script = script or MockScript()
        self.on_request = on_request
        self.requests: list[VisionChatRequest] = []
        self._req_lock = threading.Lock()

    def _complete(self, request: VisionChatRequest) -> ModelResponse:
        with self._req_lock:
            self.requests.append(request)
        if self.on_request is not None:
            self.on_request(request)
        return mock_complete(request, self.script)


class ReplayProvider(Provider):
    """Serve previously recorded raw responses from a run store; never touches the network."""

    kind = "replay"

    def __init__(self, store, *, ablation: str, model_id: str, prompt_hash: str, frames_n: int,
                 config: ProviderConfig | None = None):
        super().__init__(config or ProviderConfig(kind="replay"))
        self.store = store
        self.condition = dict(ablation=ablation, model_id=model_id, prompt_version_hash=prompt_hash,
                              frames_n=frames_n)

    def _complete(self, request: VisionChatRequest) -> ModelResponse:
        from .store import RunKey

        key = RunKey(video_id=request.tag.video_id, strategy=request.tag.strategy, stage=request.tag.stage,
                     **self.condition)
        record = self.store.get_record(key)
        if record is None:
            raise ReplayMiss(f"no recorded response for {key.encode()}")
        return ModelResponse(record.raw_response, record.finish_reason, 0.0, record.attempt_count)


def make_provider(config: ProviderConfig, *, script: MockScript | None = None, store=None,
                  replay_condition: dict | None = None) -> Provider:
    if config.kind == "mock":
        return MockProvider(script, config)
    if config.kind == "http":
        return HttpProvider(config)
    if store is None or replay_condition is None:
        raise ValueError("replay provider needs a source store and run condition")
    return ReplayProvider(store, config=config, **replay_condition)
