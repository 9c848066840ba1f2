"""Uniform async client over OpenAI-compatible chat endpoints plus a scripted mock backend."""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Iterable, Mapping

import httpx

from sparsemoa.errors import (
    AuthError,
    ConfigError,
    EndpointNotConfigured,
    ProviderError,
    TransportError,
)
from sparsemoa.ledger import estimate_tokens

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
MOCK_SCHEME = "mock://"
DEFAULT_MAX_TOKENS = 2048
DEFAULT_TEMPERATURE = 0.7


@dataclass(frozen=True)
class ModelEndpoint:
    id: str
    base_url: str
    model_name: str
    api_key_ref: str | None = None
    default_temperature: float = DEFAULT_TEMPERATURE
    default_max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if not self.id:
            raise ConfigError("endpoint id must be non-empty")
        if not 0 <= self.default_temperature <= 2:
            raise ConfigError(f"{self.id}: default_temperature must lie in [0, 2]")
        if self.default_max_tokens < 1:
            raise ConfigError(f"{self.id}: default_max_tokens must be positive")
        if not self.is_mock and not self.api_key_ref:
            raise ConfigError(f"{self.id}: live endpoints need api_key_ref")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"bad message role {self.role!r}")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    endpoint_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request needs at least one message")
        for i, m in enumerate(self.messages):
            if m.role == "system" and i != 0:
                raise ValueError("a system message may only appear first")
            if not m.content:
                raise ValueError(f"message {i} has empty content")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    finish_reason: str = "stop"
    attempts: int = 1

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.completion_tokens, self.latency_ms) < 0:
            raise ValueError("token counts and latency must be non-negative")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    multiplier: float = 2.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return self.base_delay * self.multiplier ** (attempt - 1)


def fingerprint_request(request: ChatRequest) -> str:
    """Digest of the endpoint id and ordered (role, content) pairs.

    Sampling parameters are left out so a script keeps matching across
    temperature or max_tokens sweeps.
    """
    payload = [request.endpoint_id, [[m.role, m.content] for m in request.messages]]
    blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# mock backend


@dataclass(frozen=True)
class MockPolicy:
    """Fallback used when no scripted entry matches.

    ``kind`` is one of ``echo_last_user_message``, ``fixed_text``, ``error`` or
    ``function``. A function policy must be pure in the request or the mock
    stops being deterministic.
    """

    kind: str = "echo_last_user_message"
    text: str = ""
    fn: Callable[[ChatRequest], str] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("echo_last_user_message", "fixed_text", "error", "function"):
            raise ConfigError(f"unknown mock policy {self.kind!r}")
        if self.kind == "function" and self.fn is None:
            raise ConfigError("function policy needs fn")

    @classmethod
    def echo(cls) -> "MockPolicy":
        return cls("echo_last_user_message")

    @classmethod
    def fixed(cls, text: str) -> "MockPolicy":
        return cls("fixed_text", text=text)

    @classmethod
    def error(cls) -> "MockPolicy":
        return cls("error")

    @classmethod
    def function(cls, fn: Callable[[ChatRequest], str]) -> "MockPolicy":
        return cls("function", fn=fn)

    def apply(self, request: ChatRequest) -> str:
        if self.kind == "fixed_text":
            return self.text
        if self.kind == "function":
            assert self.fn is not None
            return self.fn(request)
        if self.kind == "error":
            raise ProviderError(f"mock endpoint {request.endpoint_id!r}: scripted error", status=500, attempts=1)
        for m in reversed(request.messages):
            if m.role == "user":
                return m.content
        return ""


@dataclass(frozen=True)
class MockRule:
    """Substring rule: the first rule whose needle occurs in any message wins."""

    endpoint_id: str
    contains: str
    content: str


class MockScript:
    """Immutable scripted backend: same request in, same response out.

    Lookup order is exact fingerprint entry, then substring rules, then the
    endpoint's own default policy, then the script-wide default policy.
    """

    def __init__(
        self,
        entries: Mapping[tuple[str, str], ChatResponse | str] | None = None,
        default_policy: MockPolicy | None = None,
        endpoint_policies: Mapping[str, MockPolicy] | None = None,
        rules: Iterable[MockRule] = (),
    ) -> None:
        normalized = {}
        for key, value in (entries or {}).items():
            normalized[key] = value if isinstance(value, ChatResponse) else ChatResponse(content=value)
        self.entries = MappingProxyType(normalized)
        self.default_policy = default_policy or MockPolicy.echo()
        self.endpoint_policies = MappingProxyType(dict(endpoint_policies or {}))
        self.rules = tuple(rules)

    def resolve(self, request: ChatRequest) -> tuple[str, str]:
        """Return (content, finish_reason) for ``request``."""
        hit = self.entries.get((request.endpoint_id, fingerprint_request(request)))
        if hit is not None:
            return hit.content, hit.finish_reason
        for rule in self.rules:
            if rule.endpoint_id == request.endpoint_id and any(rule.contains in m.content for m in request.messages):
                return rule.content, "stop"
        policy = self.endpoint_policies.get(request.endpoint_id, self.default_policy)
        return policy.apply(request), "stop"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "MockScript":
        """Build a script from its file form (see README for the schema)."""

        def policy(spec: Any) -> MockPolicy:
            if isinstance(spec, str):
                return MockPolicy(spec)
            if not isinstance(spec, Mapping):
                raise ConfigError(f"bad mock policy {spec!r}")
            kind = spec.get("type", "echo_last_user_message")
            if kind == "function":
                raise ConfigError("function policies cannot be loaded from files")
            return MockPolicy(kind, text=str(spec.get("text", "")))

        entries: dict[tuple[str, str], ChatResponse] = {}
        for i, entry in enumerate(data.get("entries") or []):
            ep = entry.get("endpoint_id")
            if not ep or "content" not in entry:
                raise ConfigError(f"mock entry {i} needs endpoint_id and content")
            fp = entry.get("fingerprint")
            if fp is None:
                msgs = entry.get("messages")
                if not msgs:
                    raise ConfigError(f"mock entry {i} needs a fingerprint or messages")
                req = ChatRequest(ep, tuple(ChatMessage(m["role"], m["content"]) for m in msgs))
                fp = fingerprint_request(req)
            entries[(ep, fp)] = ChatResponse(
                content=str(entry["content"]), finish_reason=str(entry.get("finish_reason", "stop"))
            )
        rules = [MockRule(r["endpoint_id"], r["contains"], str(r["content"])) for r in data.get("rules") or []]
        endpoint_policies = {k: policy(v) for k, v in (data.get("endpoint_policies") or {}).items()}
        default = policy(data["default_policy"]) if "default_policy" in data else None
        return cls(entries, default, endpoint_policies, rules)


# gateway


class Gateway:
    """Routes chat requests to live or mock endpoints.

    Safe for concurrent use by many tasks on one event loop; the number of
    requests in flight is capped by ``max_in_flight``.
    """

    def __init__(
        self,
        endpoints: Iterable[ModelEndpoint],
        mock_script: MockScript | None = None,
        retry: RetryPolicy | None = None,
        max_in_flight: int = 8,
        env: Mapping[str, str] | None = None,
        timeout: float = 120.0,
        sleep: Callable[[float], Any] = asyncio.sleep,
    ) -> None:
        self.endpoints: dict[str, ModelEndpoint] = {}
        for ep in endpoints:
            if ep.id in self.endpoints:
                raise ConfigError(f"duplicate endpoint id {ep.id!r}")
            self.endpoints[ep.id] = ep
        if mock_script is None and any(ep.is_mock for ep in self.endpoints.values()):
            raise ConfigError("mock endpoints configured but no mock script supplied")
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.mock_script = mock_script
        self.retry = retry or RetryPolicy()
        self.max_in_flight = max_in_flight
        self.timeout = timeout
        self._env = env if env is not None else os.environ
        self._sleep = sleep
        self._loop: asyncio.AbstractEventLoop | None = None
        self._gate: asyncio.Semaphore | None = None
        self.in_flight = 0
        self.peak_in_flight = 0

    def endpoint(self, endpoint_id: str) -> ModelEndpoint:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise EndpointNotConfigured(f"endpoint {endpoint_id!r} is not configured") from None

    def request(self, endpoint_id: str, messages: Iterable[ChatMessage], temperature: float | None = None) -> ChatRequest:
        """Build a request using the endpoint's defaults where not overridden."""
        ep = self.endpoint(endpoint_id)
        temp = ep.default_temperature if temperature is None else temperature
        return ChatRequest(endpoint_id, tuple(messages), temperature=temp, max_tokens=ep.default_max_tokens)

    def _current_gate(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._gate is None or self._loop is not loop:
            self._loop = loop
            self._gate = asyncio.Semaphore(self.max_in_flight)
        return self._gate

    async def complete_chat(self, request: ChatRequest) -> ChatResponse:
        return await self.with_retry(request, self.retry)

    async def with_retry(self, request: ChatRequest, policy: RetryPolicy) -> ChatResponse:
        ep = self.endpoint(request.endpoint_id)
        async with self._current_gate():
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            try:
                if ep.is_mock:
                    return self._complete_mock(request)
                return await self._complete_live(ep, request, policy)
            finally:
                self.in_flight -= 1

    def _complete_mock(self, request: ChatRequest) -> ChatResponse:
        assert self.mock_script is not None
        content, finish = self.mock_script.resolve(request)
        return ChatResponse(
            content=content,
            prompt_tokens=sum(estimate_tokens(m.content) for m in request.messages),
            completion_tokens=estimate_tokens(content),
            latency_ms=0,
            finish_reason=finish,
            attempts=1,
        )

    async def _complete_live(self, ep: ModelEndpoint, request: ChatRequest, policy: RetryPolicy) -> ChatResponse:
        assert ep.api_key_ref is not None
        secret = self._env.get(ep.api_key_ref)
        if not secret:
            raise AuthError(f"environment variable {ep.api_key_ref} is not set (endpoint {ep.id!r})")
        url = ep.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": ep.model_name,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {secret}"}
        last = ""
        async with httpx.AsyncClient(timeout=self.timeout) as client:
            for attempt in range(1, policy.max_attempts + 1):
                if attempt > 1:
                    await self._sleep(policy.delay(attempt - 1))
                started = time.monotonic()
                try:
                    resp = await client.post(url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    log.warning("%s attempt %d/%d failed: %s", ep.id, attempt, policy.max_attempts, last)
                    continue
                latency = int((time.monotonic() - started) * 1000)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    log.warning("%s attempt %d/%d got %s", ep.id, attempt, policy.max_attempts, last)
                    continue
                if resp.status_code >= 400:
                    raise ProviderError(
                        f"{ep.id}: HTTP {resp.status_code}", status=resp.status_code, body=resp.text, attempts=attempt
                    )
                return _parse_completion(resp, request, latency, attempt)
        raise TransportError(f"{ep.id}: giving up after {policy.max_attempts} attempts ({last})", attempts=policy.max_attempts)


def _parse_completion(resp: httpx.Response, request: ChatRequest, latency: int, attempts: int) -> ChatResponse:
    try:
        data = resp.json()
        choice = data["choices"][0]
        content = choice["message"].get("content") or ""
    except (ValueError, KeyError, IndexError, TypeError, AttributeError) as exc:
        raise ProviderError(f"malformed completion body: {exc}", status=resp.status_code, body=resp.text, attempts=attempts)
    usage = data.get("usage") or {}
    # some providers omit usage; fall back to the offline estimator
    prompt_tokens = usage.get("prompt_tokens")
    if prompt_tokens is None:
        prompt_tokens = sum(estimate_tokens(m.content) for m in request.messages)
    completion_tokens = usage.get("completion_tokens")
    if completion_tokens is None:
        completion_tokens = estimate_tokens(content)
    return ChatResponse(
        content=content,
        prompt_tokens=int(prompt_tokens),
        completion_tokens=int(completion_tokens),
        latency_ms=latency,
        finish_reason=str(choice.get("finish_reason") or "stop"),
        attempts=attempts,
    )
