"""Layered MoA / SMoA pipeline execution with full call tracing."""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

from sparsemoa import prompts
from sparsemoa.errors import (
    ConfigError,
    GatewayError,
    LayerFailed,
    PromptError,
    RoleCountMismatch,
    RunFailed,
    SmoaError,
    UnparseableVerdict,
)
from sparsemoa.gateway import ChatMessage, ChatRequest, ChatResponse, Gateway
from sparsemoa.prompts import JudgeVerdict, RoleProfile

log = logging.getLogger(__name__)

TRACE_VERSION = 1
STRATEGIES = ("moa", "smoa", "sc", "mad")
CALL_ROLES = ("proposer", "judge_moderator", "aggregator", "role_generator", "debater", "sc_sampler")


@dataclass(frozen=True)
class PipelineConfig:
    proposers: tuple[str, ...]
    aggregator: str
    judge_moderator: str | None = None
    strategy: str = "smoa"
    layers: int = 2
    k: int = 2
    roles_enabled: bool = True
    response_selection_enabled: bool = True
    early_stopping_enabled: bool = True
    split_judge_moderator: bool = False
    temperature: float = 0.7
    dataset_description: str = ""
    task_requirement: str = ""
    sc_paths: int = 4
    mad_rounds: int = 2
    debaters: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "proposers", tuple(self.proposers))
        if self.debaters is not None:
            object.__setattr__(self, "debaters", tuple(self.debaters))
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.proposers:
            raise ConfigError("at least one proposer is required")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"k={self.k} must lie in [1, n={self.n}]")
        if not 0 <= self.temperature <= 2:
            raise ConfigError("temperature must lie in [0, 2]")
        if self.sc_paths < 1 or self.mad_rounds < 1:
            raise ConfigError("sc_paths and mad_rounds must be >= 1")
        if self.strategy == "smoa" and self.uses_judge and not self.judge_moderator:
            raise ConfigError("smoa with selection or early stopping needs a judge_moderator endpoint")
        if self.strategy == "mad" and len(self.debater_ids) != 2:
            raise ConfigError("mad needs exactly 2 debater endpoints")

    @property
    def n(self) -> int:
        return len(self.proposers)

    @property
    def uses_judge(self) -> bool:
        return self.response_selection_enabled or self.early_stopping_enabled

    @property
    def debater_ids(self) -> tuple[str, ...]:
        return self.debaters if self.debaters is not None else self.proposers[:2]

    def replace(self, **changes: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def endpoint_ids(self) -> set[str]:
        ids = set(self.proposers) | {self.aggregator}
        if self.judge_moderator:
            ids.add(self.judge_moderator)
        if self.debaters:
            ids.update(self.debaters)
        return ids


@dataclass
class TraceEvent:
    call_role: str
    layer_index: int
    endpoint_id: str
    slot: int | None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    retries: int = 0
    finish_reason: str = ""
    messages: list[dict[str, str]] = field(default_factory=list)
    response: str = ""
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class LayerState:
    layer_index: int
    inputs: list[list[ChatMessage]]
    candidates: list[tuple[int, str]]
    verdict: JudgeVerdict | None = None

    @property
    def texts(self) -> list[str]:
        return [text for _, text in self.candidates]


@dataclass
class RunTrace:
    query_id: str
    strategy: str
    run_id: str = ""
    n: int = 0
    layers: int = 0
    k: int = 0
    events: list[TraceEvent] = field(default_factory=list)
    layer_log: list[dict[str, Any]] = field(default_factory=list)
    stop_layer: int = 0
    final_answer: str = ""
    roles_used: list[RoleProfile] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def prompt_tokens(self) -> int:
        return sum(e.prompt_tokens for e in self.events)

    @property
    def completion_tokens(self) -> int:
        return sum(e.completion_tokens for e in self.events)

    def count(self, call_role: str) -> int:
        return sum(1 for e in self.events if e.call_role == call_role)

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_version": TRACE_VERSION,
            "run_id": self.run_id,
            "query_id": self.query_id,
            "strategy": self.strategy,
            "n": self.n,
            "l": self.layers,
            "k": self.k,
            "events": [e.to_dict() for e in self.events],
            "layers": self.layer_log,
            "stop_layer": self.stop_layer,
            "final_answer": self.final_answer,
            "roles_used": [r.to_dict() for r in self.roles_used],
            "flags": self.flags,
            "extra": self.extra,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunTrace":
        if d.get("trace_version") != TRACE_VERSION:
            raise ValueError(f"unsupported trace_version {d.get('trace_version')!r}")
        return cls(
            query_id=d["query_id"],
            strategy=d["strategy"],
            run_id=d.get("run_id", ""),
            n=d.get("n", 0),
            layers=d.get("l", 0),
            k=d.get("k", 0),
            events=[TraceEvent(**e) for e in d.get("events", [])],
            layer_log=d.get("layers", []),
            stop_layer=d.get("stop_layer", 0),
            final_answer=d.get("final_answer", ""),
            roles_used=[RoleProfile(**r) for r in d.get("roles_used", [])],
            flags=d.get("flags", []),
            extra=d.get("extra", {}),
            error=d.get("error"),
        )


def _fail(exc: SmoaError, trace: RunTrace) -> SmoaError:
    trace.error = f"{type(exc).__name__}: {exc}"
    exc.trace = trace  # type: ignore[attr-defined]
    return exc


class Engine:
    """Runs pipelines against a :class:`Gateway`.

    Generated role profiles are cached per (dataset description, task
    requirement, n, aggregator) for the lifetime of the engine, so a benchmark
    run generates them once.
    """

    def __init__(self, gateway: Gateway) -> None:
        self.gateway = gateway
        self._roles: dict[tuple, list[RoleProfile] | None] = {}
        self._role_locks: dict[tuple, tuple[asyncio.AbstractEventLoop, asyncio.Lock]] = {}

    # calls

    async def call(
        self, call_role: str, layer_index: int, slot: int | None, endpoint_id: str,
        messages: Sequence[ChatMessage], temperature: float | None = None,
    ) -> tuple[TraceEvent, ChatResponse | None, GatewayError | None]:
        """Issue one model call; never raises for gateway failures, returns them instead."""
        request = self.gateway.request(endpoint_id, messages, temperature)
        event = TraceEvent(
            call_role=call_role, layer_index=layer_index, endpoint_id=endpoint_id, slot=slot,
            messages=[m.to_dict() for m in request.messages],
        )
        try:
            resp = await self.gateway.complete_chat(request)
        except GatewayError as exc:
            event.retries = max(exc.attempts - 1, 0)
            event.error = f"{type(exc).__name__}: {exc}"
            log.warning("%s call to %s failed: %s", call_role, endpoint_id, exc)
            return event, None, exc
        event.prompt_tokens = resp.prompt_tokens
        event.completion_tokens = resp.completion_tokens
        event.latency_ms = resp.latency_ms
        event.retries = resp.attempts - 1
        event.finish_reason = resp.finish_reason
        event.response = resp.content
        return event, resp, None

    # roles

    def _role_lock(self, key: tuple) -> asyncio.Lock:
        loop = asyncio.get_running_loop()
        held = self._role_locks.get(key)
        if held is None or held[0] is not loop:
            held = (loop, asyncio.Lock())
            self._role_locks[key] = held
        return held[1]

    async def generate_roles(self, config: PipelineConfig, trace: RunTrace | None = None) -> list[RoleProfile]:
        """Generate (once) and return the role profiles for ``config``.

        Raises RoleCountMismatch or a GatewayError when generation fails; the
        failure is cached too, so later runs skip straight to the no-roles path.
        """
        key = (config.dataset_description, config.task_requirement, config.n, config.aggregator)
        async with self._role_lock(key):
            if key in self._roles:
                cached = self._roles[key]
                if cached is None:
                    raise RoleCountMismatch(config.n, 0)
                return cached
            messages = prompts.render_role_generation_prompt(config.dataset_description, config.task_requirement, config.n)
            event, resp, err = await self.call("role_generator", 0, None, config.aggregator, messages)
            if trace is not None:
                trace.events.append(event)
            try:
                if err is not None:
                    raise err
                assert resp is not None
                roles = prompts.parse_roles(resp.content, config.n)
            except (RoleCountMismatch, GatewayError):
                self._roles[key] = None
                raise
            self._roles[key] = roles
            return roles

    async def _roles_or_none(self, config: PipelineConfig, trace: RunTrace) -> list[RoleProfile] | None:
        try:
            roles = await self.generate_roles(config, trace)
        except (RoleCountMismatch, GatewayError) as exc:
            trace.flags.append(f"roles_disabled: {exc}")
            return None
        trace.roles_used = list(roles)
        return roles

    # layers

    @staticmethod
    def proposer_messages(query: str, references: Sequence[str] | None, role: RoleProfile | None) -> list[ChatMessage]:
        prefix = role.description if role is not None else ""
        if references:
            system = prompts.aggregate_system_text(references)
            if prefix:
                system = prefix + "\n\n" + system
            return [ChatMessage("system", system), ChatMessage("user", query)]
        if prefix:
            return [ChatMessage("system", prefix), ChatMessage("user", query)]
        return [ChatMessage("user", query)]

    async def run_layer(
        self, i: int, query: str, references: Sequence[str] | None, roles: Sequence[RoleProfile] | None,
        config: PipelineConfig, trace: RunTrace,
    ) -> LayerState:
        if not 1 <= i <= config.layers:
            raise ValueError(f"layer {i} outside [1, {config.layers}]")
        inputs = [
            self.proposer_messages(query, references, roles[j] if roles else None) for j in range(config.n)
        ]
        results = await asyncio.gather(*(
            self.call("proposer", i, j, config.proposers[j], inputs[j], config.temperature)
            for j in range(config.n)
        ))
        candidates = []
        # events in proposer order, not completion order
        for j, (event, resp, err) in enumerate(results):
            trace.events.append(event)
            if err is not None:
                trace.flags.append(f"layer {i} proposer {j} failed")
            candidates.append((j, resp.content if resp is not None else ""))
        state = LayerState(i, inputs, candidates)
        if not any(state.texts):
            raise _fail(LayerFailed(i), trace)
        return state

    async def select_and_moderate(
        self, state: LayerState, query: str, config: PipelineConfig, trace: RunTrace
    ) -> JudgeVerdict:
        texts = state.texts
        n = len(texts)
        everyone = tuple(range(n))
        if not config.uses_judge:
            return JudgeVerdict(reasoning="", chosen=everyone, end_debate=False)
        k = config.k if config.response_selection_enabled else n
        i = state.layer_index
        assert config.judge_moderator is not None

        if not config.split_judge_moderator:
            messages = prompts.render_judge_moderator_prompt(texts, query, k)
            verdict = await self._verdict(i, config.judge_moderator, messages, texts, k, trace)
        else:
            chosen, end = everyone[:k], False
            reasoning = []
            if config.response_selection_enabled:
                messages = prompts.render_judge_moderator_prompt(texts, query, k, template=prompts.JUDGE_ONLY)
                v = await self._verdict(i, config.judge_moderator, messages, texts, k, trace, need_end=False)
                chosen = v.chosen
                reasoning.append(v.reasoning)
            if config.early_stopping_enabled:
                messages = prompts.render_moderator_only_prompt(texts, query)
                v = await self._verdict(i, config.judge_moderator, messages, texts, k, trace, need_chosen=False)
                end = v.end_debate
                reasoning.append(v.reasoning)
            verdict = JudgeVerdict("\n".join(reasoning), chosen, end)

        if not config.response_selection_enabled:
            verdict = dataclasses.replace(verdict, chosen=everyone)
        return verdict

    async def _verdict(
        self, i: int, endpoint_id: str, messages: list[ChatMessage], texts: list[str], k: int,
        trace: RunTrace, need_chosen: bool = True, need_end: bool = True,
    ) -> JudgeVerdict:
        event, resp, err = await self.call("judge_moderator", i, None, endpoint_id, messages)
        trace.events.append(event)
        try:
            if err is not None:
                raise err
            assert resp is not None
            verdict = prompts.parse_judge_verdict(
                resp.content, len(texts), k, need_chosen=need_chosen, need_end=need_end
            )
        except (UnparseableVerdict, GatewayError) as exc:
            trace.flags.append(f"layer {i} verdict fallback: {type(exc).__name__}")
            return prompts.fallback_verdict(texts, k)
        if verdict.normalized:
            trace.flags.append(f"layer {i} verdict normalized")
        return verdict

    @staticmethod
    def forwarded(state: LayerState, verdict: JudgeVerdict) -> list[str]:
        """Texts of the chosen candidates in verdict order, skipping empty ones."""
        texts = state.texts
        refs = [texts[j] for j in verdict.chosen if texts[j]]
        return refs or [t for t in texts if t]

    async def _aggregate(self, query: str, references: Sequence[str], layer: int, config: PipelineConfig, trace: RunTrace) -> None:
        messages = prompts.render_aggregate_prompt(references, query)
        event, resp, err = await self.call("aggregator", layer, None, config.aggregator, messages, config.temperature)
        trace.events.append(event)
        if err is not None:
            raise _fail(RunFailed(f"aggregator failed: {err}"), trace)
        assert resp is not None
        if not resp.content:
            raise _fail(RunFailed("aggregator returned empty text"), trace)
        trace.final_answer = resp.content

    # strategies

    def _new_trace(self, query_id: str, config: PipelineConfig, run_id: str | None) -> RunTrace:
        return RunTrace(
            query_id=query_id, strategy=config.strategy, run_id=run_id or query_id,
            n=config.n, layers=config.layers, k=config.k,
        )

    async def run_smoa(self, query: str, config: PipelineConfig, query_id: str = "q", run_id: str | None = None) -> RunTrace:
        trace = self._new_trace(query_id, config, run_id)
        roles = await self._roles_or_none(config, trace) if config.roles_enabled else None
        references: list[str] | None = None
        for i in range(1, config.layers + 1):
            state = await self.run_layer(i, query, references, roles, config, trace)
            verdict = await self.select_and_moderate(state, query, config, trace)
            state.verdict = verdict
            references = self.forwarded(state, verdict)
            trace.stop_layer = i
            trace.layer_log.append({"layer_index": i, "verdict": verdict.to_dict(), "forwarded": len(references)})
            if verdict.end_debate and config.early_stopping_enabled:
                break
        assert references is not None
        await self._aggregate(query, references, trace.stop_layer, config, trace)
        return trace

    async def run_moa(self, query: str, config: PipelineConfig, query_id: str = "q", run_id: str | None = None) -> RunTrace:
        trace = self._new_trace(query_id, config, run_id)
        references: list[str] | None = None
        for i in range(1, config.layers + 1):
            state = await self.run_layer(i, query, references, None, config, trace)
            references = [t for t in state.texts if t]
            trace.stop_layer = i
            trace.layer_log.append({"layer_index": i, "verdict": None, "forwarded": len(references)})
        assert references is not None
        await self._aggregate(query, references, trace.stop_layer, config, trace)
        return trace

    async def run(self, query: str, config: PipelineConfig, query_id: str = "q", run_id: str | None = None) -> RunTrace:
        """Dispatch on ``config.strategy``. Failures raise with the partial trace on ``exc.trace``."""
        from sparsemoa import baselines

        runner = {
            "smoa": self.run_smoa,
            "moa": self.run_moa,
            "sc": lambda q, c, qid, rid: baselines.run_self_consistency(self, q, c, qid, rid),
            "mad": lambda q, c, qid, rid: baselines.run_mad(self, q, c, qid, rid),
        }[config.strategy]
        try:
            return await runner(query, config, query_id, run_id)
        except PromptError as exc:
            raise RunFailed(str(exc)) from exc
