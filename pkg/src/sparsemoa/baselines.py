"""Self-consistency and multi-agent debate baselines, traced like the layered pipelines."""

from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

from sparsemoa import prompts
from sparsemoa.engine import PipelineConfig, RunTrace, _fail
from sparsemoa.errors import RunFailed
from sparsemoa.gateway import ChatMessage
from sparsemoa.prompts import extract_answer, normalize_answer

if TYPE_CHECKING:
    from sparsemoa.engine import Engine


@dataclass(frozen=True)
class VoteTally:
    counts: dict[str, int]
    winner: str


def majority_vote(answers: Sequence[str]) -> VoteTally:
    """Count normalized answers; ties go to whichever answer appeared first."""
    if not answers:
        raise ValueError("majority_vote needs at least one answer")
    counts: dict[str, int] = {}
    for a in answers:
        key = normalize_answer(a)
        counts[key] = counts.get(key, 0) + 1
    # dicts keep first-insertion order, and max() returns the first maximal key
    winner = max(counts, key=counts.__getitem__)
    return VoteTally(counts, winner)


async def run_self_consistency(
    engine: Engine, query: str, config: PipelineConfig, query_id: str = "q", run_id: str | None = None,
    m: int | None = None,
) -> RunTrace:
    m = config.sc_paths if m is None else m
    if m < 1:
        raise ValueError("m must be >= 1")
    endpoint = config.proposers[0]
    trace = RunTrace(query_id=query_id, strategy="sc", run_id=run_id or query_id, n=m, layers=1, k=0)
    messages = [ChatMessage("user", query)]
    results = await asyncio.gather(*(
        engine.call("sc_sampler", 1, j, endpoint, messages, config.temperature) for j in range(m)
    ))
    samples: list[str] = []
    for j, (event, resp, err) in enumerate(results):
        trace.events.append(event)
        if resp is not None:
            samples.append(resp.content)
        else:
            trace.flags.append(f"sample {j} failed")
    trace.stop_layer = 1
    if not samples:
        raise _fail(RunFailed("every self-consistency sample failed"), trace)

    answered = [(text, extract_answer(text)) for text in samples]
    answered = [(text, ans) for text, ans in answered if ans is not None]
    if not answered:
        trace.flags.append("no sample contained an answer marker")
        trace.final_answer = samples[0]
        return trace
    tally = majority_vote([ans for _, ans in answered])
    trace.final_answer = next(text for text, ans in answered if normalize_answer(ans) == tally.winner)
    trace.extra["vote"] = {"counts": tally.counts, "winner": tally.winner}
    return trace


@dataclass
class DebateState:
    round: int = 0
    transcript: list[tuple[str, str]] = field(default_factory=list)

    def add(self, speaker: str, text: str) -> None:
        if speaker in ("affirmative", "negative"):
            expected = "affirmative" if sum(s != "judge" for s, _ in self.transcript) % 2 == 0 else "negative"
            if speaker != expected:
                raise ValueError(f"expected {expected} to speak, got {speaker}")
        self.transcript.append((speaker, text))


async def run_mad(
    engine: Engine, query: str, config: PipelineConfig, query_id: str = "q", run_id: str | None = None,
    rounds: int | None = None,
) -> RunTrace:
    rounds = config.mad_rounds if rounds is None else rounds
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    debaters = config.debater_ids
    if len(debaters) != 2:
        raise RunFailed("multi-agent debate needs exactly 2 debaters")
    trace = RunTrace(query_id=query_id, strategy="mad", run_id=run_id or query_id, n=2, layers=rounds, k=0)
    state = DebateState()
    for r in range(1, rounds + 1):
        state.round = r
        for side, endpoint in zip(("affirmative", "negative"), debaters):
            messages = prompts.render_debate_prompt(side, query, state.transcript)
            event, resp, err = await engine.call("debater", r, 0 if side == "affirmative" else 1, endpoint, messages, config.temperature)
            trace.events.append(event)
            if err is not None:
                raise _fail(RunFailed(f"{side} debater failed: {err}"), trace)
            assert resp is not None
            state.add(side, resp.content)
        trace.stop_layer = r
    messages = prompts.render_debate_prompt("judge", query, state.transcript)
    event, resp, err = await engine.call("judge_moderator", rounds, None, config.aggregator, messages)
    trace.events.append(event)
    if err is not None or resp is None or not resp.content:
        raise _fail(RunFailed(f"debate judge failed: {err or 'empty reply'}"), trace)
    state.add("judge", resp.content)
    trace.final_answer = resp.content
    trace.extra["transcript"] = [{"speaker": s, "text": t} for s, t in state.transcript]
    return trace
