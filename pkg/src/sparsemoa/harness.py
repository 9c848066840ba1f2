"""Benchmark driver: dataset loading, batched pipeline runs, scoring and summaries."""

from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from sparsemoa import prompts
from sparsemoa.engine import Engine, PipelineConfig, RunTrace
from sparsemoa.errors import ConfigError, GatewayError, SchemaError
from sparsemoa.gateway import Gateway
from sparsemoa.ledger import CostLedger, Totals

log = logging.getLogger(__name__)

SUMMARY_CSV_COLUMNS = ["dataset", "strategy", "n", "l", "k", "score", "prompt_tokens", "completion_tokens", "cost"]
DEFAULT_ASPECTS = ("helpful", "clarity", "factuality", "depth", "engagement", "safety")


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    prompt: str
    reference: str | None = None
    meta: Mapping[str, str] = field(default_factory=dict)


def _record_from_obj(obj: Any, line: int) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise SchemaError(line, "not a JSON object")
    rid, prompt = obj.get("id"), obj.get("prompt")
    if not isinstance(rid, str) or not rid:
        raise SchemaError(line, "'id' must be a non-empty string")
    if not isinstance(prompt, str) or not prompt:
        raise SchemaError(line, "'prompt' must be a non-empty string")
    reference = obj.get("reference")
    if reference is not None and not isinstance(reference, str):
        raise SchemaError(line, "'reference' must be a string or null")
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise SchemaError(line, "'meta' must map strings to strings")
    return DatasetRecord(rid, prompt, reference, dict(meta))


def load_jsonl(path: str | Path, lenient: bool = False, problems: list[SchemaError] | None = None) -> list[DatasetRecord]:
    """Load normalized dataset records, one JSON object per line.

    Strict mode raises the first SchemaError. Lenient mode skips bad lines,
    logs them, and appends them to ``problems`` when given. Blank lines are
    ignored. Line numbers are 1-based.
    """
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                try:
                    obj = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise SchemaError(lineno, f"invalid JSON: {exc.msg}") from None
                rec = _record_from_obj(obj, lineno)
                if rec.id in seen:
                    raise SchemaError(lineno, f"duplicate id {rec.id!r}")
            except SchemaError as exc:
                if not lenient:
                    raise
                log.warning("%s: skipping %s", path, exc)
                if problems is not None:
                    problems.append(exc)
                continue
            seen.add(rec.id)
            records.append(rec)
    return records


# scoring


@dataclass(frozen=True)
class MatchResult:
    score: int
    marker_found: bool


def score_exact_match(trace: RunTrace, record: DatasetRecord) -> MatchResult:
    if record.reference is None:
        raise ValueError(f"record {record.id!r} has no reference")
    answer = prompts.extract_answer(trace.final_answer)
    if answer is None:
        return MatchResult(0, False)
    return MatchResult(int(prompts.normalize_answer(answer) == prompts.normalize_answer(record.reference)), True)


@dataclass(frozen=True)
class GraderSpec:
    grader_endpoint: str
    aspects: tuple[str, ...] = DEFAULT_ASPECTS
    rubric_template: prompts.PromptTemplate = prompts.GRADER_RUBRIC

    def __post_init__(self) -> None:
        object.__setattr__(self, "aspects", tuple(self.aspects))
        if not self.aspects:
            raise ConfigError("grader needs at least one aspect")


@dataclass
class GradeResult:
    scores: dict[str, float | None]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    error: str | None = None

    @property
    def graded(self) -> bool:
        return any(v is not None for v in self.scores.values())


def parse_grades(raw: str, aspects: Sequence[str]) -> dict[str, float | None]:
    """Pull numeric aspect scores out of a grader reply; missing or non-numeric stay None."""
    obj = prompts.recover_json_object(raw, ())
    # prefer an object that mentions at least one aspect
    for required in ([a] for a in aspects):
        hit = prompts.recover_json_object(raw, required)
        if hit is not None:
            obj = hit
            break
    scores: dict[str, float | None] = {}
    for a in aspects:
        v = obj.get(a) if isinstance(obj, dict) else None
        scores[a] = float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else None
    return scores


async def grade_with_llm(gateway: Gateway, query: str, trace: RunTrace, grader: GraderSpec) -> GradeResult:
    """One grader call per trace; never fabricates a score. Does not touch ``trace``."""
    missing = {a: None for a in grader.aspects}
    if not trace.final_answer:
        return GradeResult(missing, error="no final answer")
    messages = prompts.render_grader_prompt(query, trace.final_answer, grader.aspects, grader.rubric_template)
    try:
        resp = await gateway.complete_chat(gateway.request(grader.grader_endpoint, messages, temperature=0.0))
    except (GatewayError, ConfigError) as exc:
        return GradeResult(missing, error=f"{type(exc).__name__}: {exc}")
    scores = parse_grades(resp.content, grader.aspects)
    err = None if any(v is not None for v in scores.values()) else "GradeParseError: no aspect scores found"
    return GradeResult(scores, resp.prompt_tokens, resp.completion_tokens, err)


# summaries


@dataclass
class RunSummary:
    dataset: str
    strategy: str
    n: int
    l: int
    k: int
    label: str = ""
    records: int = 0
    completed: int = 0
    failed: int = 0
    scored: int = 0
    score: float | None = None
    missing_marker: int = 0
    aspects: dict[str, float | None] = field(default_factory=dict)
    ungraded: bool = True
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost: float | None = None
    cost_millicents: int | None = None
    grader_prompt_tokens: int = 0
    grader_completion_tokens: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunSummary":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def csv_row(self) -> list[Any]:
        return [self.dataset, self.strategy, self.n, self.l, self.k,
                "" if self.score is None else self.score,
                self.prompt_tokens, self.completion_tokens,
                "" if self.cost is None else self.cost]


def summaries_to_csv(summaries: Iterable[RunSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_CSV_COLUMNS)
    for s in summaries:
        writer.writerow(s.csv_row())
    return buf.getvalue()


def write_summaries(out_dir: str | Path, summaries: Sequence[RunSummary], stem: str = "summary") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = [s.to_dict() for s in summaries]
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (out / f"{stem}.csv").write_text(summaries_to_csv(summaries), encoding="utf-8")


def fold_traces(traces: Iterable[RunTrace]) -> Totals:
    """Independent token fold over trace events (the conservation oracle)."""
    prompt = completion = 0
    for t in traces:
        for e in t.events:
            prompt += e.prompt_tokens
            completion += e.completion_tokens
    return Totals(prompt, completion, None)


# trace file


class TraceWriter:
    """Append-only JSONL trace sink; every line is flushed and fsynced as it is written."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, trace: RunTrace) -> None:
        self._fh.write(trace.to_json() + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


def rewrite_ordered(path: str | Path, traces: Sequence[RunTrace]) -> None:
    """Atomically replace ``path`` with ``traces`` in the given order."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_traces(path: str | Path) -> list[RunTrace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(RunTrace.from_dict(json.loads(line)))
    return out


# benchmark


@dataclass
class BenchmarkResult:
    traces: list[RunTrace]
    summary: RunSummary
    grades: dict[str, GradeResult] = field(default_factory=dict)

    @property
    def failures(self) -> list[RunTrace]:
        return [t for t in self.traces if not t.ok]


def default_label(dataset: str, config: PipelineConfig) -> str:
    return f"{dataset}:{config.strategy}:n{config.n}:l{config.layers}:k{config.k}"


async def run_benchmark(
    engine: Engine,
    records: Sequence[DatasetRecord],
    config: PipelineConfig,
    concurrency: int = 4,
    traces_path: str | Path | None = None,
    ledger: CostLedger | None = None,
    dataset: str = "dataset",
    grader: GraderSpec | None = None,
    label: str | None = None,
) -> BenchmarkResult:
    """Run ``config`` over every record with at most ``concurrency`` records in flight.

    Traces are appended to ``traces_path`` as runs finish, then the file is
    rewritten in dataset order once the batch completes. A failing record
    is kept (with its partial trace) and excluded from scoring.
    """
    if not records:
        raise ValueError("dataset is empty")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    label = label or default_label(dataset, config)
    started = time.monotonic()
    gate = asyncio.Semaphore(concurrency)
    queue: asyncio.Queue[RunTrace | None] = asyncio.Queue()
    grades: dict[str, GradeResult] = {}

    async def consume() -> None:
        writer = TraceWriter(traces_path) if traces_path is not None else None
        try:
            while (item := await queue.get()) is not None:
                if writer is not None:
                    writer.write(item)
        finally:
            if writer is not None:
                writer.close()

    async def one(rec: DatasetRecord) -> RunTrace:
        async with gate:
            run_id = f"{label}/{rec.id}"
            try:
                trace = await engine.run(rec.prompt, config, rec.id, run_id)
            except Exception as exc:  # a record never takes the batch down
                trace = getattr(exc, "trace", None)
                if trace is None:
                    trace = RunTrace(query_id=rec.id, strategy=config.strategy, run_id=run_id,
                                     n=config.n, layers=config.layers, k=config.k)
                if trace.error is None:
                    trace.error = f"{type(exc).__name__}: {exc}"
                log.warning("record %s failed: %s", rec.id, trace.error)
            if grader is not None and trace.ok:
                grades[rec.id] = await grade_with_llm(engine.gateway, rec.prompt, trace, grader)
            await queue.put(trace)
            return trace

    consumer = asyncio.create_task(consume())
    try:
        traces = list(await asyncio.gather(*(one(r) for r in records)))
    finally:
        await queue.put(None)
        await consumer
    if traces_path is not None:
        rewrite_ordered(traces_path, traces)
    if ledger is not None:
        for t in traces:
            ledger.record_trace(t)

    summary = summarize(traces, records, config, dataset, label, grades, ledger)
    summary.wall_time_s = round(time.monotonic() - started, 3)
    return BenchmarkResult(traces, summary, grades)


def summarize(
    traces: Sequence[RunTrace], records: Sequence[DatasetRecord], config: PipelineConfig, dataset: str,
    label: str, grades: Mapping[str, GradeResult] | None = None, ledger: CostLedger | None = None,
) -> RunSummary:
    by_id = {r.id: r for r in records}
    totals = fold_traces(traces)
    s = RunSummary(dataset=dataset, strategy=config.strategy, n=config.n, l=config.layers, k=config.k, label=label,
                   records=len(records), prompt_tokens=totals.prompt_tokens, completion_tokens=totals.completion_tokens)
    hits = 0
    for t in traces:
        if not t.ok:
            s.failed += 1
            continue
        s.completed += 1
        rec = by_id.get(t.query_id)
        if rec is not None and rec.reference is not None:
            m = score_exact_match(t, rec)
            s.scored += 1
            hits += m.score
            s.missing_marker += not m.marker_found
    s.score = hits / s.scored if s.scored else None

    graded = [g for g in (grades or {}).values()]
    s.grader_prompt_tokens = sum(g.prompt_tokens for g in graded)
    s.grader_completion_tokens = sum(g.completion_tokens for g in graded)
    if any(g.graded for g in graded):
        s.ungraded = False
        names = graded[0].scores.keys()
        for a in names:
            vals = [g.scores[a] for g in graded if g.scores.get(a) is not None]
            s.aspects[a] = sum(vals) / len(vals) if vals else None

    if ledger is not None and ledger.prices is not None:
        cost = ledger.totals([t.run_id for t in traces])
        s.cost, s.cost_millicents = cost.cost, cost.cost_millicents
    return s


def sweep_configs(config: PipelineConfig, param: str, values: Iterable[int]) -> list[PipelineConfig]:
    """Configs for a k-, n- or l-sweep. An n-sweep cycles through the configured proposers."""
    out = []
    for v in values:
        if param == "k":
            out.append(config.replace(k=v))
        elif param == "n":
            pool = config.proposers
            proposers = tuple(pool[j % len(pool)] for j in range(v))
            out.append(config.replace(proposers=proposers, k=min(config.k, v)))
        elif param == "l":
            out.append(config.replace(layers=v))
        else:
            raise ConfigError(f"cannot sweep {param!r}; use k, n or l")
    return out


async def run_sweep(
    engine: Engine,
    records: Sequence[DatasetRecord],
    config: PipelineConfig,
    param: str,
    values: Sequence[int],
    concurrency: int = 4,
    out_dir: str | Path | None = None,
    ledger: CostLedger | None = None,
    dataset: str = "dataset",
    grader: GraderSpec | None = None,
) -> list[BenchmarkResult]:
    results = []
    for v, cfg in zip(values, sweep_configs(config, param, values)):
        path = Path(out_dir) / f"traces_{param}{v}.jsonl" if out_dir is not None else None
        label = f"{default_label(dataset, cfg)}:{param}={v}"
        results.append(await run_benchmark(engine, records, cfg, concurrency, path, ledger, dataset, grader, label))
    return results
