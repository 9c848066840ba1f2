import asyncio
import copy
import json
import subprocess
import sys
import textwrap
from pathlib import Path

import pytest

from sparsemoa import CostLedger, MockPolicy, PriceTable
from sparsemoa.engine import RunTrace
from sparsemoa.errors import ConfigError, SchemaError
from sparsemoa.harness import (
    DatasetRecord,
    GraderSpec,
    fold_traces,
    grade_with_llm,
    load_jsonl,
    parse_grades,
    read_traces,
    run_benchmark,
    run_sweep,
    score_exact_match,
    summaries_to_csv,
    sweep_configs,
)

from conftest import build

ROOT = Path(__file__).resolve().parents[1]


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def records(count, reference="6/55"):
    return [DatasetRecord(f"q{i}", f"question {i}", reference) for i in range(count)]


def bench(engine, recs, cfg, **kw):
    return asyncio.run(run_benchmark(engine, recs, cfg, **kw))


# dataset loading


def test_load_empty(tmp_path):
    assert load_jsonl(write_lines(tmp_path / "d.jsonl", [])) == []


def test_load_three(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        json.dumps({"id": "a", "prompt": "p"}),
        "",
        json.dumps({"id": "b", "prompt": "p", "reference": "r", "meta": {"src": "x"}}),
        json.dumps({"id": "c", "prompt": "p", "reference": None}),
    ])
    recs = load_jsonl(path)
    assert [r.id for r in recs] == ["a", "b", "c"]
    assert recs[1].reference == "r" and recs[1].meta == {"src": "x"}


def test_strict_reports_line(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [json.dumps({"id": "a", "prompt": "p"}), '{"id": 3}', "{}"])
    with pytest.raises(SchemaError) as info:
        load_jsonl(path)
    assert info.value.line == 2


def test_lenient_skips(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [
        json.dumps({"id": "a", "prompt": "p"}), "not json", json.dumps({"id": "a", "prompt": "dup"}),
        json.dumps({"id": "b", "prompt": "p"}),
    ])
    problems = []
    recs = load_jsonl(path, lenient=True, problems=problems)
    assert [r.id for r in recs] == ["a", "b"]
    assert [p.line for p in problems] == [2, 3]


# scoring


@pytest.mark.parametrize("text,score,found", [
    ("work ... #ANSWER#: 6/55", 1, True),
    ("work ... #ANSWER#:   6/55  ", 1, True),
    ("no marker, 6/55", 0, False),
    ("#ANSWER#: (4/11) * (3/10)", 0, True),
])
def test_exact_match(text, score, found):
    m = score_exact_match(RunTrace("q", "smoa", final_answer=text), DatasetRecord("q", "p", "6/55"))
    assert (m.score, m.marker_found) == (score, found)


def test_scoring_does_not_mutate_traces():
    engine, cfg = build(n=2, layers=2, k=1)
    result = bench(engine, records(3), cfg)
    before = copy.deepcopy([t.to_dict() for t in result.traces])
    for t, r in zip(result.traces, records(3)):
        score_exact_match(t, r)
    assert [t.to_dict() for t in result.traces] == before


# grading


def grader_engine(policy):
    return build(n=2, layers=1, k=1, extra_policies={"judge": policy})


def test_grader_json():
    engine, _ = grader_engine(MockPolicy.fixed('{"helpful": 5, "clarity": 4}'))
    g = asyncio.run(grade_with_llm(engine.gateway, "q", RunTrace("q", "smoa", final_answer="a"),
                                   GraderSpec("judge", ("helpful", "clarity", "depth"))))
    assert g.scores == {"helpful": 5.0, "clarity": 4.0, "depth": None} and g.graded


def test_grader_prose_with_embedded_json():
    raw = 'Overall fine. Scores: {"helpful": 3, "safety": 5} as requested.'
    assert parse_grades(raw, ("helpful", "safety")) == {"helpful": 3.0, "safety": 5.0}


def test_grader_unavailable_is_ungraded():
    engine, cfg = grader_engine(MockPolicy.error())
    result = bench(engine, records(2), cfg.replace(judge_moderator="p0"), grader=GraderSpec("judge"))
    assert result.summary.ungraded and result.summary.aspects == {}
    assert all(not g.graded for g in result.grades.values())


def test_grader_needs_aspects():
    with pytest.raises(ConfigError):
        GraderSpec("judge", ())


# batches


def test_five_records_thirty_events(tmp_path):
    engine, cfg = build(n=4, layers=2, k=2, stop_at=1)
    path = tmp_path / "t.jsonl"
    result = bench(engine, records(5), cfg, traces_path=path)
    # s=1: 4 proposers + 1 judge + 1 aggregator
    assert sum(len(t.events) for t in result.traces) == 30
    assert [t.query_id for t in read_traces(path)] == [f"q{i}" for i in range(5)]
    assert result.summary.score == 1.0 and result.summary.completed == 5


def test_k_sweep_prompt_tokens_nondecreasing():
    engine, cfg = build(n=4, layers=3, k=1, chars=400)
    results = asyncio.run(run_sweep(engine, records(3), cfg, "k", [1, 2, 3, 4]))
    tokens = [r.summary.prompt_tokens for r in results]
    assert tokens == sorted(tokens) and tokens[0] < tokens[-1]
    assert summaries_to_csv([r.summary for r in results]).splitlines()[0] == (
        "dataset,strategy,n,l,k,score,prompt_tokens,completion_tokens,cost"
    )


def test_sweep_n_cycles_pool():
    _, cfg = build(n=2, layers=1, k=2)
    cfgs = sweep_configs(cfg, "n", [1, 3])
    assert cfgs[0].proposers == ("p0",) and cfgs[0].k == 1
    assert cfgs[1].proposers == ("p0", "p1", "p0")
    with pytest.raises(ConfigError):
        sweep_configs(cfg, "temperature", [1])


def test_concurrency_does_not_change_results(tmp_path):
    outs = []
    for c in (1, 4):
        engine, cfg = build(n=3, layers=2, k=2, stop_at=2, roles=True)
        result = bench(engine, records(8), cfg, concurrency=c, traces_path=tmp_path / f"{c}.jsonl",
                       ledger=CostLedger(PriceTable({i: (1, 2) for i in cfg.endpoint_ids()})))
        s = result.summary.to_dict()
        s.pop("wall_time_s")
        outs.append((s, [t.query_id for t in read_traces(tmp_path / f"{c}.jsonl")]))
    assert outs[0] == outs[1]


def test_failed_record_is_kept(tmp_path):
    engine, cfg = build(n=2, layers=1, k=1, extra_policies={"agg": MockPolicy.error()})
    result = bench(engine, records(2), cfg, traces_path=tmp_path / "t.jsonl")
    assert result.summary.failed == 2 and result.summary.score is None
    traces = read_traces(tmp_path / "t.jsonl")
    assert all(t.error and t.events for t in traces)


def test_ledger_matches_fold(tmp_path):
    engine, cfg = build(n=3, layers=2, k=2)
    ledger = CostLedger()
    result = bench(engine, records(4), cfg, ledger=ledger)
    fold = fold_traces(result.traces)
    t = ledger.totals()
    assert (t.prompt_tokens, t.completion_tokens) == (fold.prompt_tokens, fold.completion_tokens)


CRASH_SCRIPT = textwrap.dedent("""
    import asyncio, os, sys
    sys.path.insert(0, {tests!r})
    from conftest import build, proposer_fn
    from sparsemoa import MockPolicy
    from sparsemoa.harness import DatasetRecord, run_benchmark

    calls = {{"n": 0}}
    inner = proposer_fn()

    def dying(req):
        calls["n"] += 1
        if calls["n"] > 6:
            os._exit(3)
        return inner(req)

    engine, cfg = build(n=2, layers=1, k=1, extra_policies={{"p0": MockPolicy.function(dying)}})
    recs = [DatasetRecord(f"q{{i}}", f"question {{i}}") for i in range(20)]
    asyncio.run(run_benchmark(engine, recs, cfg, concurrency=1, traces_path={path!r}))
""")


def test_crash_leaves_complete_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    script = CRASH_SCRIPT.format(tests=str(ROOT / "tests"), path=str(path))
    proc = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 3, proc.stderr
    lines = path.read_text(encoding="utf-8").splitlines()
    assert 1 <= len(lines) < 20
    for line in lines:
        assert json.loads(line)["trace_version"] == 1
