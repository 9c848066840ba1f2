"""``smoa`` command line: run, sweep, report, roles.

Exit codes: 0 success, 1 some records failed (recorded in traces), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from sparsemoa import harness
from sparsemoa.config import LoadedConfig, load_config
from sparsemoa.errors import ConfigError, GatewayError, RoleCountMismatch, SchemaError
from sparsemoa.harness import RunSummary, summaries_to_csv
from sparsemoa.ledger import CostLedger, compare_runs

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_range(spec: str) -> tuple[str, list[int]]:
    """``k=1..4`` or ``n=2,4,6``."""
    name, sep, rhs = spec.partition("=")
    if not sep:
        raise UsageError(f"bad --param {spec!r}; expected e.g. k=1..4")
    try:
        if ".." in rhs:
            lo, hi = rhs.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in rhs.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --param values {rhs!r}") from None
    if not values:
        raise UsageError("--param has no values")
    return name.strip(), values


def _load(args: argparse.Namespace) -> LoadedConfig:
    overrides = list(args.set or [])
    if getattr(args, "strategy", None):
        overrides.append(f"strategy={args.strategy}")
    return load_config(args.config, overrides)


def _dataset(args: argparse.Namespace):
    if not Path(args.dataset).is_file():
        raise UsageError(f"dataset not found: {args.dataset}")
    records = harness.load_jsonl(args.dataset, lenient=args.lenient)
    if not records:
        raise UsageError(f"dataset {args.dataset} has no records")
    return records


def _dataset_name(cfg: LoadedConfig, path: str) -> str:
    return cfg.model.dataset_name or Path(path).stem


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    records = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = CostLedger(cfg.price_table())
    concurrency = args.concurrency or cfg.model.concurrency
    result = asyncio.run(harness.run_benchmark(
        cfg.engine(), records, cfg.pipeline(), concurrency, out / "traces.jsonl", ledger,
        _dataset_name(cfg, args.dataset), cfg.grader(),
    ))
    harness.write_summaries(out, [result.summary])
    (out / "ledger.csv").write_text(ledger.export_csv(), encoding="utf-8")
    s = result.summary
    print(f"{s.label}: {s.completed}/{s.records} completed, prompt_tokens={s.prompt_tokens} "
          f"completion_tokens={s.completion_tokens} score={s.score}")
    return EXIT_PARTIAL if s.failed else EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    records = _dataset(args)
    param, values = _parse_range(args.param)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ledger = CostLedger(cfg.price_table())
    concurrency = args.concurrency or cfg.model.concurrency
    results = asyncio.run(harness.run_sweep(
        cfg.engine(), records, cfg.pipeline(), param, values, concurrency, out, ledger,
        _dataset_name(cfg, args.dataset), cfg.grader(),
    ))
    summaries = [r.summary for r in results]
    harness.write_summaries(out, summaries, stem="sweep")
    (out / "ledger.csv").write_text(ledger.export_csv(), encoding="utf-8")
    sys.stdout.write(summaries_to_csv(summaries))
    return EXIT_PARTIAL if any(s.failed for s in summaries) else EXIT_OK


def _collect_summaries(root: Path) -> list[RunSummary]:
    found = []
    for path in sorted(root.rglob("*.json")):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        items = data if isinstance(data, list) else [data]
        for item in items:
            if isinstance(item, dict) and {"dataset", "strategy", "prompt_tokens"} <= item.keys():
                found.append(RunSummary.from_dict(item))
    return found


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.traces)
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    summaries = _collect_summaries(root)
    if not summaries:
        raise UsageError(f"no summaries found under {root}")
    rows = []
    for s in summaries:
        base = next((b for b in summaries if b.dataset == s.dataset and b.strategy == "moa"), None)
        cmp = compare_runs(base, s) if base is not None else None
        row = s.to_dict()
        row["prompt_ratio_vs_moa"] = cmp.prompt_ratio if cmp else None
        row["cost_ratio_vs_moa"] = cmp.cost_ratio if cmp else None
        rows.append(row)
    if args.format == "json":
        print(json.dumps(rows, indent=2, ensure_ascii=False))
    else:
        cols = harness.SUMMARY_CSV_COLUMNS + ["label", "failed", "prompt_ratio_vs_moa", "cost_ratio_vs_moa"]
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow(["" if r[c] is None else r[c] for c in cols])
    return EXIT_OK


def cmd_roles(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    pipeline = cfg.pipeline()
    changes = {"dataset_description": args.task_desc, "task_requirement": args.task_req or ""}
    if args.n is not None:
        pool = pipeline.proposers
        changes["proposers"] = tuple(pool[j % len(pool)] for j in range(args.n))
        changes["k"] = min(pipeline.k, args.n)
    pipeline = pipeline.replace(**changes)
    try:
        roles = asyncio.run(cfg.engine().generate_roles(pipeline))
    except (RoleCountMismatch, GatewayError) as exc:
        print(f"error: role generation failed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    for r in roles:
        print(f"[Generated Role Description {r.index + 1}]\n{r.description}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoa", description="Sparse mixture-of-agents runner and benchmark harness.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, dataset: bool = True) -> None:
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        if dataset:
            p.add_argument("--dataset", required=True)
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--concurrency", type=int, default=None)
            p.add_argument("--lenient", action="store_true", help="skip dataset lines that fail the schema")

    p = sub.add_parser("run", help="run one strategy over a dataset")
    common(p)
    p.add_argument("--strategy", choices=["moa", "smoa", "sc", "mad"])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one summary per value of k, n or l")
    common(p)
    p.add_argument("--strategy", choices=["moa", "smoa", "sc", "mad"])
    p.add_argument("--param", required=True, help="e.g. k=1..4 or n=2..7")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare summaries found under a directory")
    p.add_argument("--traces", required=True, help="directory holding run/sweep outputs")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("roles", help="generate and print role profiles")
    common(p, dataset=False)
    p.add_argument("--task-desc", required=True)
    p.add_argument("--task-req", default="")
    p.add_argument("-n", type=int, default=None)
    p.set_defaults(func=cmd_roles)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
