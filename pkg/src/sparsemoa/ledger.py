"""Token and cost accounting.

Costs are summed in integer fixed point so totals do not depend on the order
records arrive in. Prices are stored as integers in units of 1e-8 currency per
1K tokens; a record's cost is then ``tokens * price`` in units of 1e-11
currency, which is exact. Totals are rendered to integer milli-cents
(1e-5 currency) once, at the end.
"""

from __future__ import annotations

import csv
import io
import math
import threading
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from sparsemoa.errors import ConfigError, DuplicateEvent, UnknownEndpoint

PRICE_SCALE = 10**8  # price units per currency unit, per 1K tokens
_UNITS_PER_MILLICENT = 10**6  # 1e-11 currency units in one milli-cent


def estimate_tokens(text: str) -> int:
    """Offline token estimate: characters / 4, rounded up."""
    return math.ceil(len(text) / 4)


def _to_price_units(value: Any) -> int:
    d = Decimal(str(value))
    if d < 0:
        raise ConfigError(f"negative price: {value}")
    scaled = d * PRICE_SCALE
    if scaled != scaled.to_integral_value():
        raise ConfigError(f"price {value} has more than 8 decimal places")
    return int(scaled)


@dataclass(frozen=True)
class UsageRecord:
    run_id: str
    event_index: int
    call_role: str
    endpoint_id: str
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")


@dataclass(frozen=True)
class Totals:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_millicents: int | None = 0

    @property
    def cost(self) -> float | None:
        if self.cost_millicents is None:
            return None
        return self.cost_millicents / 100_000


class PriceTable:
    """Per-endpoint prices per 1K prompt and completion tokens."""

    def __init__(self, prices: Mapping[str, tuple[Any, Any]] | None = None, currency: str = "USD") -> None:
        self.currency = currency
        self._units: dict[str, tuple[int, int]] = {}
        for endpoint_id, (p_in, p_out) in (prices or {}).items():
            self._units[endpoint_id] = (_to_price_units(p_in), _to_price_units(p_out))

    def __contains__(self, endpoint_id: str) -> bool:
        return endpoint_id in self._units

    def units(self, endpoint_id: str) -> tuple[int, int]:
        try:
            return self._units[endpoint_id]
        except KeyError:
            raise UnknownEndpoint(f"no price entry for endpoint {endpoint_id!r}") from None

    def cost_units(self, rec: UsageRecord) -> int:
        p_in, p_out = self.units(rec.endpoint_id)
        return rec.prompt_tokens * p_in + rec.completion_tokens * p_out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "PriceTable":
        prices = {}
        for endpoint_id, entry in (data.get("prices") or {}).items():
            if not isinstance(entry, Mapping) or "prompt" not in entry or "completion" not in entry:
                raise ConfigError(f"price entry for {endpoint_id!r} needs 'prompt' and 'completion'")
            prices[endpoint_id] = (entry["prompt"], entry["completion"])
        return cls(prices, currency=str(data.get("currency", "USD")))

    @classmethod
    def load(cls, path: str | Path) -> "PriceTable":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: price table must be a mapping")
        return cls.from_mapping(data)


def render_millicents(units: int) -> int:
    q = Decimal(units) / Decimal(_UNITS_PER_MILLICENT)
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


class CostLedger:
    """Append-only usage ledger, safe for concurrent appends from threads or tasks."""

    def __init__(self, prices: PriceTable | None = None) -> None:
        self.prices = prices
        self._lock = threading.Lock()
        self._records: dict[tuple[str, int], UsageRecord] = {}

    def record(self, usage: UsageRecord) -> None:
        key = (usage.run_id, usage.event_index)
        with self._lock:
            if key in self._records:
                raise DuplicateEvent(f"event {usage.event_index} of run {usage.run_id!r} already recorded")
            self._records[key] = usage

    def record_trace(self, trace: Any) -> None:
        """Record every event of a RunTrace under ``trace.run_id``."""
        for i, ev in enumerate(trace.events):
            self.record(
                UsageRecord(trace.run_id, i, ev.call_role, ev.endpoint_id, ev.prompt_tokens, ev.completion_tokens)
            )

    def snapshot(self) -> list[UsageRecord]:
        with self._lock:
            return list(self._records.values())

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def totals(self, run_ids: Iterable[str] | None = None) -> Totals:
        wanted = None if run_ids is None else set(run_ids)
        records = [r for r in self.snapshot() if wanted is None or r.run_id in wanted]
        prompt = sum(r.prompt_tokens for r in records)
        completion = sum(r.completion_tokens for r in records)
        if self.prices is None:
            return Totals(prompt, completion, None)
        units = sum(self.prices.cost_units(r) for r in records)
        return Totals(prompt, completion, render_millicents(units))

    def export_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["run_id", "event_index", "call_role", "endpoint_id", "prompt_tokens", "completion_tokens"])
        for r in sorted(self.snapshot(), key=lambda r: (r.run_id, r.event_index)):
            writer.writerow([r.run_id, r.event_index, r.call_role, r.endpoint_id, r.prompt_tokens, r.completion_tokens])
        return buf.getvalue()


@dataclass(frozen=True)
class RunComparison:
    prompt_ratio: float | None
    completion_ratio: float | None
    cost_ratio: float | None
    prompt_delta: int
    completion_delta: int
    cost_delta: float | None


def _ratio(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    if a == 0:
        return 1.0 if b == 0 else None
    return b / a


def compare_runs(a: Any, b: Any) -> RunComparison:
    """Compare summary ``b`` against baseline ``a``; ratios are b / a, deltas b - a."""
    if getattr(a, "dataset", None) != getattr(b, "dataset", None):
        raise ValueError(f"summaries are for different datasets: {a.dataset!r} vs {b.dataset!r}")
    cost_delta = None if a.cost is None or b.cost is None else b.cost - a.cost
    return RunComparison(
        prompt_ratio=_ratio(a.prompt_tokens, b.prompt_tokens),
        completion_ratio=_ratio(a.completion_tokens, b.completion_tokens),
        cost_ratio=_ratio(a.cost, b.cost),
        prompt_delta=b.prompt_tokens - a.prompt_tokens,
        completion_delta=b.completion_tokens - a.completion_tokens,
        cost_delta=cost_delta,
    )
