"""Sparse mixture-of-agents orchestration and benchmark harness."""

from sparsemoa.engine import Engine, PipelineConfig, RunTrace, TraceEvent
from sparsemoa.gateway import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    MockPolicy,
    MockScript,
    ModelEndpoint,
    RetryPolicy,
)
from sparsemoa.ledger import CostLedger, PriceTable, UsageRecord

__all__ = [
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "CostLedger",
    "Engine",
    "Gateway",
    "MockPolicy",
    "MockScript",
    "ModelEndpoint",
    "PipelineConfig",
    "PriceTable",
    "RetryPolicy",
    "RunTrace",
    "TraceEvent",
    "UsageRecord",
]

__version__ = "0.1.0"
