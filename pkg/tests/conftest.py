from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from sparsemoa import Engine, Gateway, MockPolicy, MockScript, ModelEndpoint, PipelineConfig
from sparsemoa.gateway import ChatRequest

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden"

NN_QUERY = (
    'Calculate the probability of getting the sequence "nn" when two letters are chosen without '
    "replacement from the set {n: 4, y: 1, s: 2, r: 4}."
)
# four proposer outputs for the "nn" probability question; only the answer parts matter
NN_CANDIDATES = [
    "...#ANSWER#: (4/11) * (3/10)",
    "...#ANSWER#:(4/11) * (3/10) = 12/110 = 6/55",
    "...#ANSWER#: the probability is 1/15.",
    "...#ANSWER#: 16/21",
]
NN_VERDICT = '{"reasoning": "Responses 0 and 1 compute 4/11 * 3/10.", "chosen responses": [0, 1], "end debate": true}'

_TAG = re.compile(r"\[L(\d+)\]")
_SELECT = re.compile(r"select (\d+) responses")
_ROLES = re.compile(r"assign (\d+) different roles")


def layer_of(text: str) -> int:
    return max((int(x) for x in _TAG.findall(text)), default=0)


def proposer_fn(chars: int = 0, answer: str = "6/55"):
    """Proposer reply tagged with its layer: one more than the highest tag among its references."""

    def fn(req: ChatRequest) -> str:
        refs = "".join(m.content for m in req.messages if m.role == "system")
        head = f"[L{layer_of(refs) + 1}] {req.endpoint_id}"
        tail = f" #ANSWER#: {answer}"
        filler = "x" * max(0, chars - len(head) - len(tail) - 1)
        return f"{head} {filler}{tail}" if filler else head + tail

    return fn


def judge_fn(stop_at: int | None = None, chosen: list[int] | None = None):
    """Verdict choosing the first k (or ``chosen``); ends the debate from layer ``stop_at`` on."""

    def fn(req: ChatRequest) -> str:
        m = _SELECT.search(req.messages[0].content)
        k = int(m.group(1)) if m else 1
        layer = layer_of(req.messages[-1].content)
        picks = chosen if chosen is not None else list(range(k))
        end = stop_at is not None and layer >= stop_at
        return "```json\n" + json.dumps({"reasoning": f"layer {layer}", "chosen responses": picks, "end debate": end}) + "\n```"

    return fn


def roles_text(n: int) -> str:
    return "\n\n".join(f"[Generated Role Description {i + 1}]\nYou are persona number {i + 1}." for i in range(n))


def aggregator_fn(final: str = "Final synthesis. #ANSWER#: 6/55"):
    def fn(req: ChatRequest) -> str:
        text = req.messages[-1].content
        m = _ROLES.search(text)
        if m:
            return roles_text(int(m.group(1)))
        return final

    return fn


def build(
    n: int = 4,
    layers: int = 2,
    k: int = 2,
    stop_at: int | None = None,
    chars: int = 0,
    strategy: str = "smoa",
    roles: bool = False,
    extra_policies: dict | None = None,
    **config_kw,
) -> tuple[Engine, PipelineConfig]:
    """Engine over a fully mocked pipeline plus a matching config."""
    ids = [f"p{j}" for j in range(n)]
    endpoints = [ModelEndpoint(i, "mock://", "mock-model") for i in ids]
    endpoints += [ModelEndpoint("agg", "mock://", "mock-model"), ModelEndpoint("judge", "mock://", "mock-model")]
    policies = {i: MockPolicy.function(proposer_fn(chars)) for i in ids}
    policies["agg"] = MockPolicy.function(aggregator_fn())
    policies["judge"] = MockPolicy.function(judge_fn(stop_at))
    policies.update(extra_policies or {})
    gw = Gateway(endpoints, MockScript(endpoint_policies=policies))
    cfg = PipelineConfig(
        proposers=tuple(ids), aggregator="agg", judge_moderator="judge", strategy=strategy,
        layers=layers, k=k, roles_enabled=roles, **config_kw,
    )
    return Engine(gw), cfg


def golden_serialize(messages) -> str:
    return "".join(f"=== {m.role} ===\n{m.content}\n" for m in messages)


# stub HTTP server


class StubServer:
    """Replays a list of (status, body) replies, one per POST; repeats the last when exhausted."""

    def __init__(self, replies: list[tuple[int, dict | str]]) -> None:
        self.replies = list(replies)
        self.hits: list[dict] = []
        self.hit_times: list[float] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                import time

                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                stub.hits.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                stub.hit_times.append(time.monotonic())
                idx = min(len(stub.hits) - 1, len(stub.replies) - 1)
                status, payload = stub.replies[idx]
                data = payload if isinstance(payload, str) else json.dumps(payload)
                raw = data.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.01}, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


def completion(content: str = "hello", prompt_tokens: int = 11, completion_tokens: int = 3) -> dict:
    return {
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


@pytest.fixture
def stub_server():
    servers = []

    def make(replies):
        s = StubServer(replies).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__(None, None, None)


# acceptance report

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
