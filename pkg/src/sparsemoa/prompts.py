"""Prompt templates, placeholder substitution and parsing of structured model output.

The aggregator, role-generation and moderator/judge bodies reproduce the
published SMoA instructions. The selection-only / stop-only halves, the debate
prompts and the grader rubric are authored in this repository.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from sparsemoa.errors import (
    BadK,
    EmptyResponses,
    MissingPlaceholder,
    RoleCountMismatch,
    UnparseableVerdict,
)
from sparsemoa.gateway import ChatMessage

ANSWER_MARKER = "#ANSWER#"
REASONING_KEY = "reasoning"
CHOSEN_KEY = "chosen responses"
END_KEY = "end debate"

_PLACEHOLDER = re.compile(r"\[([A-Za-z][A-Za-z ]*)\]")


@dataclass(frozen=True)
class PromptTemplate:
    """Template with ``[Name]`` placeholders.

    ``brace_slot`` names one extra value that is filled with ``str.format``,
    for bodies that carry a ``{}`` slot and ``{{ }}`` escapes.
    """

    name: str
    body: str
    required_placeholders: frozenset[str]
    brace_slot: str | None = None

    def render(self, values: Mapping[str, Any]) -> str:
        missing = sorted(p for p in self.required_placeholders if p not in values)
        if missing:
            raise MissingPlaceholder(f"{self.name}: missing {', '.join(missing)}")

        def sub(m: re.Match[str]) -> str:
            key = m.group(1)
            if key in self.required_placeholders and key != self.brace_slot:
                return str(values[key])
            return m.group(0)

        # one pass, so substituted text is never rescanned
        out = _PLACEHOLDER.sub(sub, self.body)
        if self.brace_slot is not None:
            out = out.format(values[self.brace_slot])
        return out


AGGREGATOR = PromptTemplate(
    name="aggregator",
    body=(
        "You have been provided with a set of responses from various open-source models to the latest user query. "
        "Your task is to synthesize these responses into a single, high-quality response. "
        "It is crucial to critically evaluate the information provided in these responses, "
        "recognizing that some of it may be biased or incorrect. "
        "Your response should not simply replicate the given answers but should offer a refined, accurate, "
        "and comprehensive reply to the instruction. "
        "Ensure your response is well-structured, coherent, and adheres to the highest standards of accuracy "
        "and reliability.\n"
        "\n"
        "Responses from models:"
    ),
    required_placeholders=frozenset(),
)

ROLE_GENERATION = PromptTemplate(
    name="role_generation",
    body=(
        "Your task is to assign [Model Number] different roles and identities to a group of large language models "
        "for efficiently solving problems in a given task. Each role description should include information about "
        "occupation, personality, and social group. Separate each role description with "
        "[Generated Role Description]\n"
        "\n"
        "Here is an example to follow:\n"
        "\n"
        "Task: GSM8K (Grade School Math 8K) is a dataset of 8.5K high quality linguistically diverse grade school "
        "math word problems. The dataset was created to support the task of question answering on basic "
        "mathematical problems that require multi-step reasoning.\n"
        "\n"
        "Output:\n"
        "[Generated Role Description 1]\n"
        "You are a data analyst specializing in business intelligence, you are curious, detail-driven, and "
        "passionate about uncovering the stories behind numbers. You excel at interpreting trends, identifying "
        "patterns, and making predictions based on data. Regularly collaborating with business professionals, "
        "IT specialists, and data scientists, you thrive in extracting valuable insights from datasets to drive "
        "informed decisions.\n"
        "\n"
        "[Generated Role Description 2]\n"
        "You are a business consultant with extensive experience in sales and marketing strategies, you are "
        "strategic, goal-oriented, and focused on optimizing outcomes. Constantly seeking ways to improve "
        "efficiency and increase sales, you leverage data to inform their decisions. You regularly engage with "
        "entrepreneurs, marketers, and business executives, sharing insights and strategies for business growth.\n"
        "\n"
        "[Generated Role Description 3]\n"
        "You are a seasoned math professor with a Ph.D. in Applied Mathematics, you are logical, analytical, and "
        "detail-oriented, with a passion for breaking down problems and ensuring mathematically sound solutions. "
        "You are methodical, preferring to work with numbers and formulas. Often found in academic circles, they "
        "engage in deep mathematical discussions and mentor students within university settings.\n"
        "\n"
        "[Generated Role Description 4]\n"
        "You are a middle school math teacher with over a decade of experience, you are patient, nurturing, and "
        "passionate about making math accessible and enjoyable. you excel at simplifying complex problems using "
        "real-world examples to ensure understanding. Closely connected with educators, parents, and students, "
        "you frequently participate in community events and school functions to promote learning.\n"
        "\n"
        "Provide [Model Number] role description for solving questions in the following task formatted according "
        "to the output schema above:\n"
        "\n"
        "Task: [Task Description]\n"
        "\n"
        "Output:\n"
        "\n"
        "Responses from models:"
    ),
    required_placeholders=frozenset({"Model Number", "Task Description"}),
)

JUDGE_MODERATOR = PromptTemplate(
    name="judge_moderator",
    body=(
        "You are a moderator. You will be provided with a set of responses from various open-source models to the "
        "latest user query. Your task is to carefully and meticulously select [Response Number] responses from "
        "them, according to correctness, fluency, relevance, and quality. It is crucial to critically evaluate the "
        "information provided in these responses, recognizing that some of them may be biased or incorrect. "
        "Additionally, you need to decide whether to end the debate by measuring the consistency between responses "
        "and giving an indicator controlling ending the debate or not.\n"
        "\n"
        "The output should be a markdown code snippet formatted in the following schema:\n"
        "\n"
        "{{\n"
        '"reasoning": str // Logical reasoning behind the chosen response\n'
        '"chosen responses": list // the best [Response Number] response. For example [0, 1]\n'
        '"end debate": bool // whether end the debate\n'
        "}}\n"
        "\n"
        "Question: {}"
    ),
    required_placeholders=frozenset({"Response Number", "Question"}),
    brace_slot="Question",
)

# Split-mode halves of the combined prompt, for running judge and moderator as two calls.
JUDGE_ONLY = PromptTemplate(
    name="judge_only",
    body=(
        "You are a judge. You will be provided with a set of responses from various open-source models to the "
        "latest user query. Your task is to carefully and meticulously select [Response Number] responses from "
        "them, according to correctness, fluency, relevance, and quality. It is crucial to critically evaluate the "
        "information provided in these responses, recognizing that some of them may be biased or incorrect.\n"
        "\n"
        "The output should be a markdown code snippet formatted in the following schema:\n"
        "\n"
        "{{\n"
        '"reasoning": str // Logical reasoning behind the chosen response\n'
        '"chosen responses": list // the best [Response Number] response. For example [0, 1]\n'
        "}}\n"
        "\n"
        "Question: {}"
    ),
    required_placeholders=frozenset({"Response Number", "Question"}),
    brace_slot="Question",
)

MODERATOR_ONLY = PromptTemplate(
    name="moderator_only",
    body=(
        "You are a moderator. You will be provided with a set of responses from various open-source models to the "
        "latest user query. You need to decide whether to end the debate by measuring the consistency between "
        "responses and giving an indicator controlling ending the debate or not.\n"
        "\n"
        "The output should be a markdown code snippet formatted in the following schema:\n"
        "\n"
        "{{\n"
        '"reasoning": str // Logical reasoning behind the decision\n'
        '"end debate": bool // whether end the debate\n'
        "}}\n"
        "\n"
        "Question: {}"
    ),
    required_placeholders=frozenset({"Question"}),
    brace_slot="Question",
)

MAD_AFFIRMATIVE = (
    "You are the affirmative side of a debate about how to answer the question below. "
    "State the answer you believe is correct and the reasoning that supports it. "
    "If the transcript already contains arguments, answer the negative side's latest points. "
    "Finish with #ANSWER#: followed by your answer."
)
MAD_NEGATIVE = (
    "You are the negative side of a debate about how to answer the question below. "
    "Challenge the affirmative side's latest argument, point out any errors, and give the answer you believe "
    "is correct. Finish with #ANSWER#: followed by your answer."
)
MAD_JUDGE = (
    "You are the judge of a debate between an affirmative and a negative side. "
    "Read the full transcript, decide which answer is correct, and write the final response to the question. "
    "Finish with #ANSWER#: followed by the final answer."
)

GRADER_RUBRIC = PromptTemplate(
    name="grader_rubric",
    body=(
        "Rate the response below to the user query on each of these aspects, using a score from 1 to 5: "
        "[Aspects].\n"
        "\n"
        "Reply with a JSON object that maps every aspect name to its score, for example "
        '{"[First Aspect]": 4}.\n'
        "\n"
        "Query:\n[Query]\n"
        "\n"
        "Response:\n[Response]"
    ),
    required_placeholders=frozenset({"Aspects", "First Aspect", "Query", "Response"}),
)


# rendering


def _numbered(responses: Sequence[str], start: int) -> str:
    return "\n\n".join(f"{i}. {text}" for i, text in enumerate(responses, start=start))


def aggregate_system_text(responses: Sequence[str]) -> str:
    if not responses:
        raise EmptyResponses("aggregation needs at least one response")
    return AGGREGATOR.render({}) + "\n\n" + _numbered(responses, start=1)


def render_aggregate_prompt(responses: Sequence[str], original_query: str) -> list[ChatMessage]:
    """References go in the system message; the original query is the user turn."""
    return [
        ChatMessage("system", aggregate_system_text(responses)),
        ChatMessage("user", original_query),
    ]


def _responses_block(responses: Sequence[str]) -> str:
    # 0-based to line up with the verdict schema's example indices
    return "Responses from models:\n\n" + _numbered(responses, start=0)


def render_judge_moderator_prompt(
    responses: Sequence[str], original_query: str, k: int, template: PromptTemplate = JUDGE_MODERATOR
) -> list[ChatMessage]:
    if not responses:
        raise EmptyResponses("judge needs at least one response")
    if not 1 <= k <= len(responses):
        raise BadK(f"k={k} outside [1, {len(responses)}]")
    system = template.render({"Response Number": k, "Question": original_query})
    return [ChatMessage("system", system), ChatMessage("user", _responses_block(responses))]


def render_moderator_only_prompt(responses: Sequence[str], original_query: str) -> list[ChatMessage]:
    if not responses:
        raise EmptyResponses("moderator needs at least one response")
    system = MODERATOR_ONLY.render({"Question": original_query})
    return [ChatMessage("system", system), ChatMessage("user", _responses_block(responses))]


def render_role_generation_prompt(dataset_description: str, task_requirement: str, n: int) -> list[ChatMessage]:
    if n < 1:
        raise ValueError("n must be >= 1")
    task = " ".join(part for part in (dataset_description.strip(), task_requirement.strip()) if part)
    return [ChatMessage("user", ROLE_GENERATION.render({"Model Number": n, "Task Description": task}))]


def render_debate_prompt(side: str, query: str, transcript: Sequence[tuple[str, str]]) -> list[ChatMessage]:
    system = {"affirmative": MAD_AFFIRMATIVE, "negative": MAD_NEGATIVE, "judge": MAD_JUDGE}[side]
    user = f"Question: {query}"
    if transcript:
        user += "\n\nDebate transcript:\n\n" + render_transcript(transcript)
    return [ChatMessage("system", system), ChatMessage("user", user)]


def render_transcript(transcript: Sequence[tuple[str, str]]) -> str:
    blocks = []
    for turn, (speaker, text) in enumerate(transcript):
        blocks.append(f"[{speaker.capitalize()}, round {turn // 2 + 1}]\n{text}")
    return "\n\n".join(blocks)


def render_grader_prompt(query: str, response: str, aspects: Sequence[str], template: PromptTemplate = GRADER_RUBRIC) -> list[ChatMessage]:
    values = {"Aspects": ", ".join(aspects), "First Aspect": aspects[0], "Query": query, "Response": response}
    return [ChatMessage("user", template.render(values))]


# parsing


_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\r?\n?(.*?)```", re.DOTALL)


def recover_json_object(raw: str | bytes, required: Iterable[str]) -> dict[str, Any] | None:
    """Find the first JSON object carrying every ``required`` key.

    Fenced code blocks are tried before the surrounding text; inside each
    candidate every ``{`` is tried as an object start.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    keys = tuple(required)
    decoder = json.JSONDecoder()
    candidates = [m.group(1) for m in _FENCE.finditer(raw)] + [raw]
    for text in candidates:
        pos = text.find("{")
        while pos != -1:
            try:
                obj, _ = decoder.raw_decode(text, pos)
            except (ValueError, RecursionError):
                obj = None
            if isinstance(obj, dict) and all(k in obj for k in keys):
                return obj
            pos = text.find("{", pos + 1)
    return None


@dataclass(frozen=True)
class JudgeVerdict:
    reasoning: str
    chosen: tuple[int, ...]
    end_debate: bool
    normalized: bool = False
    fallback: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "reasoning": self.reasoning,
            "chosen": list(self.chosen),
            "end_debate": self.end_debate,
            "normalized": self.normalized,
            "fallback": self.fallback,
        }


def serialize_verdict(v: JudgeVerdict) -> str:
    """Render a verdict the way a compliant judge would reply."""
    body = json.dumps({REASONING_KEY: v.reasoning, CHOSEN_KEY: list(v.chosen), END_KEY: v.end_debate}, ensure_ascii=False)
    return f"```json\n{body}\n```"


def normalize_chosen(chosen: Iterable[int], n_candidates: int, k: int) -> tuple[tuple[int, ...], bool]:
    """Dedupe (first occurrence wins), drop out-of-range, truncate to k, pad with lowest unused."""
    chosen = list(chosen)
    seen: list[int] = []
    for idx in chosen:
        if 0 <= idx < n_candidates and idx not in seen:
            seen.append(idx)
    out = seen[:k]
    for idx in range(n_candidates):
        if len(out) >= k:
            break
        if idx not in out:
            out.append(idx)
    result = tuple(out)
    return result, result != tuple(chosen)


_INT_STR = re.compile(r"\s*-?\d+\s*")
_TRUE = {"true", "yes", "1"}
_FALSE = {"false", "no", "0"}


def _as_index(x: Any) -> int | None:
    if isinstance(x, bool):
        return None
    if isinstance(x, int):
        return x
    if isinstance(x, float) and x.is_integer():
        return int(x)
    if isinstance(x, str) and _INT_STR.fullmatch(x):
        return int(x)
    return None


def _as_bool(x: Any) -> bool | None:
    if isinstance(x, bool):
        return x
    if isinstance(x, int) and x in (0, 1):
        return bool(x)
    if isinstance(x, str):
        s = x.strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
    return None


def _coerce_chosen(value: Any) -> tuple[list[int], bool]:
    """Integer indices from the raw value, plus whether anything was dropped or wrapped."""
    if isinstance(value, list):
        items = value
    elif _as_index(value) is not None:
        items = [value]
    else:
        raise UnparseableVerdict(f"'{CHOSEN_KEY}' is not a list")
    picked = [i for i in map(_as_index, items) if i is not None]
    return picked, len(picked) != len(items) or items is not value


def parse_judge_verdict(
    raw: str | bytes,
    n_candidates: int,
    k: int,
    *,
    need_chosen: bool = True,
    need_end: bool = True,
) -> JudgeVerdict:
    """Parse and normalize a judge/moderator reply.

    With ``need_chosen`` or ``need_end`` switched off (the split-mode halves),
    the missing field defaults to the first k indices or ``False``.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if not 1 <= k <= n_candidates:
        raise BadK(f"k={k} outside [1, {n_candidates}]")
    required = [REASONING_KEY]
    if need_chosen:
        required.append(CHOSEN_KEY)
    if need_end:
        required.append(END_KEY)
    obj = recover_json_object(raw, required)
    if obj is None:
        raise UnparseableVerdict(f"no JSON object with keys {required}")

    reasoning = obj[REASONING_KEY]
    reasoning = "" if reasoning is None else reasoning if isinstance(reasoning, str) else json.dumps(reasoning)

    if need_chosen:
        picked, coerced = _coerce_chosen(obj[CHOSEN_KEY])
        chosen, changed = normalize_chosen(picked, n_candidates, k)
        changed = changed or coerced
    else:
        chosen, changed = tuple(range(k)), False

    end = False
    if need_end:
        parsed = _as_bool(obj[END_KEY])
        if parsed is None:
            raise UnparseableVerdict(f"'{END_KEY}' is not a boolean")
        end = parsed
    return JudgeVerdict(reasoning=reasoning, chosen=chosen, end_debate=end, normalized=changed)


def fallback_verdict(candidates: Sequence[str], k: int) -> JudgeVerdict:
    """First k non-empty candidates, padded with the lowest unused indices; never stops."""
    nonempty = [i for i, text in enumerate(candidates) if text]
    chosen, _ = normalize_chosen(nonempty, len(candidates), k)
    return JudgeVerdict(reasoning="", chosen=chosen, end_debate=False, fallback=True)


@dataclass(frozen=True)
class RoleProfile:
    index: int
    description: str

    def __post_init__(self) -> None:
        if not self.description:
            raise ValueError("role description must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "description": self.description}


_ROLE_MARKER = re.compile(r"\\?\[Generated Role Description(?:\s*\d+)?\\?\]")


def parse_roles(raw: str, n: int) -> list[RoleProfile]:
    """Split generated text on the role marker and keep the first n descriptions.

    Text before the first marker is a preamble, not a role, and is discarded.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = _ROLE_MARKER.split(raw)
    if len(parts) > 1:
        parts = parts[1:]
    segments = [p.strip() for p in parts if p.strip()]
    if len(segments) < n:
        raise RoleCountMismatch(n, len(segments))
    return [RoleProfile(i, text) for i, text in enumerate(segments[:n])]


def extract_answer(raw: str, marker: str = ANSWER_MARKER) -> str | None:
    """Text after the last ``marker``, minus an optional colon and surrounding whitespace."""
    idx = raw.rfind(marker)
    if idx == -1:
        return None
    rest = raw[idx + len(marker):].strip()
    if rest.startswith(":"):
        rest = rest[1:].strip()
    return rest


def normalize_answer(text: str) -> str:
    """Trim, collapse internal whitespace, casefold."""
    return " ".join(text.split()).casefold()
