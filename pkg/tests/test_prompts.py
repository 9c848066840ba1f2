import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemoa import prompts
from sparsemoa.errors import BadK, EmptyResponses, MissingPlaceholder, RoleCountMismatch, UnparseableVerdict
from sparsemoa.prompts import (
    JudgeVerdict,
    extract_answer,
    normalize_chosen,
    parse_judge_verdict,
    parse_roles,
    render_aggregate_prompt,
    render_judge_moderator_prompt,
    render_role_generation_prompt,
    serialize_verdict,
)

from conftest import GOLDEN, NN_CANDIDATES, NN_VERDICT, golden_serialize

SENTINELS = ["<<RESPONSE_1>>", "<<RESPONSE_2>>", "<<RESPONSE_3>>", "<<RESPONSE_4>>"]


def read_golden(name):
    return (GOLDEN / name).read_bytes().decode("utf-8")


# rendering


def test_aggregate_prompt_opening():
    msgs = render_aggregate_prompt(["A", "B"], "Q")
    assert msgs[0].content.startswith(
        "You have been provided with a set of responses from various open-source models"
    )


def test_aggregate_single_response():
    msgs = render_aggregate_prompt(["A"], "Q")
    assert "1. A" in msgs[0].content
    assert msgs[1].role == "user" and msgs[1].content == "Q"


def test_aggregate_empty_raises():
    with pytest.raises(EmptyResponses):
        render_aggregate_prompt([], "Q")


@pytest.mark.parametrize(
    "name,render",
    [
        ("aggregator.txt", lambda: render_aggregate_prompt(SENTINELS, "<<QUERY>>")),
        ("judge_moderator.txt", lambda: render_judge_moderator_prompt(SENTINELS, "<<QUERY>>", 2)),
        (
            "role_generation.txt",
            lambda: render_role_generation_prompt("<<DATASET_DESCRIPTION>>", "<<TASK_REQUIREMENT>>", 4),
        ),
    ],
)
def test_golden_byte_equality(name, render):
    assert golden_serialize(render()).encode("utf-8") == (GOLDEN / name).read_bytes()


def test_judge_prompt_k_and_schema():
    text = render_judge_moderator_prompt(["a", "b", "c", "d"], "Q", 2)[0].content
    assert "select 2 responses" in text
    assert '"end debate": bool // whether end the debate' in text
    assert text.endswith("Question: Q")


def test_judge_prompt_zero_based_numbering():
    user = render_judge_moderator_prompt(["a", "b"], "Q", 1)[1].content
    assert "0. a" in user and "1. b" in user


def test_judge_prompt_full_selection_ok():
    render_judge_moderator_prompt(["a", "b", "c"], "Q", 3)


@pytest.mark.parametrize("k", [0, 5, -1])
def test_judge_prompt_bad_k(k):
    with pytest.raises(BadK):
        render_judge_moderator_prompt(["a", "b", "c", "d"], "Q", k)


def test_judge_prompt_query_with_braces_is_literal():
    text = render_judge_moderator_prompt(["a"], "set {n: 4}", 1)[0].content
    assert text.endswith("Question: set {n: 4}")


@pytest.mark.parametrize("n", [1, 4, 7])
def test_role_prompt_substitution_is_literal(n):
    text = render_role_generation_prompt("D", "T", n)[0].content
    assert f"assign {n} different roles" in text
    assert f"Provide {n} role description" in text
    assert "[Model Number]" not in text and "[Task Description]" not in text
    assert "Task: D T\n" in text


def test_role_prompt_keeps_gsm8k_example():
    text = render_role_generation_prompt("D", "T", 4)[0].content
    assert "Task: GSM8K (Grade School Math 8K)" in text
    assert "[Generated Role Description 4]" in text


def test_placeholder_values_are_not_rescanned():
    text = render_role_generation_prompt("[Model Number]", "", 3)[0].content
    assert "Task: [Model Number]\n" in text


def test_template_missing_placeholder():
    with pytest.raises(MissingPlaceholder):
        prompts.ROLE_GENERATION.render({"Model Number": 3})


def _diff_positions(a: str, b: str) -> int:
    return sum(1 for x, y in zip(a, b) if x != y) + abs(len(a) - len(b))


def test_template_fidelity_only_placeholders_differ():
    # swapping sentinels for other sentinels of equal length changes only those sites
    a = golden_serialize(render_judge_moderator_prompt(SENTINELS, "<<QUERY>>", 2))
    b = golden_serialize(render_judge_moderator_prompt([s.replace("R", "Z") for s in SENTINELS], "<<QUERY>>", 2))
    assert _diff_positions(a, b) == 4
    assert a == read_golden("judge_moderator.txt")


# verdict parsing


def test_nn_example_verdict():
    v = parse_judge_verdict(NN_VERDICT, len(NN_CANDIDATES), 2)
    assert v.chosen == (0, 1) and v.end_debate is True and not v.normalized


def test_verdict_normalization_example():
    raw = json.dumps({"reasoning": "r", "chosen responses": [2, 2, 9], "end debate": False})
    v = parse_judge_verdict(raw, 4, 2)
    assert v.chosen == (2, 0)
    assert v.normalized


def test_fenced_equals_unfenced():
    fenced = f"Here you go:\n```json\n{NN_VERDICT}\n```\nThanks"
    assert parse_judge_verdict(fenced, 4, 2) == parse_judge_verdict(NN_VERDICT, 4, 2)


def test_verdict_truncates_to_k():
    raw = json.dumps({"reasoning": "", "chosen responses": [3, 1, 0], "end debate": "yes"})
    v = parse_judge_verdict(raw, 4, 2)
    assert v.chosen == (3, 1) and v.end_debate is True


@pytest.mark.parametrize(
    "raw",
    [
        "",
        "no json at all",
        '{"reasoning": "x", "chosen responses": [0, 1]}',
        '{"reasoning": "x", "chosen responses": [0, 1], "end debate": "maybe"}',
        '{"reasoning": "x", "chosen responses": "zero", "end debate": true}',
        '```json\n{"reasoning": "x", "chosen responses": [0, \n```',
    ],
)
def test_unparseable(raw):
    with pytest.raises(UnparseableVerdict):
        parse_judge_verdict(raw, 4, 2)


def test_verdict_picks_object_with_all_keys():
    raw = 'schema: {"reasoning": str} then {"reasoning": "ok", "chosen responses": [1], "end debate": false}'
    v = parse_judge_verdict(raw, 3, 1)
    assert v.chosen == (1,)


def test_fallback_verdict_skips_empty():
    v = prompts.fallback_verdict(["", "b", "", "d"], 2)
    assert v.chosen == (1, 3) and v.fallback and not v.end_debate


def test_fallback_verdict_pads_when_short():
    v = prompts.fallback_verdict(["", "b", "", ""], 2)
    assert v.chosen == (1, 0)


@st.composite
def verdicts(draw):
    n = draw(st.integers(1, 8))
    k = draw(st.integers(1, n))
    chosen = draw(st.permutations(range(n)))[:k]
    v = JudgeVerdict(draw(st.text()), tuple(chosen), draw(st.booleans()))
    return v, n, k


@given(verdicts())
def test_round_trip(case):
    v, n, k = case
    assert parse_judge_verdict(serialize_verdict(v), n, k) == v


@given(st.lists(st.integers(-3, 12), max_size=10), st.integers(1, 8), st.data())
def test_normalization_idempotent(chosen, n, data):
    k = data.draw(st.integers(1, n))
    once, _ = normalize_chosen(chosen, n, k)
    twice, changed = normalize_chosen(once, n, k)
    assert twice == once and not changed
    assert len(once) == k and len(set(once)) == k and all(0 <= i < n for i in once)


@settings(max_examples=300)
@given(st.binary(max_size=300))
def test_fuzz_bytes_total(raw):
    try:
        v = parse_judge_verdict(raw, 4, 2)
    except UnparseableVerdict:
        return
    assert len(v.chosen) == 2


@settings(max_examples=300)
@given(st.text(max_size=300))
def test_fuzz_text_total(raw):
    try:
        parse_judge_verdict(raw, 3, 2)
    except UnparseableVerdict:
        pass


# roles


def appendix_role_output() -> str:
    body = render_role_generation_prompt("D", "T", 4)[0].content
    start = body.index("[Generated Role Description 1]")
    end = body.index("Provide 4 role description")
    return body[start:end]


def test_parse_roles_appendix_example():
    roles = parse_roles(appendix_role_output(), 4)
    assert len(roles) == 4
    assert roles[0].description.startswith("You are a data analyst")
    assert roles[3].description.startswith("You are a middle school math teacher")
    assert [r.index for r in roles] == [0, 1, 2, 3]


def test_parse_roles_single():
    assert parse_roles("[Generated Role Description]\nYou are a chef.", 1)[0].description == "You are a chef."


def test_parse_roles_overshoot_keeps_first_n():
    raw = "\n".join(f"[Generated Role Description {i}]\nrole {i}" for i in range(1, 6))
    roles = parse_roles(raw, 4)
    assert [r.description for r in roles] == ["role 1", "role 2", "role 3", "role 4"]


def test_parse_roles_undershoot():
    with pytest.raises(RoleCountMismatch):
        parse_roles("[Generated Role Description 1]\nonly one", 2)


def test_parse_roles_drops_preamble():
    raw = "Sure! Here are the roles.\n[Generated Role Description 1]\nA\n[Generated Role Description 2]\nB"
    assert [r.description for r in parse_roles(raw, 2)] == ["A", "B"]


# answers


def test_extract_answer_plain_fraction():
    assert extract_answer(NN_CANDIDATES[3]) == "16/21"


def test_extract_answer_absent():
    assert extract_answer("no marker here") is None


def test_extract_answer_last_occurrence():
    assert extract_answer("#ANSWER#: a ... #ANSWER#: b") == "b"


def test_extract_answer_no_colon():
    assert extract_answer("#ANSWER# 42 ") == "42"


@given(st.text(), st.text(alphabet=st.characters(blacklist_characters="#"), min_size=1).map(str.strip).filter(bool))
def test_extract_answer_property(prefix, answer):
    assert extract_answer(f"{prefix}#ANSWER#: {answer}") == answer.strip()


def test_random_wrong_type_corpus_never_crashes():
    rng = random.Random(7)
    values = [None, 1, "x", [1, "2", 3.0, True], {"a": 1}, 2.5, False, [], ["0", "1"]]
    for _ in range(200):
        obj = {"reasoning": rng.choice(values), "chosen responses": rng.choice(values), "end debate": rng.choice(values)}
        raw = json.dumps(obj)
        try:
            v = parse_judge_verdict(raw, 4, 2)
        except UnparseableVerdict:
            continue
        assert len(v.chosen) == 2 and isinstance(v.end_debate, bool)
