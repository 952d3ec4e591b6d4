# tests/test_agents.py

import asyncio
import json
import random

import pytest

from arag.agents import (
    EMPTY_SECTION,
    METADATA_CHARS,
    NOT_AVAILABLE,
    PARSE_FAILURE,
    build_csa_request,
    build_ira_request,
    build_nli_request,
    build_uua_request,
    candidate_line,
    filter_aligned,
    load_template,
    parse_nli,
    parse_ranking,
    recent_history,
    render_template,
    run_csa,
    run_ira,
    run_nli,
    run_uua,
)
from arag.blackboard import Blackboard, payload
from arag.config import PipelineConfig
from arag.llm import MockBackend, request_digest
from arag.schemas import AgentRole, ContextSummary, NliJudgement, UserSummary
from arag.synthetic import prompt_sections

from conftest import make_context, make_item


def user_prompt(request):
    return [m.content for m in request.messages if m.role == "user"][-1]


# --- Templates ---

def test_render_template_only_fills_named_placeholders():
    assert render_template("{a} and {b}", a="1") == "1 and {b}"
    assert render_template('{"score": {x}}', x="0.5") == '{"score": 0.5}'


def test_placeholders_inside_filled_values_stay_literal():
    rendered = render_template("{session}\n{long_term}\n{item}", session="Mug {long_term}", long_term="Kettle", item="{item}")
    assert rendered == "Mug {long_term}\nKettle\n{item}"


def test_item_text_with_braces_reaches_the_prompt_verbatim(bag_context, bag_catalog, pipeline_config):
    item = make_item("x", "Tote {candidates} {long_term}")
    request = build_nli_request(item, bag_context, bag_catalog, pipeline_config)
    assert "Tote {candidates} {long_term}" in user_prompt(request)


def test_packaged_templates_have_a_system_part():
    for name in ("user_understanding", "nli", "context_summary", "item_ranker", "baseline_ranker"):
        template = load_template(name)
        assert template.system
        assert "---" not in template.user


def test_custom_prompt_dir_without_system_part(tmp_path, bag_context, bag_catalog):
    (tmp_path / "user_understanding.txt").write_text("History:\n{long_term}\nNow:\n{session}\n", encoding="utf-8")
    config = PipelineConfig(k=10, candidate_pool_size=3, prompt_dir=tmp_path)
    request = build_uua_request(bag_context, bag_catalog, config)
    assert [m.role for m in request.messages] == ["user"]
    assert request.messages[0].content.startswith("History:\n- title: Canvas Weekender Duffel")


# --- User Understanding ---

def test_uua_prompt_lists_history_newest_first(bag_context, bag_catalog, pipeline_config):
    sections = prompt_sections(user_prompt(build_uua_request(bag_context, bag_catalog, pipeline_config)))
    session = sections["Current session (newest first)"].split("\n")
    long_term = sections["Long-term history (newest first)"].split("\n")
    assert session[0].startswith("- title: Quilted Crossbody Bag")
    assert session[1].startswith("- title: Checkered Coin Purse")
    assert long_term[0].startswith("- title: Canvas Weekender Duffel | rating: 4")


def test_uua_with_no_long_term_history(bag_catalog, pipeline_config):
    context = make_context("u", session=["b1"])
    sections = prompt_sections(user_prompt(build_uua_request(context, bag_catalog, pipeline_config)))
    assert sections["Long-term history (newest first)"] == EMPTY_SECTION
    assert "Dasein Hobo Handbag" in sections["Current session (newest first)"]


def test_recent_history_cap_prefers_the_session(bag_context):
    long_term, session = recent_history(bag_context, 2)
    assert long_term == []
    assert [i.item_id for i in session] == ["b4", "b8"]


def test_uua_posts_its_summary(bag_context, bag_catalog, pipeline_config):
    board = Blackboard()
    backend = MockBackend(default="  likes checkered leather  ")
    summary = asyncio.run(run_uua(bag_context, bag_catalog, backend, pipeline_config, board))
    assert summary.text == "likes checkered leather"
    [message] = board.read()
    assert (message.id, message.role, message.stage) == ("user_understanding", AgentRole.USER_UNDERSTANDING, 1)


def test_prompt_digest_is_deterministic(bag_context, bag_catalog, pipeline_config):
    first = build_uua_request(bag_context, bag_catalog, pipeline_config)
    second = build_uua_request(bag_context, bag_catalog, pipeline_config)
    assert request_digest(first) == request_digest(second)


def test_long_metadata_is_truncated():
    item = make_item("x", "Tote", description="word " * 400)
    line = candidate_line(item, max_reviews=3)
    assert line.endswith("...")
    assert len(line) < METADATA_CHARS + 40


# --- NLI ---

@pytest.mark.parametrize("raw, expected", [
    ('{"score": 0.4, "rationale": "ok"}', (0.4, "ok")),
    ('Sure! {"score": 0.7, "rationale": "close"} hope that helps', (0.7, "close")),
    ('{"score": 1.7}', (1.0, "")),
    ('{"score": -2, "rationale": "no"}', (0.0, "no")),
    ('{"note": "x"} then {"score": 1}', (1.0, "")),
])
def test_parse_nli_extracts_and_clamps(raw, expected):
    assert parse_nli(raw) == expected


@pytest.mark.parametrize("raw", [
    "not json", '{"score": "high"}', '{"score": true}', "[0.5]", "",
    '{"a":' * 5000, "{" * 5000, '{"score": ' + "9" * 5000 + "}",
])
def test_parse_nli_rejects_replies_without_a_numeric_score(raw):
    assert parse_nli(raw) is None


def test_nli_prompt_shows_session_and_item(bag_context, bag_catalog, pipeline_config):
    request = build_nli_request(bag_catalog["b2"], bag_context, bag_catalog, pipeline_config)
    sections = prompt_sections(user_prompt(request))
    assert sections["Current session (newest first)"].startswith("- title: Quilted Crossbody Bag")
    assert "Leather Card Wallet" in sections["Long-term history (newest first)"]
    assert sections["Candidate item"].startswith("- id: b2 | title: BUTIED Checkered Tote Shoulder Handbag")
    assert '{"score": <number from 0 to 1>' in user_prompt(request)


def test_nli_reprompts_once_then_scores_zero(bag_context, bag_catalog, pipeline_config):
    calls = []

    def responder(request):
        calls.append(request)
        return "I think it fits well"

    board = Blackboard()
    judgement = asyncio.run(run_nli(bag_catalog["b1"], bag_context, bag_catalog, MockBackend(responder=responder), pipeline_config, board))
    assert len(calls) == 2
    assert len(calls[1].messages) == len(calls[0].messages) + 1
    assert "I think it fits well" in calls[1].messages[-1].content
    assert (judgement.score, judgement.rationale) == (0.0, PARSE_FAILURE)
    [message] = board.read()
    assert message.id == "nli:b1"
    assert message.score == 0.0


def test_nli_reprompt_can_recover(bag_context, bag_catalog, pipeline_config):
    replies = iter(["maybe?", '{"score": 0.8, "rationale": "matches"}'])
    backend = MockBackend(responder=lambda request: next(replies))
    judgement = asyncio.run(run_nli(bag_catalog["b1"], bag_context, bag_catalog, backend, pipeline_config))
    assert judgement.score == 0.8


# --- Alignment filter ---

def judgements(scores):
    return [NliJudgement(item_id=item_id, score=score) for item_id, score in scores.items()]


def test_filter_keeps_everything_above_threshold():
    scored = judgements({"a": 0.9, "b": 0.2, "c": 0.6, "d": 0.5})
    assert filter_aligned(scored, theta=0.5, m_min=2) == ["a", "c", "d"]


def test_filter_falls_back_to_the_best_m_min():
    scored = judgements({"a": 0.0, "b": 0.0, "c": 0.1, "d": 0.0})
    assert filter_aligned(scored, theta=0.5, m_min=3) == ["c", "a", "b"]
    assert filter_aligned(scored, theta=0.5, m_min=10) == ["c", "a", "b", "d"]
    assert filter_aligned([], theta=0.5, m_min=3) == []


def test_filter_is_a_prefix_that_shrinks_with_theta():
    rng = random.Random(9)
    for _ in range(200):
        scored = judgements({f"i{n}": round(rng.random(), 1) for n in range(rng.randint(1, 12))})
        m_min = rng.randint(0, 5)
        low, high = sorted([rng.random(), rng.random()])
        loose = filter_aligned(scored, low, m_min)
        strict = filter_aligned(scored, high, m_min)
        assert loose[:len(strict)] == strict
        assert len(loose) >= min(m_min, len(scored))


# --- Context Summary ---

def test_csa_prompt_orders_items_by_score(bag_catalog, pipeline_config):
    accepted = [bag_catalog[i] for i in ("b1", "b2", "b5")]
    request, source_ids = build_csa_request(
        accepted, UserSummary(text="likes totes"), judgements({"b1": 0.2, "b2": 0.9, "b5": 0.2}), pipeline_config
    )
    assert source_ids == ["b2", "b1", "b5"]
    evidence = prompt_sections(user_prompt(request))["Candidate evidence"].split("\n")
    assert "NLI score: 0.90" in evidence[0]
    assert evidence[1].startswith("- id: b1")


def test_csa_without_judgements_has_no_scores(bag_catalog, pipeline_config):
    accepted = [bag_catalog[i] for i in ("b5", "b1")]
    request, source_ids = build_csa_request(accepted, UserSummary(text="x"), None, pipeline_config)
    assert source_ids == ["b5", "b1"]
    assert "NLI score" not in prompt_sections(user_prompt(request))["Candidate evidence"]


def test_csa_posts_text_and_sources(bag_catalog, pipeline_config):
    board = Blackboard()
    summary = asyncio.run(run_csa(
        [bag_catalog["b2"]], UserSummary(text="x"), judgements({"b2": 0.9}),
        MockBackend(default="checkered vegan leather"), pipeline_config, board,
    ))
    assert summary.source_item_ids == ("b2",)
    [message] = board.read()
    assert payload(message) == {"text": "checkered vegan leather", "source_item_ids": ["b2"]}


# --- Item Ranker ---

@pytest.mark.parametrize("raw, expected", [
    ('["c", "a"]', ["c", "a", "b"]),
    ('Ranking: ["b", "a", "c"] because reasons', ["b", "a", "c"]),
    ('["a", "zz", "a", " B "]', ["a", "b", "c"]),
    ("no array at all", ["b", "a", "c"]),
    ("[1, 2, 3]", ["b", "a", "c"]),
    ('[] and later ["c"]', ["c", "b", "a"]),
])
def test_parse_ranking_repairs(raw, expected):
    assert parse_ranking(raw, ["a", "b", "c"], ["b", "a", "c"]) == expected


@pytest.mark.parametrize("raw, expected", [
    ("[" * 5000, ["a", "b"]),
    ("[" * 3000 + '"b"' + "]" * 3000, ["b", "a"]),
    ('{"x": ' * 5000 + '["b"]', ["b", "a"]),
    ("{" * 5000 + "[" * 5000, ["a", "b"]),
])
def test_parse_ranking_survives_deep_nesting(raw, expected):
    assert parse_ranking(raw, ["a", "b"], ["a", "b"]) == expected


def test_parse_ranking_drops_ambiguous_case_matches():
    assert parse_ranking('["x"]', ["X", "x"], ["X", "x"]) == ["x", "X"]
    assert parse_ranking('["X ", "x"]', ["X", "x"], ["X", "x"]) == ["x", "X"]


def test_parse_ranking_always_returns_a_permutation():
    rng = random.Random(42)
    alphabet = ["a", "b", "c", "d", "e", "A", "zz", "", " c "]
    for _ in range(2000):
        candidates = rng.sample(["a", "b", "c", "d", "e", "f"], rng.randint(1, 6))
        order = rng.sample(candidates, len(candidates))
        entries = [rng.choice(alphabet) for _ in range(rng.randint(0, 8))]
        shape = rng.randrange(4)
        if shape == 0:
            raw = json.dumps(entries)
        elif shape == 1:
            raw = "Here you go: " + json.dumps(entries)[:rng.randint(0, 30)]
        elif shape == 2:
            raw = json.dumps({"ranking": entries})
        else:
            raw = "".join(rng.choice('[]",ab{} ') for _ in range(rng.randint(0, 20)))
        ranking = parse_ranking(raw, candidates, order)
        assert sorted(ranking) == sorted(candidates)


def test_ira_prompt_has_the_ranking_steps(bag_catalog, pipeline_config):
    request = build_ira_request(UserSummary(text="likes totes"), None, [bag_catalog["b1"]], pipeline_config)
    prompt = user_prompt(request)
    for step in ("1. Consider", "2. Consider", "3. Examine", "4. Rank"):
        assert step in prompt
    assert prompt_sections(prompt)["Context summary"] == NOT_AVAILABLE


def test_ira_with_one_candidate(bag_catalog, pipeline_config):
    board = Blackboard()
    ranking = asyncio.run(run_ira(
        UserSummary(text="x"), ContextSummary(text="y"), [bag_catalog["b1"]],
        MockBackend(default="I cannot decide"), pipeline_config, board=board,
    ))
    assert ranking.item_ids == ("b1",)
    assert payload(board.read()[0])["ranking"] == ["b1"]


def test_worked_example_puts_the_checkered_tote_first(bag_context, bag_catalog, bag_pool, scripted, pipeline_config):
    """Session of checkered and quilted small bags; the checkered tote should come out on top."""
    config = pipeline_config.model_copy(update={"m_min": 1})
    scripted.ranking = ["b2", "b1", "b5"]
    backend = MockBackend(responder=scripted)
    board = Blackboard()

    async def run():
        summary = await run_uua(bag_context, bag_catalog, backend, config, board)
        scored = [await run_nli(item, bag_context, bag_catalog, backend, config, board) for item in bag_pool]
        accepted = filter_aligned(scored, config.theta, config.m_min)
        context = await run_csa([bag_catalog[i] for i in accepted], summary, scored, backend, config, board)
        return accepted, await run_ira(summary, context, bag_pool, backend, config, board=board)

    accepted, ranking = asyncio.run(run())
    assert accepted == ["b2"]
    assert ranking.item_ids[0] == "b2"
    assert [m.role for m in board.read()] == [
        AgentRole.NLI, AgentRole.NLI, AgentRole.NLI,
        AgentRole.USER_UNDERSTANDING, AgentRole.CONTEXT_SUMMARY, AgentRole.ITEM_RANKER,
    ]
    ranker_prompt = user_prompt(scripted.calls[-1])
    assert "user favors checkered totes" in ranker_prompt
