# arag/agents.py

import json
import logging
import math
import re
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel

from .blackboard import Blackboard, encode_payload
from .config import PipelineConfig
from .corpus import Catalog, metadata_text
from .llm import ChatBackend
from .schemas import (
    ROLE_STAGES,
    AgentRole,
    ChatMessage,
    ChatRequest,
    ContextSummary,
    Interaction,
    Item,
    Message,
    NliJudgement,
    Ranking,
    UserContext,
    UserSummary,
)

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).parent / "prompts"
SECTION_BREAK = "\n---\n"
METADATA_CHARS = 300
PARSE_FAILURE = "parse_failure"
NOT_AVAILABLE = "(not available)"
EMPTY_SECTION = "(none)"
_PLACEHOLDER = re.compile(r"\{(\w+)\}")


# --- Prompt templates ---

class PromptTemplate(BaseModel):
    name: str
    system: str
    user: str

    def render(self, **values: str) -> Tuple[str, str]:
        return render_template(self.system, **values), render_template(self.user, **values)


def render_template(template: str, **values: str) -> str:
    """Fill {name} placeholders in one pass; anything else in braces is left alone."""
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


@lru_cache(maxsize=None)
def _read_template(path: Path) -> str:
    return path.read_text(encoding="utf-8")


def load_template(name: str, prompt_dir: Optional[Path] = None) -> PromptTemplate:
    """Template files hold a system part and a user part separated by a '---' line."""
    text = _read_template(Path(prompt_dir or PROMPT_DIR) / f"{name}.txt").strip("\n")
    if SECTION_BREAK in text:
        system, user = text.split(SECTION_BREAK, 1)
    else:
        system, user = "", text
    return PromptTemplate(name=name, system=system.strip(), user=user.strip())


def build_request(
    template: PromptTemplate,
    role: str,
    max_tokens: int,
    config: PipelineConfig,
    **values: str,
) -> ChatRequest:
    system, user = template.render(**values)
    messages = [ChatMessage(role="system", content=system)] if system else []
    messages.append(ChatMessage(role="user", content=user))
    return ChatRequest(
        messages=tuple(messages),
        temperature=config.temperature,
        max_tokens=max_tokens,
        model_tag=config.model_tag,
        agent_role=role,
    )


# --- Rendering helpers ---

def _details(item: Item, max_reviews: int) -> str:
    body = metadata_text(item, max_reviews).split("\n")[1:]
    text = " / ".join(line for line in body if line.split(":", 1)[-1].strip())
    if len(text) > METADATA_CHARS:
        text = text[:METADATA_CHARS].rstrip() + "..."
    return text


def history_line(interaction: Interaction, catalog: Catalog, max_reviews: int) -> str:
    item = catalog[interaction.item_id]
    parts = [f"- title: {item.title}"]
    if interaction.rating is not None:
        parts.append(f"rating: {interaction.rating:g}")
    details = _details(item, max_reviews)
    if details:
        parts.append(details)
    return " | ".join(parts)


def candidate_line(item: Item, max_reviews: int, score: Optional[float] = None) -> str:
    parts = [f"- id: {item.id}", f"title: {item.title}"]
    if score is not None:
        parts.append(f"NLI score: {score:.2f}")
    details = _details(item, max_reviews)
    if details:
        parts.append(details)
    return " | ".join(parts)


def _block(lines: Sequence[str]) -> str:
    return "\n".join(lines) if lines else EMPTY_SECTION


def recent_history(context: UserContext, cap: int) -> Tuple[List[Interaction], List[Interaction]]:
    """The cap newest interactions, split into (long-term, session), each newest first."""
    recent = context.newest_first()[:cap]
    session_ids = {id(i) for i in context.session}
    session = [i for i in recent if id(i) in session_ids]
    long_term = [i for i in recent if id(i) not in session_ids]
    return long_term, session


def _post(board: Optional[Blackboard], role: AgentRole, content: str, message_id: str, score: Optional[float] = None) -> None:
    if board is not None:
        board.post(Message(id=message_id, role=role, content=content, score=score, stage=ROLE_STAGES[role]))


# --- User Understanding Agent ---

def build_uua_request(context: UserContext, catalog: Catalog, config: PipelineConfig) -> ChatRequest:
    long_term, session = recent_history(context, config.max_history_items)
    return build_request(
        load_template("user_understanding", config.prompt_dir),
        AgentRole.USER_UNDERSTANDING.value,
        config.max_tokens.user_understanding,
        config,
        long_term=_block([history_line(i, catalog, config.max_reviews) for i in long_term]),
        session=_block([history_line(i, catalog, config.max_reviews) for i in session]),
    )


async def run_uua(
    context: UserContext,
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    board: Optional[Blackboard] = None,
) -> UserSummary:
    """Summarize the user's long-term and session preferences."""
    response = await backend.complete(build_uua_request(context, catalog, config))
    text = response.text.strip() or NOT_AVAILABLE
    _post(board, AgentRole.USER_UNDERSTANDING, text, AgentRole.USER_UNDERSTANDING.value)
    return UserSummary(text=text)


# --- NLI Agent ---

def _json_candidates(raw: str, opener: str):
    """Yield every JSON value that starts at an `opener` character in raw."""
    decoder = json.JSONDecoder()
    start = raw.find(opener)
    while start != -1:
        try:
            value, _ = decoder.raw_decode(raw, start)
            yield value
        except (ValueError, RecursionError):
            pass
        start = raw.find(opener, start + 1)


def parse_nli(raw: str) -> Optional[Tuple[float, str]]:
    """Extract (clamped score, rationale) from the first JSON object carrying a numeric score."""
    for value in _json_candidates(raw, "{"):
        if not isinstance(value, dict):
            continue
        score = value.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            continue
        try:
            score = float(score)
        except OverflowError:
            continue
        if not math.isfinite(score):
            continue
        rationale = value.get("rationale", "")
        return min(1.0, max(0.0, score)), rationale if isinstance(rationale, str) else str(rationale)
    return None


def build_nli_request(item: Item, context: UserContext, catalog: Catalog, config: PipelineConfig) -> ChatRequest:
    long_term, session = recent_history(context, config.max_history_items)
    return build_request(
        load_template("nli", config.prompt_dir),
        AgentRole.NLI.value,
        config.max_tokens.nli,
        config,
        session=_block([history_line(i, catalog, config.max_reviews) for i in session]),
        long_term=_block([history_line(i, catalog, config.max_reviews) for i in long_term]),
        item=candidate_line(item, config.max_reviews),
    )


async def run_nli(
    item: Item,
    context: UserContext,
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    board: Optional[Blackboard] = None,
) -> NliJudgement:
    """Score how well one candidate aligns with the user's context; one re-prompt on bad JSON."""
    request = build_nli_request(item, context, catalog, config)
    response = await backend.complete(request)
    parsed = parse_nli(response.text)
    if parsed is None:
        retry = render_template(load_template("nli_retry", config.prompt_dir).user, reply=response.text.strip()[:500])
        response = await backend.complete(request.model_copy(
            update={"messages": request.messages + (ChatMessage(role="user", content=retry),)}
        ))
        parsed = parse_nli(response.text)
    if parsed is None:
        logger.warning(f"NLI reply for item {item.id} of user {context.user_id} unparseable; scoring 0.0")
        parsed = (0.0, PARSE_FAILURE)
    judgement = NliJudgement(item_id=item.id, score=parsed[0], rationale=parsed[1])
    _post(
        board,
        AgentRole.NLI,
        encode_payload({"item_id": item.id, "rationale": judgement.rationale}),
        f"nli:{item.id}",
        score=judgement.score,
    )
    return judgement


def filter_aligned(judgements: Sequence[NliJudgement], theta: float, m_min: int) -> List[str]:
    """
    Accepted item ids: every score >= theta, best first.

    When fewer than m_min items qualify, the m_min best by (score desc, id asc)
    are returned instead.
    """
    ordered = sorted(judgements, key=lambda j: (-j.score, j.item_id))
    accepted = [j.item_id for j in ordered if j.score >= theta]
    if len(accepted) < m_min:
        return [j.item_id for j in ordered[:m_min]]
    return accepted


# --- Context Summary Agent ---

def build_csa_request(
    accepted: Sequence[Item],
    user_summary: UserSummary,
    judgements: Optional[Sequence[NliJudgement]],
    config: PipelineConfig,
) -> Tuple[ChatRequest, List[str]]:
    if judgements is not None:
        scores: Dict[str, float] = {j.item_id: j.score for j in judgements}
        ordered = sorted(accepted, key=lambda item: (-scores.get(item.id, 0.0), item.id))
        lines = [candidate_line(item, config.max_reviews, scores.get(item.id, 0.0)) for item in ordered]
    else:
        ordered = list(accepted)
        lines = [candidate_line(item, config.max_reviews) for item in ordered]
    request = build_request(
        load_template("context_summary", config.prompt_dir),
        AgentRole.CONTEXT_SUMMARY.value,
        config.max_tokens.context_summary,
        config,
        user_summary=user_summary.text,
        items=_block(lines),
    )
    return request, [item.id for item in ordered]


async def run_csa(
    accepted: Sequence[Item],
    user_summary: UserSummary,
    judgements: Optional[Sequence[NliJudgement]],
    backend: ChatBackend,
    config: PipelineConfig,
    board: Optional[Blackboard] = None,
) -> ContextSummary:
    """Condense the accepted items into a context summary; judgements=None leaves out the score annotations."""
    request, source_ids = build_csa_request(accepted, user_summary, judgements, config)
    response = await backend.complete(request)
    summary = ContextSummary(text=response.text.strip(), source_item_ids=tuple(source_ids))
    _post(
        board,
        AgentRole.CONTEXT_SUMMARY,
        encode_payload({"text": summary.text, "source_item_ids": list(summary.source_item_ids)}),
        AgentRole.CONTEXT_SUMMARY.value,
    )
    return summary


# --- Item Ranker Agent ---

def parse_ranking(raw: str, candidate_ids: Sequence[str], retrieval_order: Sequence[str]) -> List[str]:
    """
    Repair an LLM ranking into a permutation of candidate_ids.

    Takes the first JSON array of strings in raw, keeps elements that match a
    candidate (exactly, or by a unique case-insensitive match), drops duplicates
    and foreign ids, then appends missing candidates in retrieval order.
    """
    candidates = set(candidate_ids)
    folded: Dict[str, List[str]] = {}
    for cid in candidate_ids:
        folded.setdefault(cid.strip().casefold(), []).append(cid)

    proposed: List[str] = []
    for value in _json_candidates(raw, "["):
        if isinstance(value, list) and value and all(isinstance(v, str) for v in value):
            proposed = value
            break

    ranking: List[str] = []
    seen = set()
    dropped = 0
    for entry in proposed:
        match = entry if entry in candidates else None
        if match is None:
            options = folded.get(entry.strip().casefold(), [])
            match = options[0] if len(options) == 1 else None
        if match is None or match in seen:
            dropped += 1
            continue
        ranking.append(match)
        seen.add(match)

    missing = []
    # Candidates absent from retrieval_order keep their pool order at the very end
    for cid in list(retrieval_order) + list(candidate_ids):
        if cid in candidates and cid not in seen:
            missing.append(cid)
            seen.add(cid)
    if dropped or missing:
        logger.debug(f"Ranking repaired: {dropped} entries dropped, {len(missing)} candidates appended")
    return ranking + missing


def _ranker_payload(ranking: List[str], raw: str, candidates: Sequence[Item], retrieval_order: Sequence[str]) -> str:
    return encode_payload({
        "ranking": ranking,
        "raw": raw,
        "candidate_ids": [item.id for item in candidates],
        "retrieval_order": list(retrieval_order),
    })


def build_ira_request(
    user_summary: UserSummary,
    context_summary: Optional[ContextSummary],
    candidates: Sequence[Item],
    config: PipelineConfig,
) -> ChatRequest:
    return build_request(
        load_template("item_ranker", config.prompt_dir),
        AgentRole.ITEM_RANKER.value,
        config.max_tokens.item_ranker,
        config,
        user_summary=user_summary.text,
        context_summary=context_summary.text if context_summary and context_summary.text else NOT_AVAILABLE,
        candidates=_block([candidate_line(item, config.max_reviews) for item in candidates]),
    )


async def run_ira(
    user_summary: UserSummary,
    context_summary: Optional[ContextSummary],
    candidates: Sequence[Item],
    backend: ChatBackend,
    config: PipelineConfig,
    retrieval_order: Optional[Sequence[str]] = None,
    board: Optional[Blackboard] = None,
) -> Ranking:
    """Rank the candidates from the user and context summaries; the result is always a permutation."""
    order = list(retrieval_order) if retrieval_order is not None else [item.id for item in candidates]
    response = await backend.complete(build_ira_request(user_summary, context_summary, candidates, config))
    ranking = parse_ranking(response.text, [item.id for item in candidates], order)
    _post(board, AgentRole.ITEM_RANKER, _ranker_payload(ranking, response.text, candidates, order), AgentRole.ITEM_RANKER.value)
    return Ranking(item_ids=tuple(ranking), explanation=response.text.strip())


# --- Single-call baseline ranker ---

def build_baseline_request(
    history: Sequence[Interaction],
    catalog: Catalog,
    candidates: Sequence[Item],
    config: PipelineConfig,
) -> ChatRequest:
    return build_request(
        load_template("baseline_ranker", config.prompt_dir),
        "baseline",
        config.max_tokens.baseline,
        config,
        history=_block([history_line(i, catalog, config.max_reviews) for i in history]),
        candidates=_block([candidate_line(item, config.max_reviews) for item in candidates]),
    )


async def run_history_ranker(
    history: Sequence[Interaction],
    catalog: Catalog,
    candidates: Sequence[Item],
    backend: ChatBackend,
    config: PipelineConfig,
    retrieval_order: Optional[Sequence[str]] = None,
    board: Optional[Blackboard] = None,
) -> Ranking:
    """One LLM call ranking the candidates against a block of raw history items."""
    order = list(retrieval_order) if retrieval_order is not None else [item.id for item in candidates]
    response = await backend.complete(build_baseline_request(history, catalog, candidates, config))
    ranking = parse_ranking(response.text, [item.id for item in candidates], order)
    _post(board, AgentRole.ITEM_RANKER, _ranker_payload(ranking, response.text, candidates, order), AgentRole.ITEM_RANKER.value)
    return Ranking(item_ids=tuple(ranking), explanation=response.text.strip())
