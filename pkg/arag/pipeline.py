# arag/pipeline.py

import asyncio
import logging
import time
from typing import Awaitable, Dict, List, Optional, Sequence, TypeVar

from .agents import filter_aligned, parse_ranking, run_csa, run_history_ranker, run_ira, run_nli, run_uua
from .blackboard import Blackboard, payload, serialize
from .config import PipelineConfig
from .corpus import Catalog, metadata_text
from .embed import Embedder, HashingEmbedder, VectorIndex, embed_text, embed_user, retrieve_topk
from .errors import PoolError, TraceError
from .llm import ChatBackend, UsageMeter
from .schemas import (
    AgentRole,
    ContextSummary,
    Interaction,
    Item,
    NliJudgement,
    PipelineOutput,
    Ranking,
    UserContext,
    UserSummary,
    Variant,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")


def _check_pool(pool: Sequence[Item]) -> None:
    if not pool:
        raise PoolError("Candidate pool is empty")
    if len({item.id for item in pool}) != len(pool):
        raise PoolError("Candidate pool contains duplicate items")


def _item_index(
    items: Sequence[Item],
    embedder: Embedder,
    config: PipelineConfig,
    index: Optional[VectorIndex],
) -> VectorIndex:
    ids = [item.id for item in items]
    if index is not None and all(item_id in index for item_id in ids):
        return index.subset(ids)
    return VectorIndex(ids, embedder.embed([metadata_text(item, config.max_reviews) for item in items]))


def retrieval_order(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    embedder: Embedder,
    config: PipelineConfig,
    index: Optional[VectorIndex] = None,
) -> List[str]:
    """
    Pool ids by cosine to the user embedding, ties by id; the prior used to repair rankings.
    Pool vectors come from index when given, so only the user query is embedded.
    """
    query = embed_user(context, catalog, embedder, config.max_history_items, config.max_reviews)
    index = _item_index(pool, embedder, config, index)
    return [item_id for item_id, _ in retrieve_topk(index, query, len(pool))]


class _Run:
    """Per-user state shared by the variant runners: board, metered backend, clock."""

    def __init__(self, context: UserContext, variant: Variant, backend: ChatBackend, config: PipelineConfig):
        self.context = context
        self.variant = variant
        self.board = Blackboard()
        self.backend = UsageMeter(backend)
        self.slots = asyncio.Semaphore(config.concurrency_cap)
        self.started = time.perf_counter()

    async def limited(self, call: Awaitable[T]) -> T:
        async with self.slots:
            return await call

    def finish(self, ranking: Ranking) -> PipelineOutput:
        output = PipelineOutput(
            user_id=self.context.user_id,
            variant=self.variant,
            ranking=ranking,
            board_trace=serialize(self.board),
            usage=tuple(self.backend.calls),
            wall_time=time.perf_counter() - self.started,
        )
        logger.debug(
            f"{self.variant.value} for user {self.context.user_id}: {len(self.board)} messages, "
            f"{len(output.usage)} calls, {output.wall_time:.3f}s"
        )
        return output


def _user_summary(board: Blackboard) -> UserSummary:
    return UserSummary(text=board.read(AgentRole.USER_UNDERSTANDING)[0].content)


def _judgements(board: Blackboard) -> List[NliJudgement]:
    judgements = []
    for message in board.read(AgentRole.NLI):
        body = payload(message)
        judgements.append(NliJudgement(item_id=body["item_id"], score=message.score, rationale=body.get("rationale", "")))
    return judgements


def _context_summary(board: Blackboard) -> ContextSummary:
    body = payload(board.read(AgentRole.CONTEXT_SUMMARY)[0])
    return ContextSummary(text=body["text"], source_item_ids=tuple(body["source_item_ids"]))


async def run_arag(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    embedder: Optional[Embedder] = None,
    index: Optional[VectorIndex] = None,
) -> PipelineOutput:
    """
    The three-step agent protocol over one user's candidate pool.

    1. UUA and one NLI call per candidate run concurrently and post at stage 1.
    2. The accepted set is filtered from the NLI messages; CSA posts at stage 2.
    3. IRA ranks the whole pool from the user and context summaries (stage 3).
    Each step reads its inputs from the board, not from the previous step's return values.
    """
    _check_pool(pool)
    embedder = embedder or HashingEmbedder(config.dim)
    order = await asyncio.to_thread(retrieval_order, context, pool, catalog, embedder, config, index)
    run = _Run(context, Variant.ARAG, backend, config)

    await asyncio.gather(
        run.limited(run_uua(context, catalog, run.backend, config, run.board)),
        *[run.limited(run_nli(item, context, catalog, run.backend, config, run.board)) for item in pool],
    )

    judgements = _judgements(run.board)
    by_id: Dict[str, Item] = {item.id: item for item in pool}
    accepted = [by_id[item_id] for item_id in filter_aligned(judgements, config.theta, config.m_min)]
    logger.debug(f"User {context.user_id}: {len(accepted)} of {len(pool)} candidates accepted")
    await run_csa(accepted, _user_summary(run.board), judgements, run.backend, config, run.board)

    ranking = await run_ira(
        _user_summary(run.board), _context_summary(run.board), pool, run.backend, config, order, run.board
    )
    return run.finish(ranking)


async def _run_without_nli(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    embedder: Embedder,
    with_csa: bool,
    index: Optional[VectorIndex] = None,
) -> PipelineOutput:
    order = await asyncio.to_thread(retrieval_order, context, pool, catalog, embedder, config, index)
    variant = Variant.ARAG_NO_NLI if with_csa else Variant.ARAG_NO_NLI_NO_CSA
    run = _Run(context, variant, backend, config)
    await run_uua(context, catalog, run.backend, config, run.board)
    context_summary = None
    if with_csa:
        by_id = {item.id: item for item in pool}
        await run_csa([by_id[i] for i in order], _user_summary(run.board), None, run.backend, config, run.board)
        context_summary = _context_summary(run.board)
    ranking = await run_ira(_user_summary(run.board), context_summary, pool, run.backend, config, order, run.board)
    return run.finish(ranking)


def _similar_history(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    embedder: Embedder,
    config: PipelineConfig,
    index: Optional[VectorIndex] = None,
) -> List[Interaction]:
    """History items most similar to the ranking task (the whole pool's metadata)."""
    latest: Dict[str, Interaction] = {}
    for interaction in reversed(context.newest_first()):
        latest[interaction.item_id] = interaction
    if not latest:
        return []
    index = _item_index([catalog[item_id] for item_id in latest], embedder, config, index)
    task = embed_text(embedder, "\n".join(metadata_text(item, config.max_reviews) for item in pool))
    return [latest[item_id] for item_id, _ in retrieve_topk(index, task, config.max_history_items)]


async def run_vanilla_rag(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    embedder: Optional[Embedder] = None,
    index: Optional[VectorIndex] = None,
) -> PipelineOutput:
    """Single LLM call: embedding-retrieved history items plus the candidate list."""
    _check_pool(pool)
    embedder = embedder or HashingEmbedder(config.dim)
    order = await asyncio.to_thread(retrieval_order, context, pool, catalog, embedder, config, index)
    run = _Run(context, Variant.VANILLA_RAG, backend, config)
    history = await asyncio.to_thread(_similar_history, context, pool, catalog, embedder, config, index)
    ranking = await run_history_ranker(history, catalog, pool, run.backend, config, order, run.board)
    return run.finish(ranking)


async def run_recency(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    embedder: Optional[Embedder] = None,
    index: Optional[VectorIndex] = None,
) -> PipelineOutput:
    """Single LLM call: the most recent interactions, unfiltered, plus the candidate list."""
    _check_pool(pool)
    embedder = embedder or HashingEmbedder(config.dim)
    order = await asyncio.to_thread(retrieval_order, context, pool, catalog, embedder, config, index)
    run = _Run(context, Variant.RECENCY, backend, config)
    history = context.newest_first()[:config.max_history_items]
    ranking = await run_history_ranker(history, catalog, pool, run.backend, config, order, run.board)
    return run.finish(ranking)


async def run_variant(
    context: UserContext,
    pool: Sequence[Item],
    catalog: Catalog,
    backend: ChatBackend,
    config: PipelineConfig,
    embedder: Optional[Embedder] = None,
    index: Optional[VectorIndex] = None,
) -> PipelineOutput:
    """Dispatch on config.variant."""
    _check_pool(pool)
    embedder = embedder or HashingEmbedder(config.dim)
    variant = Variant(config.variant)
    if variant is Variant.ARAG:
        return await run_arag(context, pool, catalog, backend, config, embedder, index)
    if variant is Variant.ARAG_NO_NLI:
        return await _run_without_nli(context, pool, catalog, backend, config, embedder, True, index)
    if variant is Variant.ARAG_NO_NLI_NO_CSA:
        return await _run_without_nli(context, pool, catalog, backend, config, embedder, False, index)
    if variant is Variant.VANILLA_RAG:
        return await run_vanilla_rag(context, pool, catalog, backend, config, embedder, index)
    return await run_recency(context, pool, catalog, backend, config, embedder, index)


def ranking_from_board(board: Blackboard) -> List[str]:
    """
    Re-derive the final ranking from a replayed board by re-running stage-3 parsing,
    and check it against the ranking the trace recorded.
    """
    rankers = board.read(AgentRole.ITEM_RANKER)
    if not rankers:
        raise TraceError("Trace has no item_ranker message")
    body = payload(rankers[-1])
    try:
        ranking = parse_ranking(body["raw"], body["candidate_ids"], body["retrieval_order"])
    except (KeyError, TypeError) as e:
        raise TraceError(f"item_ranker payload is incomplete: {e}") from e
    if ranking != body.get("ranking"):
        raise TraceError("Recorded ranking does not match the ranking re-parsed from the raw reply")
    return ranking
