# arag/evaluation.py

import asyncio
import hashlib
import json
import logging
import math
import re
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .config import ExperimentConfig
from .corpus import Catalog
from .embed import DEFAULT_K, Embedder, HashingEmbedder, VectorIndex, build_index, embed_user, retrieve_topk
from .errors import AragError, DataError, FailureLimitExceeded, PoolError
from .llm import ChatBackend
from .pipeline import run_variant
from .schemas import EvalInstance, EvalResult, Item, UserRecord, Variant, VariantAggregate

logger = logging.getLogger(__name__)

METRIC_K = 5
BASELINES = (Variant.RECENCY, Variant.VANILLA_RAG)
# Ablation rows from the weakest configuration to the full system
ABLATION_LADDER = (Variant.VANILLA_RAG, Variant.ARAG_NO_NLI_NO_CSA, Variant.ARAG_NO_NLI, Variant.ARAG)
ROW_LABELS = {
    Variant.RECENCY: "Recency-based",
    Variant.VANILLA_RAG: "Vanilla RAG",
    Variant.ARAG_NO_NLI_NO_CSA: "ARAG w/o NLI & CSA",
    Variant.ARAG_NO_NLI: "ARAG w/o NLI",
    Variant.ARAG: "ARAG",
}


# --- Metrics ---

def rank_of(ranking: Sequence[str], ground_truth: str) -> Optional[int]:
    """1-indexed position of the ground truth, None when absent."""
    try:
        return list(ranking).index(ground_truth) + 1
    except ValueError:
        return None


def _checked_rank(ranking: Sequence[str], ground_truth: str, k: int, missing: Optional[Counter]) -> Optional[int]:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rank = rank_of(ranking, ground_truth)
    if rank is None:
        logger.warning(f"Ground truth {ground_truth} absent from ranking; scored as a miss")
        if missing is not None:
            missing["ground_truth_absent"] += 1
    return rank


def ndcg_at_k(ranking: Sequence[str], ground_truth: str, k: int = METRIC_K, missing: Optional[Counter] = None) -> float:
    """Binary NDCG with a single relevant item: 1/log2(rank+1) within the cutoff, else 0."""
    rank = _checked_rank(ranking, ground_truth, k, missing)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def hit_at_k(ranking: Sequence[str], ground_truth: str, k: int = METRIC_K, missing: Optional[Counter] = None) -> int:
    rank = _checked_rank(ranking, ground_truth, k, missing)
    return int(rank is not None and rank <= k)


# --- Candidate pools ---

def user_seed(master_seed: int, user_id: str) -> int:
    """Per-user seed derived from the master seed, stable across user subsets."""
    digest = hashlib.sha256(f"{master_seed}:{user_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def build_candidate_pool(
    instance: EvalInstance,
    catalog: Catalog,
    index: VectorIndex,
    pool_size: int,
    seed: int,
    embedder: Optional[Embedder] = None,
    k: int = DEFAULT_K,
    max_history_items: int = 10,
    max_reviews: int = 3,
    open_catalog: bool = False,
) -> List[Item]:
    """
    Closed pool: the ground truth plus pool_size - 1 negatives.

    Negatives are the user's nearest items by embedding (history and ground truth
    excluded), padded by seeded uniform sampling when retrieval comes up short.
    The pool is shuffled with the per-user seed so its order carries no hint.

    With open_catalog the pool is the recall set itself (history excluded), and the
    ground truth is present only if retrieval found it.
    """
    context = instance.context
    rng = np.random.default_rng(user_seed(seed, context.user_id))
    embedder = embedder or HashingEmbedder(index.dim)
    query = embed_user(context, catalog, embedder, max_history_items, max_reviews)
    history = context.item_ids()

    if open_catalog:
        recalled = [item_id for item_id, _ in retrieve_topk(index, query, k + len(history))]
        pool_ids = [item_id for item_id in recalled if item_id not in history][:k]
        if not pool_ids:
            raise PoolError(f"Recall set for user {context.user_id} is empty")
    else:
        if pool_size < 2:
            raise PoolError(f"pool_size must be >= 2, got {pool_size}")
        if len(catalog) < pool_size:
            raise PoolError(f"Catalog has {len(catalog)} items, fewer than pool_size {pool_size}")
        if instance.ground_truth not in catalog:
            raise PoolError(f"Ground truth {instance.ground_truth} is not in the catalog")
        excluded = history | {instance.ground_truth}
        # Over-fetch so that dropping history items still leaves enough negatives
        recalled = retrieve_topk(index, query, max(k, pool_size) + len(excluded))
        negatives = [item_id for item_id, _ in recalled if item_id not in excluded][:pool_size - 1]
        if len(negatives) < pool_size - 1:
            chosen = set(negatives)
            remaining = sorted(i for i in catalog.ids() if i not in excluded and i not in chosen)
            needed = pool_size - 1 - len(negatives)
            if len(remaining) < needed:
                raise PoolError(f"Not enough negatives for user {context.user_id}: need {needed}, have {len(remaining)}")
            picks = rng.choice(len(remaining), size=needed, replace=False)
            negatives.extend(remaining[i] for i in sorted(picks))
        pool_ids = [instance.ground_truth] + negatives

    order = rng.permutation(len(pool_ids))
    return [catalog[pool_ids[i]] for i in order]


def pool_digest(pool: Sequence[Item]) -> str:
    return hashlib.sha256("\n".join(item.id for item in pool).encode("utf-8")).hexdigest()


# --- Aggregation ---

def aggregate(records: Iterable[UserRecord], variants: Sequence[Variant]) -> Dict[str, VariantAggregate]:
    """Means over successful users per variant, folded in canonical record order."""
    by_variant: Dict[Variant, List[UserRecord]] = {Variant(v): [] for v in variants}
    for record in sorted(records, key=lambda r: (r.user_id, r.variant.value)):
        by_variant.setdefault(record.variant, []).append(record)
    aggregates = {}
    for variant, rows in by_variant.items():
        ok = [r for r in rows if r.error is None]
        aggregates[variant.value] = VariantAggregate(
            variant=variant,
            ndcg=float(np.mean([r.ndcg for r in ok])) if ok else 0.0,
            hit=float(np.mean([r.hit for r in ok])) if ok else 0.0,
            users=len(ok),
            failures=len(rows) - len(ok),
            missing_ground_truth=sum(1 for r in ok if r.rank is None),
        )
    return aggregates


def improvement_over_best_baseline(arag_value: float, baseline_values: Iterable[float]) -> float:
    """Percent improvement over the strongest baseline, rounded to 2 decimals; NaN if that baseline is 0."""
    best = max(baseline_values)
    if best <= 0:
        return math.nan
    return round(100.0 * (arag_value - best) / best, 2)


def relative_gain(value: float, reference: float) -> float:
    """Percent gain over a reference row, rounded to 1 decimal as gains are quoted in prose."""
    if reference <= 0:
        return math.nan
    return round(100.0 * (value - reference) / reference, 1)


def format_percent(value: float, decimals: int = 2) -> str:
    if value is None or math.isnan(value):
        return "n/a"
    return f"{value:.{decimals}f}%"


def _metrics(value: Any) -> Dict[str, float]:
    if isinstance(value, BaseModel):
        value = value.model_dump()
    return {"ndcg": float(value["ndcg"]), "hit": float(value["hit"])}


def improvement_cells(variants: Mapping[str, Any]) -> Optional[Dict[str, float]]:
    """{'ndcg', 'hit'} improvement of ARAG over the best available baseline."""
    if Variant.ARAG.value not in variants:
        return None
    baselines = [_metrics(variants[b.value]) for b in BASELINES if b.value in variants]
    if not baselines:
        return None
    arag = _metrics(variants[Variant.ARAG.value])
    return {
        metric: improvement_over_best_baseline(arag[metric], [b[metric] for b in baselines])
        for metric in ("ndcg", "hit")
    }


def ablation_gains(variants: Mapping[str, Any]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """
    Gains of each ablation row, per metric, over vanilla RAG and over the row
    before it on the ladder vanilla -> w/o NLI & CSA -> w/o NLI -> ARAG.
    """
    present = [v for v in ABLATION_LADDER if v.value in variants]
    gains: Dict[str, Dict[str, Dict[str, float]]] = {"over_vanilla": {}, "over_previous": {}}
    for previous, current in zip(present, present[1:]):
        now, before = _metrics(variants[current.value]), _metrics(variants[previous.value])
        gains["over_previous"][current.value] = {m: relative_gain(now[m], before[m]) for m in ("ndcg", "hit")}
        if Variant.VANILLA_RAG in present:
            vanilla = _metrics(variants[Variant.VANILLA_RAG.value])
            gains["over_vanilla"][current.value] = {m: relative_gain(now[m], vanilla[m]) for m in ("ndcg", "hit")}
    return gains


# --- Report ---

def reconcile_improvements(
    datasets: Mapping[str, Mapping[str, Any]],
    published: Mapping[str, Mapping[str, float]],
) -> List[str]:
    """Compare computed improvement cells with published ones; every mismatch is returned and logged."""
    mismatches = []
    for dataset, cells in published.items():
        computed = improvement_cells(datasets.get(dataset, {}))
        if computed is None:
            continue
        for metric, expected in cells.items():
            got = format_percent(computed[metric])
            want = format_percent(expected)
            if got != want:
                note = f"{dataset} {metric}: computed {got} but published {want}"
                logger.warning(f"Improvement cell mismatch: {note}")
                mismatches.append(note)
    return mismatches


def _cell(variants: Mapping[str, Any], variant: Variant, metric: str) -> str:
    if variant.value not in variants:
        return "-"
    return f"{_metrics(variants[variant.value])[metric]:.4f}"


def format_report(
    datasets: Mapping[str, Mapping[str, Any]],
    published: Optional[Mapping[str, Mapping[str, float]]] = None,
) -> str:
    """
    Markdown report laid out like the benchmark table: a benchmark block
    (recency, vanilla RAG, ARAG, % improvement) and an ablation block, with one
    NDCG@5 / Hit@5 column pair per dataset.
    """
    names = list(datasets)
    header = "| Model | " + " | ".join(f"{n} NDCG@{METRIC_K} | {n} Hit@{METRIC_K}" for n in names) + " |"
    rule = "|---|" + "---|---|" * len(names)

    def row(label: str, cells: List[str]) -> str:
        return f"| {label} | " + " | ".join(cells) + " |"

    def variant_row(variant: Variant) -> str:
        cells = []
        for n in names:
            cells += [_cell(datasets[n], variant, "ndcg"), _cell(datasets[n], variant, "hit")]
        return row(ROW_LABELS[variant], cells)

    improvement = []
    for n in names:
        cells = improvement_cells(datasets[n])
        improvement += [format_percent(cells["ndcg"]), format_percent(cells["hit"])] if cells else ["-", "-"]

    lines = ["## Benchmark", "", header, rule]
    lines += [variant_row(v) for v in (Variant.RECENCY, Variant.VANILLA_RAG, Variant.ARAG)]
    lines.append(row("% Improvement", improvement))
    lines += ["", "## Ablation", "", header, rule]
    lines += [variant_row(v) for v in ABLATION_LADDER]

    notes = reconcile_improvements(datasets, published) if published else []
    if notes:
        lines += ["", "## Notes", ""]
        lines += [f"- {note}" for note in notes]
    return "\n".join(lines) + "\n"


def _finite(value: Any) -> Any:
    """NaN cells become null so summary.json stays strict JSON."""
    if isinstance(value, dict):
        return {key: _finite(v) for key, v in value.items()}
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def summary_document(dataset: str, result: EvalResult) -> Dict[str, Any]:
    """summary.json content: aggregates, improvement and ablation rows, and the per-user records."""
    return {
        "dataset": dataset,
        "k": result.k,
        "variants": {name: agg.model_dump(mode="json") for name, agg in result.aggregates.items()},
        "improvement": _finite(improvement_cells(result.aggregates)),
        "ablation_gains": _finite(ablation_gains(result.aggregates)),
        "records": [r.model_dump(mode="json") for r in result.records],
    }


def dump_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_summary(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Summary file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Could not parse {path}: {e}") from e


# --- Experiment runner ---

def safe_name(user_id: str) -> str:
    """File-system safe rendering of a user id."""
    return re.sub(r"[^\w.-]", "_", user_id)


def _write_user_outputs(output_dir: Path, instance: EvalInstance, pool: Sequence[Item], output) -> None:
    name = safe_name(instance.context.user_id)
    variant = output.variant.value
    trace_path = output_dir / "traces" / variant / f"{name}.jsonl"
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    trace_path.write_text(output.board_trace, encoding="utf-8")
    ranking_path = output_dir / "rankings" / variant / f"{name}.json"
    ranking_path.parent.mkdir(parents=True, exist_ok=True)
    ranking_path.write_text(dump_json({
        "user_id": instance.context.user_id,
        "variant": variant,
        "ground_truth": instance.ground_truth,
        "pool": [item.id for item in pool],
        "ranking": list(output.ranking.item_ids),
    }), encoding="utf-8")


async def _evaluate_user(
    instance: EvalInstance,
    variants: Sequence[Variant],
    config: ExperimentConfig,
    backend: ChatBackend,
    catalog: Catalog,
    index: VectorIndex,
    embedder: Embedder,
    output_dir: Optional[Path],
    k: int,
) -> List[UserRecord]:
    user_id = instance.context.user_id
    pipeline = config.pipeline
    try:
        pool = build_candidate_pool(
            instance, catalog, index, pipeline.candidate_pool_size, pipeline.seed, embedder,
            k=pipeline.k, max_history_items=pipeline.max_history_items, max_reviews=pipeline.max_reviews,
            open_catalog=config.open_catalog,
        )
    except AragError as e:
        logger.error(f"Could not build a candidate pool for user {user_id}: {e}")
        return [UserRecord(user_id=user_id, variant=v, error=str(e)) for v in variants]

    digest = pool_digest(pool)
    records = []
    for variant in variants:
        try:
            variant_config = pipeline.model_copy(update={"variant": variant})
            output = await run_variant(instance.context, pool, catalog, backend, variant_config, embedder, index)
        except AragError as e:
            logger.error(f"User {user_id} failed under {variant.value}: {e}")
            records.append(UserRecord(user_id=user_id, variant=variant, pool_digest=digest, error=str(e)))
            continue
        ranking = output.ranking.item_ids
        records.append(UserRecord(
            user_id=user_id,
            variant=variant,
            rank=rank_of(ranking, instance.ground_truth),
            ndcg=ndcg_at_k(ranking, instance.ground_truth, k),
            hit=hit_at_k(ranking, instance.ground_truth, k),
            pool_digest=digest,
        ))
        if output_dir is not None:
            _write_user_outputs(output_dir, instance, pool, output)
    return records


async def evaluate(
    instances: Sequence[EvalInstance],
    variants: Sequence[Variant],
    config: ExperimentConfig,
    backend: ChatBackend,
    catalog: Catalog,
    index: Optional[VectorIndex] = None,
    embedder: Optional[Embedder] = None,
    output_dir: Optional[Path] = None,
    k: int = METRIC_K,
) -> EvalResult:
    """Score every instance under every variant; users run concurrently up to user_concurrency."""
    variants = [Variant(v) for v in variants]
    embedder = embedder or HashingEmbedder(config.pipeline.dim)
    if index is None:
        index = build_index(catalog, embedder, config.pipeline.max_reviews)
    slots = asyncio.Semaphore(config.user_concurrency)
    done = 0

    async def one(instance: EvalInstance) -> List[UserRecord]:
        nonlocal done
        async with slots:
            records = await _evaluate_user(instance, variants, config, backend, catalog, index, embedder, output_dir, k)
        done += 1
        if done % 50 == 0 or done == len(instances):
            logger.info(f"Evaluated {done}/{len(instances)} users")
        return records

    batches = await asyncio.gather(*[one(instance) for instance in instances])
    order = {v: n for n, v in enumerate(variants)}
    records = sorted((r for batch in batches for r in batch), key=lambda r: (r.user_id, order[r.variant]))
    return EvalResult(k=k, records=tuple(records), aggregates=aggregate(records, variants))


def run_experiment(
    instances: Sequence[EvalInstance],
    variants: Sequence[Variant],
    config: ExperimentConfig,
    backend: ChatBackend,
    catalog: Catalog,
    index: Optional[VectorIndex] = None,
    embedder: Optional[Embedder] = None,
    output_dir: Optional[Path] = None,
    k: int = METRIC_K,
) -> EvalResult:
    """
    Run the benchmark and, when output_dir is given, write traces/, rankings/,
    summary.json and report.md there.

    Raises FailureLimitExceeded after the outputs are written if the fraction of
    failed (user, variant) runs is above config.failure_limit.
    """
    output_dir = Path(output_dir) if output_dir is not None else None
    logger.info(f"Evaluating {len(instances)} users x {len(variants)} variants with the {backend.kind} backend")
    result = asyncio.run(evaluate(instances, variants, config, backend, catalog, index, embedder, output_dir, k))

    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "summary.json").write_text(dump_json(summary_document(config.dataset_name, result)), encoding="utf-8")
        (output_dir / "report.md").write_text(format_report({config.dataset_name: result.aggregates}), encoding="utf-8")
        logger.info(f"Wrote summary and report to {output_dir}")

    failures = sum(1 for r in result.records if r.error is not None)
    fraction = failures / len(result.records) if result.records else 0.0
    if fraction > config.failure_limit:
        logger.error(f"{failures} of {len(result.records)} runs failed")
        raise FailureLimitExceeded(fraction, config.failure_limit)
    return result
