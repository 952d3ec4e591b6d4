# arag/cli.py

import argparse
import asyncio
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from . import __version__
from .blackboard import read_trace, write_trace, replay
from .config import ExperimentConfig, configure_logging, load_config
from .corpus import (
    Catalog,
    build_contexts,
    file_digest,
    holdout_split,
    load_catalog,
    load_interactions,
    sample_users,
    write_jsonl,
)
from .embed import Embedder, RemoteEmbedder, build_index, make_embedder
from .errors import (
    AragError,
    BackendError,
    ConfigError,
    CorpusError,
    DataError,
    EmbeddingError,
    FailureLimitExceeded,
    TraceError,
)
from .evaluation import (
    build_candidate_pool,
    format_report,
    load_summary,
    run_experiment,
    safe_name,
)
from .llm import make_backend
from .pipeline import ranking_from_board, run_variant
from .schemas import EvalInstance, RunManifest, UserContext, Variant

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3
EXIT_FAILURES = 4


class ArgumentParser(argparse.ArgumentParser):
    """argparse reports usage errors with exit status 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- Helpers ---

def load_dataset(config: ExperimentConfig) -> Tuple[Catalog, List[UserContext]]:
    catalog = load_catalog(config.catalog_path)
    contexts = build_contexts(load_interactions(config.interactions_path), config.pipeline.session_gap, catalog)
    return catalog, contexts


def eval_instances(contexts: Sequence[UserContext]) -> List[EvalInstance]:
    instances = []
    for context in contexts:
        try:
            instances.append(holdout_split(context))
        except CorpusError as e:
            logger.warning(f"Skipping user {context.user_id}: {e}")
    return instances


def _vector_cache(config: ExperimentConfig, embedder: Embedder) -> Optional[Path]:
    if isinstance(embedder, RemoteEmbedder):
        return Path(config.output_dir) / "item_vectors.jsonl"
    return None


def write_manifest(command: str, config: ExperimentConfig, backend_kind: str, started_at: datetime) -> Path:
    digests: Dict[str, str] = {}
    for path in (config.catalog_path, config.interactions_path):
        if Path(path).exists():
            digests[Path(path).name] = file_digest(path)
    manifest = RunManifest(
        command=command,
        config=config.snapshot(),
        dataset_digests=digests,
        backend_kind=backend_kind,
        version=__version__,
        started_at=started_at,
        finished_at=datetime.now(timezone.utc),
    )
    path = Path(config.output_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


# --- Commands ---

def cmd_ingest(catalog_path: Path, interactions_path: Path, out_dir: Path, session_gap: int = 3600) -> Tuple[int, str]:
    """Build the user context store and report how many contexts it holds."""
    catalog = load_catalog(catalog_path)
    contexts = build_contexts(load_interactions(interactions_path), session_gap, catalog)
    digest = write_jsonl(Path(out_dir) / "contexts.jsonl", contexts)
    print(f"{len(contexts)} contexts")
    print(f"store: {Path(out_dir) / 'contexts.jsonl'} sha256={digest}")
    return len(contexts), digest


def cmd_run(user_id: str, config: ExperimentConfig) -> Tuple[List[str], Path]:
    """Rank one user's held-out candidate pool with the configured variant."""
    started_at = datetime.now(timezone.utc)
    catalog, contexts = load_dataset(config)
    context = next((c for c in contexts if c.user_id == user_id), None)
    if context is None:
        raise DataError(f"Unknown user '{user_id}'")
    instance = holdout_split(context)

    pipeline = config.pipeline
    embedder = make_embedder(pipeline.dim)
    index = build_index(catalog, embedder, pipeline.max_reviews, _vector_cache(config, embedder))
    pool = build_candidate_pool(
        instance, catalog, index, pipeline.candidate_pool_size, pipeline.seed, embedder,
        k=pipeline.k, max_history_items=pipeline.max_history_items, max_reviews=pipeline.max_reviews,
        open_catalog=config.open_catalog,
    )
    backend = make_backend(config.backend, pipeline.concurrency_cap)
    output = asyncio.run(run_variant(instance.context, pool, catalog, backend, pipeline, embedder, index))

    trace_path = write_trace(
        replay(output.board_trace),
        Path(config.output_dir) / "traces" / pipeline.variant.value / f"{safe_name(user_id)}.jsonl",
    )
    write_manifest(f"run {user_id}", config, backend.kind, started_at)

    ranking = list(output.ranking.item_ids)
    print(f"user {user_id} ({pipeline.variant.value}), held out {instance.ground_truth}")
    for rank, item_id in enumerate(ranking, start=1):
        print(f"{rank:>3}. {item_id} {catalog[item_id].title}")
    print(f"trace: {trace_path}")
    return ranking, trace_path


def cmd_eval(config: ExperimentConfig) -> Path:
    """Run every configured variant over the sampled users; writes summary.json and report.md."""
    started_at = datetime.now(timezone.utc)
    catalog, contexts = load_dataset(config)
    contexts = sample_users(contexts, config.max_users, config.pipeline.seed)
    instances = eval_instances(contexts)
    if not instances:
        raise DataError("No evaluable users in the dataset")

    embedder = make_embedder(config.pipeline.dim)
    index = build_index(catalog, embedder, config.pipeline.max_reviews, _vector_cache(config, embedder))
    backend = make_backend(config.backend, config.pipeline.concurrency_cap)
    output_dir = Path(config.output_dir)
    try:
        run_experiment(instances, config.variants, config, backend, catalog, index, embedder, output_dir)
    finally:
        write_manifest("eval", config, backend.kind, started_at)
    print((output_dir / "report.md").read_text(encoding="utf-8"), end="")
    return output_dir / "summary.json"


def cmd_replay(trace_path: Path) -> List[str]:
    """Re-derive and print the final ranking recorded in a trace file."""
    trace_path = Path(trace_path)
    if trace_path.exists() and not trace_path.read_text(encoding="utf-8").strip():
        raise TraceError(f"Trace file is empty: {trace_path}", offset=0)
    ranking = ranking_from_board(read_trace(trace_path))
    for rank, item_id in enumerate(ranking, start=1):
        print(f"{rank:>3}. {item_id}")
    return ranking


def cmd_report(summary_paths: Sequence[Path], out_path: Optional[Path] = None, published_path: Optional[Path] = None) -> str:
    """Merge several summary.json files into one report, one column pair per dataset."""
    datasets = {}
    for path in summary_paths:
        summary = load_summary(path)
        datasets[summary.get("dataset", Path(path).parent.name)] = summary["variants"]
    published = None
    if published_path is not None:
        try:
            published = yaml.safe_load(Path(published_path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"Could not read published cells from {published_path}: {e}") from e
    report = format_report(datasets, published)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report, encoding="utf-8")
    print(report, end="")
    return report


# --- Entry point ---

def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", choices=["remote", "mock", "replay", "record"])
    common.add_argument("--variant", choices=[v.value for v in Variant])
    common.add_argument("--pool-size", type=int, dest="pool_size")
    common.add_argument("--k", type=int)
    common.add_argument("--theta", type=float)
    common.add_argument("--cassette", type=Path, help="cassette file for the record and replay backends")
    common.add_argument("--output-dir", type=Path, dest="output_dir")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    parser = ArgumentParser(prog="arag", description="Agentic RAG recommendation benchmark")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    ingest = commands.add_parser("ingest", parents=[common], help="build user contexts from a catalog and log")
    ingest.add_argument("--catalog", type=Path)
    ingest.add_argument("--interactions", type=Path)
    ingest.add_argument("--out-dir", type=Path, dest="out_dir")

    run = commands.add_parser("run", parents=[common], help="rank one user's candidate pool")
    run.add_argument("user_id")

    commands.add_parser("eval", parents=[common], help="run the benchmark over all variants")

    replay_cmd = commands.add_parser("replay", parents=[common], help="re-print the ranking stored in a trace")
    replay_cmd.add_argument("trace", type=Path)

    report = commands.add_parser("report", parents=[common], help="merge summary.json files into one report")
    report.add_argument("summaries", type=Path, nargs="+")
    report.add_argument("--out", type=Path)
    report.add_argument("--published", type=Path, help="YAML of published improvement cells to reconcile against")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("arag.log", verbose=args.verbose)
    overrides = {name: getattr(args, name) for name in
                 ("seed", "variant", "pool_size", "k", "theta", "backend", "cassette", "output_dir")}
    try:
        if args.command == "replay":
            cmd_replay(args.trace)
        elif args.command == "report":
            cmd_report(args.summaries, args.out, args.published)
        else:
            config = load_config(args.config, overrides)
            if args.command == "ingest":
                cmd_ingest(
                    args.catalog or config.catalog_path,
                    args.interactions or config.interactions_path,
                    args.out_dir or config.output_dir,
                    config.pipeline.session_gap,
                )
            elif args.command == "run":
                cmd_run(args.user_id, config)
            else:
                cmd_eval(config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except (BackendError, EmbeddingError) as e:
        logger.error(f"Backend error: {e}")
        return EXIT_BACKEND
    except FailureLimitExceeded as e:
        logger.error(str(e))
        return EXIT_FAILURES
    except AragError as e:
        logger.error(f"Unexpected error: {e}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
