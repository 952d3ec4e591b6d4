# dagster_pipeline/definitions.py

from datetime import datetime, timezone
from pathlib import Path

from dagster import Config, Definitions, OpExecutionContext, job, op

from arag.cli import eval_instances, load_dataset, write_manifest
from arag.config import load_config
from arag.corpus import sample_users
from arag.errors import AragError
from arag.evaluation import format_report, run_experiment
from arag.llm import make_backend

# Default experiment file, relative to the repository root
DEFAULT_CONFIG = Path(__file__).parent.parent / "configs" / "example.yaml"


class BenchmarkConfig(Config):
    config_path: str = str(DEFAULT_CONFIG)
    seed: int = 0


# --- Ops Definitions ---

@op(name="build_contexts_op", description="Loads the catalog and interaction log and holds out each user's last session item.")
def build_contexts(context: OpExecutionContext, config: BenchmarkConfig) -> dict:
    """Returns the experiment settings, the catalog and the evaluation instances."""
    logger = context.log
    started_at = datetime.now(timezone.utc)
    try:
        experiment = load_config(Path(config.config_path), {"seed": config.seed})
        catalog, contexts = load_dataset(experiment)
    except AragError as e:
        logger.error(f"Could not load the dataset: {e}")
        raise
    contexts = sample_users(contexts, experiment.max_users, experiment.pipeline.seed)
    instances = eval_instances(contexts)
    logger.info(f"{len(catalog)} items, {len(contexts)} users, {len(instances)} evaluation instances")
    return {"experiment": experiment, "catalog": catalog, "instances": instances, "started_at": started_at}


@op(name="run_experiment_op", description="Runs every configured variant over the evaluation instances.")
def run_benchmark(context: OpExecutionContext, dataset: dict) -> dict:
    logger = context.log
    experiment = dataset["experiment"]
    backend = make_backend(experiment.backend, experiment.pipeline.concurrency_cap)
    logger.info(f"Running {len(experiment.variants)} variants with the {backend.kind} backend...")
    try:
        result = run_experiment(
            dataset["instances"], experiment.variants, experiment, backend, dataset["catalog"],
            output_dir=experiment.output_dir,
        )
    except AragError as e:
        logger.error(f"Experiment failed: {e}")
        raise
    for name, aggregate in result.aggregates.items():
        logger.info(f"{name}: NDCG@5={aggregate.ndcg:.4f} Hit@5={aggregate.hit:.4f} ({aggregate.failures} failures)")
    return {**dataset, "result": result, "backend_kind": backend.kind}


@op(name="write_report_op", description="Writes the run manifest and logs the benchmark report.")
def write_report(context: OpExecutionContext, run: dict) -> str:
    experiment = run["experiment"]
    manifest = write_manifest("dagster arag_benchmark", experiment, run["backend_kind"], run["started_at"])
    report = format_report({experiment.dataset_name: run["result"].aggregates})
    context.log.info(f"Report:\n{report}")
    context.log.info(f"Manifest written to {manifest}")
    return report


# --- Job Definition ---

@job(name="arag_benchmark", description="Builds user contexts, runs the benchmark variants and writes the report.")
def arag_benchmark():
    write_report(run_benchmark(build_contexts()))


# --- Definition (for Dagster UI) ---
defs = Definitions(
    jobs=[arag_benchmark],
)
