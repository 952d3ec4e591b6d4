# arag/config.py

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from .errors import ConfigError
from .schemas import Variant

# Load environment variables from the project root's .env file
load_dotenv(dotenv_path=Path(__file__).parent.parent / '.env')

OPENAI_API_KEY = os.getenv("OPENAI_API_KEY")
BASE_URL = os.getenv("ARAG_BASE_URL", "https://api.openai.com/v1")
EMBEDDING_URL = os.getenv("ARAG_EMBEDDING_URL")
LOG_DIR = Path(os.getenv("ARAG_LOG_DIR", "logs"))

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def configure_logging(log_name: str, verbose: bool = False) -> logging.Logger:
    """Route package logs to logs/<log_name> and to stderr."""
    LOG_DIR.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(LOG_DIR / log_name),
            logging.StreamHandler()
        ],
        force=True
    )
    return logging.getLogger("arag")


# --- Settings models ---

class MaxTokens(BaseModel):
    user_understanding: int = 256
    nli: int = 128
    context_summary: int = 512
    item_ranker: int = 512
    baseline: int = 512


class PipelineConfig(BaseModel):
    k: int = Field(default=50, ge=1)
    theta: float = Field(default=0.5, ge=0.0, le=1.0)
    m_min: int = Field(default=3, ge=0)
    candidate_pool_size: int = Field(default=20, ge=1)
    max_history_items: int = Field(default=10, ge=1)
    variant: Variant = Variant.ARAG
    seed: int = 0
    concurrency_cap: int = Field(default=4, ge=1)
    session_gap: int = Field(default=3600, gt=0)
    max_reviews: int = Field(default=3, ge=0)
    dim: int = Field(default=256, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)
    model_tag: str = "gpt-3.5-turbo-0125"
    max_tokens: MaxTokens = Field(default_factory=MaxTokens)
    # Directory of prompt template files; the packaged templates when unset
    prompt_dir: Optional[Path] = None

    @model_validator(mode="after")
    def _pool_fits_recall(self) -> "PipelineConfig":
        if self.k < self.candidate_pool_size:
            raise ValueError(f"k ({self.k}) must be >= candidate_pool_size ({self.candidate_pool_size})")
        return self


class BackendConfig(BaseModel):
    kind: Literal["remote", "mock", "replay", "record"] = "mock"
    # Backend whose answers a "record" run captures
    record_source: Literal["remote", "mock"] = "remote"
    cassette_path: Optional[Path] = None
    # Cassette-format script for the mock backend; the overlap agents answer anything unscripted.
    script_path: Optional[Path] = None
    strict: bool = False
    max_attempts: int = Field(default=3, ge=1)
    backoff_seconds: float = Field(default=1.0, ge=0.0)
    timeout_seconds: float = Field(default=60.0, gt=0.0)


class ExperimentConfig(BaseModel):
    dataset_name: str = "dataset"
    catalog_path: Path = Path("data/catalog.jsonl")
    interactions_path: Path = Path("data/interactions.jsonl")
    output_dir: Path = Path("runs/latest")
    variants: List[Variant] = Field(default_factory=lambda: list(Variant))
    max_users: Optional[int] = Field(default=None, ge=1)
    failure_limit: float = Field(default=0.1, ge=0.0, le=1.0)
    user_concurrency: int = Field(default=4, ge=1)
    open_catalog: bool = False
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)

    def snapshot(self) -> Dict[str, Any]:
        """JSON-safe copy of the settings; holds no secrets."""
        return self.model_dump(mode="json")


# Flag name -> dotted path inside ExperimentConfig
OVERRIDE_PATHS = {
    "seed": "pipeline.seed",
    "variant": "pipeline.variant",
    "pool_size": "pipeline.candidate_pool_size",
    "k": "pipeline.k",
    "theta": "pipeline.theta",
    "backend": "backend.kind",
    "cassette": "backend.cassette_path",
    "output_dir": "output_dir",
}


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a YAML experiment file (or defaults) and apply flag overrides."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Could not parse {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        # Relative data paths are resolved against the config file's directory
        for key in ("catalog_path", "interactions_path", "output_dir"):
            if key in raw and not Path(raw[key]).is_absolute():
                raw[key] = str(path.parent / raw[key])

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        target = raw
        *parents, leaf = OVERRIDE_PATHS[name].split(".")
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = str(value) if isinstance(value, Path) else value

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
