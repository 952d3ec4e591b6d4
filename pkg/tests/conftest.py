# tests/conftest.py

import json
from pathlib import Path
from typing import Dict, List, Sequence

import pytest

from arag.config import ExperimentConfig, PipelineConfig
from arag.corpus import Catalog, build_contexts, write_jsonl
from arag.llm import MockBackend
from arag.schemas import ChatRequest, Interaction, Item, UserContext
from arag.synthetic import make_synthetic, prompt_sections, section_candidates

# --- Small hand-written catalog ---

BAGS = [
    ("b1", "Dasein Hobo Handbag", "Soft faux leather hobo with a zip top.", "handbags"),
    ("b2", "BUTIED Checkered Tote Shoulder Handbag", "Vegan leather tote in a checkered print.", "handbags"),
    ("b3", "Canvas Weekender Duffel", "Roomy canvas duffel with leather trim.", "luggage"),
    ("b4", "Quilted Crossbody Bag", "Small quilted crossbody on a chain strap.", "handbags"),
    ("b5", "Nylon Laptop Backpack", "Padded sleeve for 15 inch laptops.", "backpacks"),
    ("b6", "Straw Beach Tote", "Woven straw tote for summer days.", "handbags"),
    ("b7", "Leather Card Wallet", "Slim wallet with six card slots.", "wallets"),
    ("b8", "Checkered Coin Purse", "Zip coin purse in a checkered vegan leather.", "wallets"),
    ("b9", "Belt Bag", "Hands-free belt bag with adjustable strap.", "handbags"),
    ("b10", "Travel Toiletry Kit", "Water resistant hanging toiletry kit.", "luggage"),
]


def make_item(item_id: str, title: str, description: str = "", category: str = "", reviews: Sequence[str] = ()) -> Item:
    return Item(id=item_id, title=title, description=description, category=category, reviews=tuple(reviews))


def make_context(user_id: str, long_term: Sequence[str] = (), session: Sequence[str] = (), start: int = 1_000) -> UserContext:
    """Long-term items one day apart, then session items one minute apart."""
    clock = start
    lt, st = [], []
    for item_id in long_term:
        lt.append(Interaction(user_id=user_id, item_id=item_id, timestamp=clock, rating=4.0))
        clock += 86_400
    for item_id in session:
        st.append(Interaction(user_id=user_id, item_id=item_id, timestamp=clock))
        clock += 60
    return UserContext(user_id=user_id, long_term=tuple(lt), session=tuple(st))


@pytest.fixture
def bag_catalog() -> Catalog:
    return Catalog(
        make_item(i, t, d, c, reviews=[f"Review of {t}"]) for i, t, d, c in BAGS
    )


@pytest.fixture
def bag_context() -> UserContext:
    return make_context("u1", long_term=["b7", "b3"], session=["b8", "b4"])


@pytest.fixture
def bag_pool(bag_catalog) -> List[Item]:
    return [bag_catalog[i] for i in ("b1", "b2", "b5")]


@pytest.fixture
def pipeline_config() -> PipelineConfig:
    return PipelineConfig(k=10, candidate_pool_size=3, m_min=3, concurrency_cap=4)


# --- Mock responders ---

def candidate_ids(request: ChatRequest) -> List[str]:
    prompt = next(m.content for m in request.messages if m.role == "user")
    return [item_id for item_id, _ in section_candidates(prompt_sections(prompt).get("Candidate items", ""))]


class ScriptedAgents:
    """Responder answering each role with fixed text; rankers echo the candidate order unless told otherwise."""

    def __init__(self, nli: Dict[str, float] = None, ranking: List[str] = None, summary: str = "likes vegan leather bags"):
        self.nli = nli or {}
        self.ranking = ranking
        self.summary = summary
        self.calls: List[ChatRequest] = []

    def __call__(self, request: ChatRequest) -> str:
        self.calls.append(request)
        role = request.agent_role
        if role == "user_understanding":
            return self.summary
        if role == "nli":
            prompt = next(m.content for m in request.messages if m.role == "user")
            item = section_candidates(prompt_sections(prompt)["Candidate item"])[0][0]
            return json.dumps({"score": self.nli.get(item, 0.0), "rationale": "scripted"})
        if role == "context_summary":
            return "user favors checkered totes"
        return json.dumps(self.ranking if self.ranking is not None else candidate_ids(request))


@pytest.fixture
def scripted():
    return ScriptedAgents(nli={"b1": 0.2, "b2": 0.9, "b5": 0.1})


@pytest.fixture
def scripted_backend(scripted) -> MockBackend:
    return MockBackend(responder=scripted)


# --- Synthetic benchmark data ---

@pytest.fixture(scope="session")
def synthetic_small():
    """(catalog, contexts) for 30 synthetic users."""
    items, log = make_synthetic(users=30, seed=7)
    catalog = Catalog(items)
    return catalog, build_contexts(log, 3600, catalog)


@pytest.fixture
def synthetic_files(tmp_path) -> Dict[str, Path]:
    items, log = make_synthetic(users=12, seed=3)
    write_jsonl(tmp_path / "data" / "catalog.jsonl", items)
    write_jsonl(tmp_path / "data" / "interactions.jsonl", log)
    return {"catalog": tmp_path / "data" / "catalog.jsonl", "interactions": tmp_path / "data" / "interactions.jsonl"}


@pytest.fixture
def experiment_config(synthetic_files, tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        dataset_name="synthetic",
        catalog_path=synthetic_files["catalog"],
        interactions_path=synthetic_files["interactions"],
        output_dir=tmp_path / "runs",
        pipeline=PipelineConfig(candidate_pool_size=10, k=20),
    )
