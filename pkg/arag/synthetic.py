# arag/synthetic.py

import json
import logging
from pathlib import Path
from typing import Dict, List, Set, Tuple

import numpy as np

from .agents import EMPTY_SECTION, NOT_AVAILABLE
from .corpus import write_jsonl
from .embed import tokenize
from .schemas import ChatRequest, Interaction, Item

logger = logging.getLogger(__name__)

STYLES = ("vintage", "modern", "rustic", "minimal", "classic", "urban", "coastal", "nordic")
CATEGORIES = ("lamp", "chair", "table", "rug", "vase", "clock", "mirror", "shelf")
MODELS_PER_PAIR = 3

DESCRIPTIONS = (
    "Sturdy build and easy care.",
    "Ships ready to use out of the box.",
    "Finished by hand in small batches.",
    "Backed by a two year warranty.",
)
REVIEWS = (
    "Arrived quickly and works well.",
    "Good value for the price.",
    "Exactly as pictured.",
    "Would buy again.",
)

DAY = 86_400
BASE_TIME = 1_600_000_000


# --- Dataset generator ---

def _item(style: str, category: str, model: int) -> Item:
    code = f"{style[:2]}{category[:2]}{model}".upper()
    n = STYLES.index(style) + CATEGORIES.index(category) + model
    return Item(
        id=f"{style}-{category}-{model}",
        title=f"{style.title()} {category.title()} {code}",
        description=DESCRIPTIONS[n % len(DESCRIPTIONS)],
        reviews=(REVIEWS[n % len(REVIEWS)], REVIEWS[(n + 1) % len(REVIEWS)]),
        category=category,
    )


def synthetic_catalog() -> List[Item]:
    """Every style x category pair in MODELS_PER_PAIR models; titles are 'Style Category CODE'."""
    return [
        _item(style, category, model)
        for style in STYLES
        for category in CATEGORIES
        for model in range(1, MODELS_PER_PAIR + 1)
    ]


def make_synthetic(users: int = 100, seed: int = 0, long_term_items: int = 4) -> Tuple[List[Item], List[Interaction]]:
    """
    Users with a hidden (style, category) intent.

    Each user has long_term_items purchases from other pairs, days apart, then a
    session holding every model of the intent pair, minutes apart. The last
    session item is what leave-last-out holds out.
    """
    rng = np.random.default_rng(seed)
    pairs = [(s, c) for s in STYLES for c in CATEGORIES]
    log: List[Interaction] = []
    for u in range(users):
        user_id = f"u{u:05d}"
        intent = pairs[rng.integers(len(pairs))]
        others = [p for p in pairs if p != intent]
        clock = BASE_TIME + u * DAY
        for n in rng.choice(len(others), size=long_term_items, replace=False):
            style, category = others[n]
            model = int(rng.integers(1, MODELS_PER_PAIR + 1))
            clock += 2 * DAY
            log.append(Interaction(
                user_id=user_id,
                item_id=f"{style}-{category}-{model}",
                timestamp=clock,
                rating=float(rng.integers(3, 6)),
            ))
        clock += DAY
        for model in rng.permutation(MODELS_PER_PAIR) + 1:
            clock += 600
            log.append(Interaction(
                user_id=user_id,
                item_id=f"{intent[0]}-{intent[1]}-{model}",
                timestamp=clock,
                rating=float(rng.integers(4, 6)),
            ))
    return synthetic_catalog(), log


def write_synthetic(out_dir: Path, users: int = 100, seed: int = 0) -> Dict[str, str]:
    """Write catalog.jsonl and interactions.jsonl; returns their SHA-256 digests."""
    catalog, log = make_synthetic(users, seed)
    out_dir = Path(out_dir)
    digests = {
        "catalog.jsonl": write_jsonl(out_dir / "catalog.jsonl", catalog),
        "interactions.jsonl": write_jsonl(out_dir / "interactions.jsonl", log),
    }
    logger.info(f"Wrote {len(catalog)} items and {len(log)} interactions for {users} users to {out_dir}")
    return digests


# --- Deterministic agents ---

def prompt_sections(text: str) -> Dict[str, str]:
    """Body of every '## Heading' section of a rendered prompt."""
    sections: Dict[str, List[str]] = {}
    current = None
    for line in text.split("\n"):
        if line.startswith("## "):
            current = line[3:].strip()
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {name: "\n".join(lines).strip() for name, lines in sections.items()}


def _field(line: str, name: str) -> str:
    for part in line.lstrip("- ").split(" | "):
        if part.startswith(f"{name}: "):
            return part[len(name) + 2:].strip()
    return ""


def section_titles(body: str) -> List[str]:
    if body == EMPTY_SECTION:
        return []
    return [title for title in (_field(line, "title") for line in body.split("\n")) if title]


def section_candidates(body: str) -> List[Tuple[str, str]]:
    """(id, title) for every candidate line, in prompt order."""
    rows = []
    for line in body.split("\n"):
        item_id = _field(line, "id")
        if item_id:
            rows.append((item_id, _field(line, "title")))
    return rows


def _tokens(texts) -> Set[str]:
    return {token for text in texts for token in tokenize(text)}


def rank_by_overlap(candidates: List[Tuple[str, str]], preference: Set[str]) -> List[str]:
    """Candidates by title-token overlap with the preference set; ties keep prompt order."""
    scored = [(-len(set(tokenize(title)) & preference), n, item_id) for n, (item_id, title) in enumerate(candidates)]
    return [item_id for _, _, item_id in sorted(scored)]


class OverlapResponder:
    """
    Mock chat responder that plays each agent role by token overlap on the
    sections of the rendered prompt.

    - user_understanding: restates the long-term and session titles.
    - nli: scores a candidate by how many of its title tokens occur in the
      session titles, halved and clamped to 1.
    - context_summary: lists the titles of the evidence items.
    - item_ranker: ranks by overlap with the user-summary tokens, narrowed to
      those the context summary also mentions.
    - baseline: ranks by overlap with the whole history block.
    """

    def __call__(self, request: ChatRequest) -> str:
        prompt = next(m.content for m in request.messages if m.role == "user")
        sections = prompt_sections(prompt)
        handler = getattr(self, f"_{request.agent_role}", None)
        if handler is None:
            logger.warning(f"No overlap handler for agent role {request.agent_role}")
            return ""
        return handler(sections)

    def _user_understanding(self, sections: Dict[str, str]) -> str:
        long_term = section_titles(sections.get("Long-term history (newest first)", EMPTY_SECTION))
        session = section_titles(sections.get("Current session (newest first)", EMPTY_SECTION))
        return (
            f"Long-term interests: {', '.join(long_term) or 'unknown'}. "
            f"Current session: {', '.join(session) or 'unknown'}."
        )

    def _nli(self, sections: Dict[str, str]) -> str:
        session = _tokens(section_titles(sections.get("Current session (newest first)", EMPTY_SECTION)))
        candidates = section_candidates(sections.get("Candidate item", ""))
        title = candidates[0][1] if candidates else ""
        shared = set(tokenize(title)) & session
        score = min(1.0, len(shared) / 2)
        return json.dumps({"score": score, "rationale": f"shares {len(shared)} title terms with the session"})

    def _context_summary(self, sections: Dict[str, str]) -> str:
        titles = [title for _, title in section_candidates(sections.get("Candidate evidence", ""))]
        if not titles:
            return "No aligned items."
        return "Relevant items: " + "; ".join(titles) + "."

    def _item_ranker(self, sections: Dict[str, str]) -> str:
        preference = _tokens([sections.get("User summary", "")])
        context = sections.get("Context summary", NOT_AVAILABLE)
        if context != NOT_AVAILABLE:
            preference &= _tokens([context])
        ranking = rank_by_overlap(section_candidates(sections.get("Candidate items", "")), preference)
        return json.dumps(ranking) + "\nRanked by title overlap with the user's interests."

    def _baseline(self, sections: Dict[str, str]) -> str:
        preference = _tokens([sections.get("Purchase history", "")])
        ranking = rank_by_overlap(section_candidates(sections.get("Candidate items", "")), preference)
        return json.dumps(ranking) + "\nRanked by title overlap with the purchase history."
