# arag/corpus.py

import ast
import gzip
import hashlib
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import CorpusError
from .schemas import EvalInstance, Interaction, Item, UserContext

logger = logging.getLogger(__name__)

DEFAULT_SESSION_GAP = 3600
DEFAULT_MAX_REVIEWS = 3


class Catalog:
    """Items keyed by id, iterated in load order."""

    def __init__(self, items: Iterable[Item] = ()):
        self._items: Dict[str, Item] = {}
        for item in items:
            if item.id in self._items:
                raise CorpusError(f"Duplicate item id '{item.id}'")
            self._items[item.id] = item

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self._items.values())

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._items

    def __getitem__(self, item_id: str) -> Item:
        try:
            return self._items[item_id]
        except KeyError:
            raise CorpusError(f"Unknown item id '{item_id}'") from None

    def get(self, item_id: str) -> Optional[Item]:
        return self._items.get(item_id)

    def ids(self) -> List[str]:
        return list(self._items)


# --- File loading ---

def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return path.open("r", encoding="utf-8")


def _read_jsonl(path: Path, model: type) -> Iterator[Tuple[int, BaseModel]]:
    """Yield (line number, validated model) for every non-blank line."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"File not found: {path}")
    try:
        with _open_text(path) as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield line_no, model.model_validate_json(line)
                except ValidationError as e:
                    raise CorpusError(f"{path}:{line_no}: malformed {model.__name__} line: {e}") from e
    except OSError as e:
        logger.error(f"Error reading {path}: {e}")
        raise CorpusError(f"Could not read {path}: {e}") from e


def load_catalog(path: Path) -> Catalog:
    """Load a JSONL catalog; duplicate ids are rejected with their line number."""
    items: List[Item] = []
    first_seen: Dict[str, int] = {}
    for line_no, item in _read_jsonl(path, Item):
        if item.id in first_seen:
            raise CorpusError(
                f"{path}:{line_no}: duplicate item id '{item.id}' (first seen on line {first_seen[item.id]})"
            )
        first_seen[item.id] = line_no
        items.append(item)
    logger.info(f"Loaded {len(items)} items from {path}")
    return Catalog(items)


def load_interactions(path: Path) -> List[Interaction]:
    log = [interaction for _, interaction in _read_jsonl(path, Interaction)]
    logger.info(f"Loaded {len(log)} interactions from {path}")
    return log


def write_jsonl(path: Path, rows: Iterable[BaseModel]) -> str:
    """Write models one per line and return the SHA-256 digest of the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(row.model_dump_json() + "\n")
    return file_digest(path)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_contexts(path: Path) -> List[UserContext]:
    return [context for _, context in _read_jsonl(path, UserContext)]


# --- Context construction ---

def build_contexts(log: Iterable[Interaction], session_gap: int, catalog: Catalog) -> List[UserContext]:
    """
    Split each user's interactions into long-term history and the current session.

    The session is the longest suffix of the user's time-ordered interactions whose
    consecutive gaps are all below session_gap seconds.
    """
    if session_gap <= 0:
        raise CorpusError(f"session_gap must be positive, got {session_gap}")

    by_user: Dict[str, List[Interaction]] = defaultdict(list)
    unknown = set()
    for interaction in log:
        if interaction.item_id not in catalog:
            unknown.add(interaction.item_id)
        by_user[interaction.user_id].append(interaction)
    if unknown:
        raise CorpusError(f"Interactions reference unknown item ids: {', '.join(sorted(unknown))}")

    contexts = []
    for user_id in sorted(by_user):
        events = sorted(by_user[user_id], key=lambda i: (i.timestamp, i.item_id))
        start = len(events) - 1
        while start > 0 and events[start].timestamp - events[start - 1].timestamp < session_gap:
            start -= 1
        contexts.append(UserContext(user_id=user_id, long_term=tuple(events[:start]), session=tuple(events[start:])))
    logger.info(f"Built {len(contexts)} user contexts")
    return contexts


def holdout_split(context: UserContext) -> EvalInstance:
    """Hold out the final session interaction as ground truth (leave-last-out)."""
    if not context.session:
        raise CorpusError(f"User {context.user_id} has an empty session; nothing to hold out")
    ground_truth = context.session[-1].item_id
    # Earlier interactions with the held-out item would leak it, so they go too.
    long_term = tuple(i for i in context.long_term if i.item_id != ground_truth)
    session = tuple(i for i in context.session[:-1] if i.item_id != ground_truth)
    if not long_term and not session:
        raise CorpusError(f"User {context.user_id} has no history left after holdout")
    remaining = context.model_copy(update={"long_term": long_term, "session": session})
    return EvalInstance(context=remaining, ground_truth=ground_truth)


def sample_users(contexts: List[UserContext], max_users: Optional[int], seed: int) -> List[UserContext]:
    """Seeded subset of users, returned in user_id order."""
    if max_users is None or max_users >= len(contexts):
        return list(contexts)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(contexts), size=max_users, replace=False)
    return sorted((contexts[i] for i in chosen), key=lambda c: c.user_id)


def metadata_text(item: Item, max_reviews: int = DEFAULT_MAX_REVIEWS) -> str:
    """Labeled title, description and leading reviews of an item."""
    if max_reviews < 0:
        raise CorpusError(f"max_reviews must be >= 0, got {max_reviews}")
    lines = [f"Title: {item.title}", f"Description: {item.description}"]
    for n, review in enumerate(item.reviews[:max_reviews], start=1):
        lines.append(f"Review {n}: {review}")
    return "\n".join(lines)


# --- Amazon review dumps ---

def _read_loose_json_lines(path: Path) -> Iterator[dict]:
    """Amazon dumps are either strict JSON lines or Python dict literals per line."""
    with _open_text(Path(path)) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                try:
                    yield ast.literal_eval(line)
                except (ValueError, SyntaxError):
                    logger.warning(f"{path}:{line_no}: unreadable line skipped")


def _flatten_text(value) -> str:
    if isinstance(value, list):
        return " ".join(_flatten_text(v) for v in value if v)
    return str(value or "").strip()


def _category_of(meta: dict) -> str:
    if meta.get("category"):
        return _flatten_text(meta["category"][:1] if isinstance(meta["category"], list) else meta["category"])
    categories = meta.get("categories") or []
    if categories and isinstance(categories[0], list) and categories[0]:
        return str(categories[0][0])
    return ""


def convert_amazon(
    reviews_path: Path,
    meta_path: Path,
    max_item_reviews: int = 5,
) -> Tuple[List[Item], List[Interaction], Dict[str, int]]:
    """Turn an Amazon review dump plus its metadata dump into catalog items and interactions."""
    for path in (reviews_path, meta_path):
        if not Path(path).exists():
            raise CorpusError(f"File not found: {path}")
    counts = {"items": 0, "items_without_title": 0, "interactions": 0, "interactions_dropped": 0}

    reviews = []
    for row in _read_loose_json_lines(reviews_path):
        try:
            reviews.append(Interaction(
                user_id=str(row["reviewerID"]),
                item_id=str(row["asin"]),
                timestamp=int(row["unixReviewTime"]),
                rating=row.get("overall"),
                review_text=row.get("reviewText"),
            ))
        except (KeyError, ValueError, ValidationError) as e:
            counts["interactions_dropped"] += 1
            logger.warning(f"Skipping review row: {e}")
    reviews.sort(key=lambda i: (i.timestamp, i.user_id, i.item_id))

    texts_by_item: Dict[str, List[str]] = defaultdict(list)
    for review in reviews:
        if review.review_text and len(texts_by_item[review.item_id]) < max_item_reviews:
            texts_by_item[review.item_id].append(review.review_text)

    items: List[Item] = []
    seen = set()
    for meta in _read_loose_json_lines(meta_path):
        asin = str(meta.get("asin", ""))
        title = _flatten_text(meta.get("title"))
        if not asin or asin in seen:
            continue
        if not title:
            counts["items_without_title"] += 1
            continue
        seen.add(asin)
        items.append(Item(
            id=asin,
            title=title,
            description=_flatten_text(meta.get("description")),
            reviews=tuple(texts_by_item.get(asin, [])),
            category=_category_of(meta),
        ))

    interactions = [r for r in reviews if r.item_id in seen]
    counts["interactions_dropped"] += len(reviews) - len(interactions)
    counts["items"] = len(items)
    counts["interactions"] = len(interactions)
    logger.info(f"Converted Amazon dump: {counts}")
    return items, interactions, counts
