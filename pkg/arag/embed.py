# arag/embed.py

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import httpx
import numpy as np
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from .config import EMBEDDING_URL, OPENAI_API_KEY
from .corpus import Catalog, metadata_text
from .errors import CorpusError, EmbeddingError
from .schemas import UserContext

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
DEFAULT_K = 50

_TOKEN = re.compile(r"[^\W_]+")

RecallSet = List[Tuple[str, float]]


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an (n, dim) float64 array."""


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


class HashingEmbedder:
    """Hashed bag-of-tokens, L2-normalized. Empty text maps to the zero vector."""

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise EmbeddingError(f"dim must be >= 1, got {dim}")
        self.dim = dim

    def embed_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        vector = np.zeros(self.dim, dtype=np.float64)
        if not tokens:
            return vector
        buckets = [_bucket(t, self.dim) for t in tokens]
        vector += np.bincount(buckets, minlength=self.dim)
        return vector / np.linalg.norm(vector)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.vstack([self.embed_one(t) for t in texts])


def _is_retryable(exc: BaseException) -> bool:
    if isinstance(exc, httpx.HTTPStatusError):
        return exc.response.status_code in (429, 500, 502, 503, 504)
    return isinstance(exc, httpx.TransportError)


class RemoteEmbedder:
    """OpenAI-style /embeddings endpoint behind the Embedder contract."""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str],
        model: str = "text-embedding-3-small",
        dim: int = DEFAULT_DIM,
        max_attempts: int = 3,
        backoff_seconds: float = 1.0,
        client: Optional[httpx.Client] = None,
    ):
        self.dim = dim
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(base_url=base_url, headers=headers, timeout=60.0)

    def _post(self, texts: Sequence[str]) -> dict:
        response = self.client.post(
            "/embeddings", json={"model": self.model, "input": list(texts), "dimensions": self.dim}
        )
        response.raise_for_status()
        return response.json()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        retrying = Retrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=wait_exponential(multiplier=self.backoff_seconds),
            retry=retry_if_exception(_is_retryable),
            reraise=True,
        )
        try:
            payload = retrying(self._post, texts)
        except httpx.HTTPError as e:
            logger.error(f"Embedding request failed: {e}")
            raise EmbeddingError(f"Embedding request failed: {e}") from e
        rows = sorted(payload["data"], key=lambda row: row["index"])
        matrix = np.asarray([row["embedding"] for row in rows], dtype=np.float64)
        if matrix.shape != (len(texts), self.dim):
            raise EmbeddingError(f"Expected {(len(texts), self.dim)} embeddings, got {matrix.shape}")
        return matrix


def make_embedder(dim: int = DEFAULT_DIM) -> Embedder:
    """RemoteEmbedder when ARAG_EMBEDDING_URL is set, otherwise the offline hashing embedder."""
    if EMBEDDING_URL:
        logger.info(f"Using remote embeddings from {EMBEDDING_URL}")
        return RemoteEmbedder(EMBEDDING_URL, OPENAI_API_KEY, dim=dim)
    return HashingEmbedder(dim)


# --- Similarity and retrieval ---

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"Dimension mismatch: {a.shape} vs {b.shape}")
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / norm, -1.0, 1.0))


class VectorIndex:
    """Immutable id -> vector table, stored in id order so stable sorts break ties by id."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(ids) != len(set(ids)):
            raise EmbeddingError("Vector index ids must be unique")
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise EmbeddingError(f"Expected {len(ids)} vectors, got array of shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise EmbeddingError("Vector index contains non-finite values")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        self.ids: Tuple[str, ...] = tuple(ids[i] for i in order)
        self._vectors = vectors[order]
        self._vectors.setflags(write=False)
        self._norms = np.linalg.norm(self._vectors, axis=1)
        self._rows = {item_id: n for n, item_id in enumerate(self.ids)}
        self.dim = vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._rows

    def vector(self, item_id: str) -> np.ndarray:
        return self._vectors[self._rows[item_id]]

    def subset(self, ids: Sequence[str]) -> "VectorIndex":
        """A smaller index over the given ids, reusing the stored vectors."""
        missing = [item_id for item_id in ids if item_id not in self._rows]
        if missing:
            raise EmbeddingError(f"{len(missing)} ids are not in the index, e.g. '{missing[0]}'")
        rows = [self._rows[item_id] for item_id in ids]
        return VectorIndex(list(ids), self._vectors[rows] if rows else np.zeros((0, self.dim)))

    def similarities(self, query: np.ndarray) -> np.ndarray:
        """Cosine of the query against every indexed vector, in index order."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.dim,):
            raise EmbeddingError(f"Dimension mismatch: index has {self.dim}, query has {query.shape}")
        denom = self._norms * np.linalg.norm(query)
        dots = self._vectors @ query
        scores = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        return np.clip(scores, -1.0, 1.0)


def retrieve_topk(index: VectorIndex, query: np.ndarray, k: int = DEFAULT_K) -> RecallSet:
    """Exact top-k by cosine; ties broken by item id ascending."""
    if k < 1:
        raise EmbeddingError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    scores = index.similarities(query)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


# --- Catalog and user embedding ---

def build_index(
    catalog: Catalog,
    embedder: Embedder,
    max_reviews: int = 3,
    cache_path: Optional[Path] = None,
) -> VectorIndex:
    """Embed every catalog item, reusing vectors from the cache file when present."""
    cached = load_vector_cache(cache_path, embedder.dim) if cache_path and Path(cache_path).exists() else {}
    missing = [item for item in catalog if item.id not in cached]
    if missing:
        fresh = embedder.embed([metadata_text(item, max_reviews) for item in missing])
        cached.update({item.id: fresh[n] for n, item in enumerate(missing)})
        logger.info(f"Embedded {len(missing)} items ({len(catalog) - len(missing)} from cache)")
    ids = catalog.ids()
    vectors = np.vstack([cached[i] for i in ids]) if ids else np.zeros((0, embedder.dim))
    index = VectorIndex(ids, vectors)
    if cache_path and missing:
        save_vector_cache(index, cache_path)
    return index


def embed_user(
    context: UserContext,
    catalog: Catalog,
    embedder: Embedder,
    max_items: int = 10,
    max_reviews: int = 3,
) -> np.ndarray:
    """Embed the metadata of the user's most recent items (session first, newest first)."""
    texts = []
    for interaction in context.newest_first()[:max_items]:
        item = catalog.get(interaction.item_id)
        if item is None:
            raise CorpusError(f"User {context.user_id} references unknown item '{interaction.item_id}'")
        texts.append(metadata_text(item, max_reviews))
    return embed_text(embedder, "\n".join(texts))


def embed_text(embedder: Embedder, text: str) -> np.ndarray:
    return embedder.embed([text])[0]


def save_vector_cache(index: VectorIndex, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for item_id in index.ids:
            f.write(json.dumps({"id": item_id, "vector": index.vector(item_id).tolist()}) + "\n")
    logger.info(f"Wrote {len(index)} vectors to {path}")


def load_vector_cache(path: Path, dim: int) -> dict:
    vectors = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                vector = np.asarray(row["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise EmbeddingError(f"{path}:{line_no}: malformed vector cache line: {e}") from e
            if vector.shape != (dim,):
                raise EmbeddingError(f"{path}:{line_no}: expected {dim} values, got {vector.shape}")
            vectors[row["id"]] = vector
    return vectors
