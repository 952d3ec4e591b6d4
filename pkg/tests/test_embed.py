# tests/test_embed.py

import httpx
import numpy as np
import pytest

from arag.corpus import metadata_text
from arag.embed import (
    HashingEmbedder,
    RemoteEmbedder,
    VectorIndex,
    build_index,
    cosine,
    embed_text,
    embed_user,
    retrieve_topk,
)
from arag.errors import EmbeddingError

from conftest import make_context


@pytest.fixture
def embedder():
    return HashingEmbedder(256)


def test_empty_text_is_the_zero_vector(embedder):
    vector = embed_text(embedder, "")
    assert vector.shape == (256,)
    assert not vector.any()


def test_bag_of_tokens_ignores_order_and_case(embedder):
    np.testing.assert_array_equal(embed_text(embedder, "red shoe"), embed_text(embedder, "Shoe RED"))
    np.testing.assert_array_equal(embed_text(embedder, "red shoe"), embed_text(embedder, "red shoe"))


def test_reference_vectors_have_unit_or_zero_norm(embedder):
    rng = np.random.default_rng(0)
    words = ["tote", "leather", "red", "", "bag", "_", "x1"]
    for _ in range(200):
        text = " ".join(rng.choice(words, size=rng.integers(0, 6)))
        norm = np.linalg.norm(embed_text(embedder, text))
        assert min(abs(norm), abs(norm - 1.0)) < 1e-9


def test_cosine_conventions():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert cosine(np.zeros(3), a) == 0.0
    assert cosine(a, np.array([3.0, 1.0, 2.0])) == pytest.approx(cosine(np.array([3.0, 1.0, 2.0]), a))
    assert cosine(2.5 * a, np.array([3.0, 1.0, 2.0])) == pytest.approx(cosine(a, np.array([3.0, 1.0, 2.0])))
    with pytest.raises(EmbeddingError):
        cosine(np.ones(2), np.ones(3))


def test_ties_break_by_item_id():
    # a and c have identical similarity to the query
    index = VectorIndex(["c", "b", "a"], np.array([[0.9, 0.1], [0.5, 0.5], [0.9, 0.1]]))
    query = np.array([1.0, 0.0])
    assert [i for i, _ in retrieve_topk(index, query, 2)] == ["a", "c"]
    assert [i for i, _ in retrieve_topk(index, query, 1)] == ["a"]
    assert [i for i, _ in retrieve_topk(index, query, 10)] == ["a", "c", "b"]


def test_empty_index_and_bad_k():
    index = VectorIndex([], np.zeros((0, 4)))
    assert retrieve_topk(index, np.ones(4), 5) == []
    with pytest.raises(EmbeddingError):
        retrieve_topk(index, np.ones(4), 0)


def test_index_rejects_bad_input():
    with pytest.raises(EmbeddingError):
        VectorIndex(["a", "a"], np.ones((2, 3)))
    with pytest.raises(EmbeddingError):
        VectorIndex(["a"], np.ones((2, 3)))
    with pytest.raises(EmbeddingError):
        VectorIndex(["a"], np.array([[np.nan, 1.0]]))


def test_retrieval_matches_an_exhaustive_scan():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        size = int(rng.integers(1, 2001)) if trial % 20 == 0 else int(rng.integers(1, 200))
        ids = [f"item{n:05d}" for n in rng.permutation(size)]
        # Coarse values so ties actually occur
        vectors = rng.integers(-2, 3, size=(size, 256)).astype(float)
        query = rng.integers(-2, 3, size=256).astype(float)
        k = int(rng.integers(1, size + 5))
        index = VectorIndex(ids, vectors)

        scores = [cosine(vectors[row], query) for row in range(size)]
        oracle = sorted(zip(ids, scores), key=lambda pair: (-pair[1], pair[0]))[:k]
        got = retrieve_topk(index, query, k)
        assert [i for i, _ in got] == [i for i, _ in oracle]
        assert all(a[1] >= b[1] for a, b in zip(got, got[1:]))



def test_subset_reuses_stored_vectors():
    index = VectorIndex(["c", "a", "b"], np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]))
    small = index.subset(["b", "a"])
    assert small.ids == ("a", "b")
    np.testing.assert_array_equal(small.vector("b"), [1.0, 1.0])
    assert "c" in index and "c" not in small
    with pytest.raises(EmbeddingError, match="not in the index"):
        index.subset(["a", "zz"])

def test_embed_user_uses_newest_items_first(bag_catalog, embedder):
    context = make_context("u", long_term=["b1", "b2", "b3"], session=["b4", "b5"])
    expected = embed_text(embedder, "\n".join(metadata_text(bag_catalog[i]) for i in ("b5", "b4")))
    np.testing.assert_array_equal(embed_user(context, bag_catalog, embedder, max_items=2), expected)


def test_embed_user_single_item_equals_item_text(bag_catalog, embedder):
    context = make_context("u", session=["b2"])
    np.testing.assert_array_equal(
        embed_user(context, bag_catalog, embedder), embed_text(embedder, metadata_text(bag_catalog["b2"]))
    )


def test_repeated_item_keeps_direction(embedder):
    once = embed_text(embedder, "Title: Tote\nDescription: Red")
    twice = embed_text(embedder, "Title: Tote\nDescription: Red\nTitle: Tote\nDescription: Red")
    np.testing.assert_allclose(once, twice)


def test_build_index_uses_and_fills_the_cache(tmp_path, bag_catalog, embedder):
    cache = tmp_path / "vectors.jsonl"
    first = build_index(bag_catalog, embedder, cache_path=cache)
    assert cache.exists()

    class Exploding:
        dim = 256

        def embed(self, texts):
            raise AssertionError("cache should have answered")

    second = build_index(bag_catalog, Exploding(), cache_path=cache)
    assert second.ids == first.ids
    np.testing.assert_allclose(second.vector("b3"), first.vector("b3"))


def test_remote_embedder_orders_rows_by_index():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, json={"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]},
        ]})

    client = httpx.Client(base_url="http://test", transport=httpx.MockTransport(handler))
    remote = RemoteEmbedder("http://test", None, dim=2, client=client)
    np.testing.assert_array_equal(remote.embed(["a", "b"]), np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_remote_embedder_gives_up_after_retries():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(503)

    client = httpx.Client(base_url="http://test", transport=httpx.MockTransport(handler))
    remote = RemoteEmbedder("http://test", None, dim=2, backoff_seconds=0, client=client)
    with pytest.raises(EmbeddingError):
        remote.embed(["a"])
    assert len(calls) == 3
