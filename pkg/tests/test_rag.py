import json

import httpx
import numpy as np
import pytest

from smpsagent.rag import (
    EmbeddingClient,
    EmbeddingEndpointError,
    EmptyDocument,
    EmptyIndex,
    RetrievalConfig,
    chunk_document,
    index,
    load_datasheet,
    render_hits,
    retrieve,
    tokenize,
)


def words(n, word="w"):
    return " ".join(f"{word}{i}" for i in range(n))


def test_tokenizer_splits_punctuation():
    assert tokenize("V(out) = 5.0V, ok") == ["V", "(", "out", ")", "=", "5", ".", "0V", ",", "ok"]


def test_short_document_is_one_chunk():
    chunks = chunk_document(words(100))
    assert len(chunks) == 1
    assert chunks[0].token_count == 100 and chunks[0].start_token == 0


def test_empty_document():
    with pytest.raises(EmptyDocument):
        chunk_document("   \n\t")


def test_chunks_cover_every_token():
    text = words(2345)
    toks = tokenize(text)
    covered = set()
    for c in chunk_document(text):
        assert tokenize(c.text) == toks[c.start_token:c.start_token + c.token_count]
        covered.update(range(c.start_token, c.start_token + c.token_count))
    assert covered == set(range(len(toks)))


def test_config_validation():
    with pytest.raises(ValueError):
        RetrievalConfig(chunk_size=10, overlap=10)
    with pytest.raises(ValueError):
        RetrievalConfig(max_chunks=0)
    with pytest.raises(ValueError):
        RetrievalConfig(backend="bm25")


def test_duplicate_chunks_are_both_indexed():
    cfg = RetrievalConfig(chunk_size=4, overlap=0)
    chunks = chunk_document("alpha beta gamma delta alpha beta gamma delta", cfg)
    idx = index(chunks, cfg)
    hits = retrieve("gamma", idx, 2)
    assert [c.ordinal for c, _ in hits] == [0, 1]
    assert hits[0][1] == hits[1][1] > 0


def test_stopword_query_ties_break_by_position():
    cfg = RetrievalConfig(chunk_size=5, overlap=0)
    idx = index(chunk_document(words(30), cfg), cfg)
    hits = retrieve("the of and", idx, 4)
    assert [c.ordinal for c, _ in hits] == [0, 1, 2, 3]
    assert {s for _, s in hits} == {0.0}


def test_k_beyond_corpus_returns_everything():
    cfg = RetrievalConfig(chunk_size=10, overlap=0)
    idx = index(chunk_document(words(25), cfg), cfg)
    assert len(retrieve("w3", idx, 20)) == 3


@pytest.mark.parametrize("k", [0, 21, -1])
def test_k_out_of_range(k):
    idx = index(chunk_document(words(10)))
    with pytest.raises(ValueError):
        retrieve("x", idx, k)


def test_empty_index():
    with pytest.raises(EmptyIndex):
        index([])


def test_datasheet_answers_mode_question(data_dir):
    idx = load_datasheet(str(data_dir / "buckctrl_datasheet.txt"))
    (top, score), = retrieve("MODE pin forced continuous operation resistor INTVCC", idx, 1)
    assert "MODE" in top.text and score > 0
    assert top.source == "buckctrl_datasheet.txt"


def test_render_hits():
    cfg = RetrievalConfig(chunk_size=3, overlap=0)
    idx = index(chunk_document("one two three four", cfg, source="ds"), cfg)
    text = render_hits(retrieve("four", idx, 2))
    assert text.startswith("[ds#1 score=")
    assert "\n\n[ds#0 score=0.000]\none two three" in text


# ---- embedding client ----

def fake_embeddings(dim=4, status=200, payload=None):
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request, body))
        if status != 200:
            return httpx.Response(status, json={"error": "nope"})
        if payload is not None:
            return httpx.Response(200, json=payload)
        # reversed order checks that results are re-sorted by index
        data = [{"index": i, "embedding": [float(len(t))] + [1.0] * (dim - 1)}
                for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": data[::-1]})

    return httpx.MockTransport(handler), seen


def test_embeddings_are_unit_norm_and_ordered():
    transport, seen = fake_embeddings()
    client = EmbeddingClient("http://embed.test/v1/", api_key="k", dimensions=4,
                             transport=transport)
    vecs = client.embed(["a", "abcdef"])
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0)
    assert vecs[1, 0] > vecs[0, 0]
    request, body = seen[0]
    assert str(request.url) == "http://embed.test/v1/embeddings"
    assert request.headers["authorization"] == "Bearer k"
    assert body["dimensions"] == 4 and body["input"] == ["a", "abcdef"]


def test_default_dimension_is_256():
    transport, seen = fake_embeddings(dim=256)
    EmbeddingClient("http://e", transport=transport).embed(["x"])
    assert seen[0][1]["dimensions"] == 256
    assert "authorization" not in seen[0][0].headers


@pytest.mark.parametrize("kwargs", [
    {"status": 500},
    {"payload": {"nothing": []}},
    {"payload": {"data": [{"index": 0, "embedding": [1.0, 2.0]}]}},
    {"payload": {"data": [{"index": 0, "embedding": [0.0] * 4}]}},
])
def test_embedding_errors(kwargs):
    transport, _ = fake_embeddings(**kwargs)
    client = EmbeddingClient("http://e", dimensions=4, transport=transport)
    with pytest.raises(EmbeddingEndpointError):
        client.embed(["x"])


def test_from_env(monkeypatch):
    for var in ("SMPSAGENT_EMBED_URL", "SMPSAGENT_BASE_URL", "SMPSAGENT_EMBED_MODEL"):
        monkeypatch.delenv(var, raising=False)
    with pytest.raises(EmbeddingEndpointError):
        EmbeddingClient.from_env()
    monkeypatch.setenv("SMPSAGENT_BASE_URL", "http://fallback")
    monkeypatch.setenv("SMPSAGENT_EMBED_MODEL", "tiny")
    client = EmbeddingClient.from_env(dimensions=8)
    assert (client.base_url, client.model, client.dimensions) == ("http://fallback", "tiny", 8)


def test_embedding_backend_retrieval():
    transport, _ = fake_embeddings(dim=3)
    cfg = RetrievalConfig(chunk_size=2, overlap=0, embedding_dim=3, backend="embedding")
    chunks = chunk_document("a b c d e f", cfg)
    idx = index(chunks, cfg, EmbeddingClient("http://e", dimensions=3, transport=transport))
    assert idx.vectors.shape == (3, 3)
    hits = retrieve("q", idx, 3)
    assert len(hits) == 3
    assert all(-1.0 <= s <= 1.0 + 1e-12 for _, s in hits)
