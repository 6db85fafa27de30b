"""Datasheet retrieval: sliding-window chunking plus a lexical or embedding index.

Token counts use a word/punctuation tokenizer, so "800 tokens" here is an
approximation of subword counts from hosted embedding models.
"""
from __future__ import annotations

import math
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx
import numpy as np

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

STOPWORDS = frozenset("""
a an and are as at be but by can do does for from has have how i if in into is it
its of on or so such than that the their then there these this to was were what
when where which while who will with would you your
""".split())

EMBED_URL_ENV = "SMPSAGENT_EMBED_URL"
EMBED_KEY_ENV = "SMPSAGENT_API_KEY"
EMBED_MODEL_ENV = "SMPSAGENT_EMBED_MODEL"


class RetrievalError(Exception):
    pass


class EmptyDocument(RetrievalError):
    pass


class EmptyIndex(RetrievalError):
    pass


class EmbeddingEndpointError(RetrievalError):
    pass


@dataclass(frozen=True)
class RetrievalConfig:
    chunk_size: int = 800
    overlap: int = 400
    max_chunks: int = 20
    embedding_dim: int = 256
    backend: str = "lexical"

    def __post_init__(self):
        if self.chunk_size < 1 or not 0 <= self.overlap < self.chunk_size:
            raise ValueError("need chunk_size >= 1 and 0 <= overlap < chunk_size")
        if self.max_chunks < 1:
            raise ValueError("max_chunks must be at least 1")
        if self.backend not in ("lexical", "embedding"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def stride(self) -> int:
        return self.chunk_size - self.overlap


@dataclass(frozen=True)
class DocumentChunk:
    id: str
    source: str
    text: str
    token_count: int
    ordinal: int
    start_token: int


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def chunk_document(text: str, cfg: RetrievalConfig = RetrievalConfig(),
                   source: str = "document") -> list[DocumentChunk]:
    spans = [m.span() for m in _TOKEN_RE.finditer(text)]
    if not spans:
        raise EmptyDocument(f"{source}: no text to index")
    n = len(spans)
    chunks = []
    for ordinal, start in enumerate(range(0, n, cfg.stride)):
        end = min(start + cfg.chunk_size, n)
        body = text[spans[start][0]:spans[end - 1][1]]
        chunks.append(DocumentChunk(f"{source}#{ordinal}", source, body, end - start,
                                    ordinal, start))
    return chunks


def _terms(text: str) -> list[str]:
    return [t.lower() for t in tokenize(text) if t[0].isalnum() and t.lower() not in STOPWORDS]


@dataclass
class RetrievalIndex:
    chunks: list[DocumentChunk]
    cfg: RetrievalConfig
    vectors: Optional[np.ndarray] = None
    idf: dict[str, float] = field(default_factory=dict)
    term_vectors: list[dict[str, float]] = field(default_factory=list)
    norms: list[float] = field(default_factory=list)
    embedder: Optional["EmbeddingClient"] = None

    def _lexical_scores(self, query: str) -> np.ndarray:
        q = self._tfidf(Counter(_terms(query)))
        scores = np.zeros(len(self.chunks))
        if not q:
            return scores
        q_norm = math.sqrt(sum(w * w for w in q.values()))
        for i, vec in enumerate(self.term_vectors):
            dot = sum(w * vec.get(t, 0.0) for t, w in q.items())
            d_norm = self.norms[i]
            if dot and d_norm:
                scores[i] = dot / (q_norm * d_norm)
        return scores

    def _tfidf(self, counts: Counter) -> dict[str, float]:
        return {t: c * self.idf[t] for t, c in counts.items() if self.idf.get(t)}

    def build_lexical(self) -> None:
        docs = [Counter(_terms(c.text)) for c in self.chunks]
        n = len(docs)
        df = Counter(t for d in docs for t in d)
        # smoothed idf keeps terms present in every chunk above zero
        self.idf = {t: math.log((1 + n) / (1 + k)) + 1.0 for t, k in df.items()}
        self.term_vectors = [self._tfidf(d) for d in docs]
        self.norms = [math.sqrt(sum(w * w for w in v.values())) for v in self.term_vectors]

    def scores(self, query: str) -> np.ndarray:
        if self.cfg.backend == "lexical":
            return self._lexical_scores(query)
        assert self.embedder is not None and self.vectors is not None
        q = self.embedder.embed([query])[0]
        return self.vectors @ q


def index(chunks: Sequence[DocumentChunk], cfg: RetrievalConfig = RetrievalConfig(),
          embedder: Optional["EmbeddingClient"] = None) -> RetrievalIndex:
    if not chunks:
        raise EmptyIndex("nothing to index")
    idx = RetrievalIndex(list(chunks), cfg)
    if cfg.backend == "lexical":
        idx.build_lexical()
        return idx
    idx.embedder = embedder or EmbeddingClient.from_env(dimensions=cfg.embedding_dim)
    idx.vectors = idx.embedder.embed([c.text for c in chunks])
    return idx


def retrieve(query: str, idx: RetrievalIndex, k: int) -> list[tuple[DocumentChunk, float]]:
    """Top-k chunks with scores, best first; ties go to the earlier chunk."""
    if k < 1 or k > idx.cfg.max_chunks:
        raise ValueError(f"k must lie in 1..{idx.cfg.max_chunks}, got {k}")
    if not idx.chunks:
        raise EmptyIndex("index holds no chunks")
    scores = idx.scores(query)
    order = sorted(range(len(idx.chunks)), key=lambda i: (-scores[i], idx.chunks[i].ordinal))
    return [(idx.chunks[i], float(scores[i])) for i in order[:k]]


class EmbeddingClient:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, base_url: str, api_key: str = "", model: str = "text-embedding-3-large",
                 dimensions: int = 256, timeout: float = 30.0,
                 transport: Optional[httpx.BaseTransport] = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimensions = dimensions
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "EmbeddingClient":
        url = os.environ.get(EMBED_URL_ENV) or os.environ.get("SMPSAGENT_BASE_URL")
        if not url:
            raise EmbeddingEndpointError(
                f"embedding backend needs {EMBED_URL_ENV} or SMPSAGENT_BASE_URL to be set")
        kwargs.setdefault("api_key", os.environ.get(EMBED_KEY_ENV, ""))
        if os.environ.get(EMBED_MODEL_ENV):
            kwargs.setdefault("model", os.environ[EMBED_MODEL_ENV])
        return cls(url, **kwargs)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = {"model": self.model, "input": list(texts), "dimensions": self.dimensions}
        try:
            resp = self._http.post(f"{self.base_url}/embeddings", json=body)
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            vecs = np.array([d["embedding"] for d in data], dtype=np.float64)
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise EmbeddingEndpointError(f"embedding request failed: {exc}") from None
        if vecs.shape != (len(texts), self.dimensions):
            raise EmbeddingEndpointError(
                f"expected {len(texts)} vectors of size {self.dimensions}, got {vecs.shape}")
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise EmbeddingEndpointError("endpoint returned a zero vector")
        return vecs / norms


def load_datasheet(path: str, cfg: RetrievalConfig = RetrievalConfig(),
                   embedder: Optional[EmbeddingClient] = None) -> RetrievalIndex:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return index(chunk_document(text, cfg, source=os.path.basename(path)), cfg, embedder)


def render_hits(hits: Sequence[tuple[DocumentChunk, float]]) -> str:
    return "\n\n".join(f"[{c.id} score={s:.3f}]\n{c.text}" for c, s in hits)
