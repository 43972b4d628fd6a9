"""Chunking, embeddings, an exact cosine index, and grounded answering."""

from __future__ import annotations

import hashlib
import json
import math
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from ehrllm.gateway import ChatMessage, ChatRequest, GatewayError, ModelEndpoint
from ehrllm.tokens import detokenize, tokenize

logger = logging.getLogger(__name__)

__all__ = [
    "Chunk", "ChunkingConfig", "EmbedderMismatch", "EmbeddingRecord", "HashEmbedder",
    "RagAnswer", "RemoteEmbedder", "RetrievalConfig", "VectorIndex", "answer_unstructured_question",
    "build_index", "chunk_document", "embed", "embed_chunks", "index_document", "load_index", "save_index", "search",
    "tokenize",
]

RAG_SYSTEM_PROMPT = (
    "You answer questions about a clinical note. Answer only from the context you are given. "
    "If the context does not contain the answer, reply that the note does not say."
)


class EmbedderMismatch(ValueError):
    """Query and index were embedded by different models."""


# -- chunking -----------------------------------------------------------------

@dataclass(frozen=True)
class ChunkingConfig:
    chunk_size: int = 400
    overlap: int = 50

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0 <= self.overlap < self.chunk_size:
            raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")

    @property
    def stride(self) -> int:
        return self.chunk_size - self.overlap


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    doc_id: str
    token_start: int
    token_end: int
    text: str


def chunk_document(doc: str, cfg: ChunkingConfig = ChunkingConfig(), doc_id: str = "doc",
                   first_id: int = 0) -> list[Chunk]:
    """Sliding token windows starting at 0, stride, 2*stride, ...; the last may be short."""
    tokens = tokenize(doc)
    chunks = []
    start = 0
    while start < len(tokens):
        end = min(start + cfg.chunk_size, len(tokens))
        chunks.append(Chunk(first_id + len(chunks), doc_id, start, end, detokenize(tokens[start:end])))
        if end == len(tokens):
            break
        start += cfg.stride
    return chunks


# -- embedders ----------------------------------------------------------------

class Embedder(Protocol):
    name: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return matrix / norms


def embedding_tokens(text: str) -> list[str]:
    """Lower-cased tokens with punctuation-only tokens dropped."""
    return [t.lower() for t in tokenize(text) if any(ch.isalnum() for ch in t)]


class HashEmbedder:
    """Hashed bag-of-tokens vectors; deterministic and needs no model weights.

    Each distinct token is hashed (BLAKE2b, 8 bytes) to one of ``dimension``
    buckets with weight ``1 + log(count)``, and the vector is L2-normalized.
    The log damps words that repeat throughout a long chunk ("the", "was")
    so a short query is matched on its rarer words. Text with no word tokens
    maps to a fixed sentinel bucket so every output still has unit norm.
    """

    def __init__(self, dimension: int = 4096):
        self.dimension = dimension
        self.name = f"hash-logtf-{dimension}"

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for i, text in enumerate(texts):
            counts = Counter(embedding_tokens(text) or ["\x00empty"])
            for tok in sorted(counts):
                out[i, self.bucket(tok)] += 1.0 + math.log(counts[tok])
        return _normalize(out)


class RemoteEmbedder:
    """Embedding endpoint speaking ``POST {base_url}/embeddings`` with ``{"model", "input"}``.

    Use this to index with a real sentence-embedding model.
    """

    def __init__(self, base_url: str, model: str, dimension: int, credential_ref: str | None = None,
                 path: str = "/embeddings", timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        self.base_url = base_url
        self.model = model
        self.dimension = dimension
        self.credential_ref = credential_ref
        self.path = path
        self.timeout = timeout
        self.name = f"remote:{model}:{dimension}"
        self._transport = transport

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        headers = {}
        if self.credential_ref:
            key = os.environ.get(self.credential_ref)
            if not key:
                raise GatewayError(f"environment variable {self.credential_ref} is not set")
            headers["Authorization"] = f"Bearer {key}"
        url = self.base_url.rstrip("/") + self.path
        try:
            with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
                resp = client.post(url, json={"model": self.model, "input": list(texts)}, headers=headers)
        except httpx.HTTPError as exc:
            raise GatewayError(f"embedding request failed: {exc}") from None
        if resp.status_code != 200:
            raise GatewayError(f"embedding endpoint returned HTTP {resp.status_code}: {resp.text[:300]}")
        data = resp.json()["data"]
        matrix = np.array([row["embedding"] for row in data], dtype=np.float64)
        if matrix.shape != (len(texts), self.dimension):
            raise GatewayError(f"expected {len(texts)}x{self.dimension} embeddings, got {matrix.shape}")
        return _normalize(matrix)


@dataclass(frozen=True)
class EmbeddingRecord:
    chunk_id: int
    vector: np.ndarray


def embed(texts: Sequence[str], embedder: Embedder) -> np.ndarray:
    """One unit-norm row per text."""
    return embedder.embed(list(texts))


def embed_chunks(chunks: Sequence[Chunk], embedder: Embedder) -> list[EmbeddingRecord]:
    vectors = embed([c.text for c in chunks], embedder)
    return [EmbeddingRecord(c.chunk_id, v) for c, v in zip(chunks, vectors)]


# -- index --------------------------------------------------------------------

class VectorIndex:
    """Exact flat index: every search scores every stored vector."""

    def __init__(self, ids: np.ndarray, matrix: np.ndarray, embedder_name: str | None = None):
        self._ids = ids
        self._matrix = matrix
        self._ids.flags.writeable = False
        self._matrix.flags.writeable = False
        self.embedder_name = embedder_name

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dimension(self) -> int | None:
        return self._matrix.shape[1] if len(self._ids) else None

    @property
    def ids(self) -> list[int]:
        return self._ids.tolist()

    def vector(self, chunk_id: int) -> np.ndarray:
        return self._matrix[self.ids.index(chunk_id)]

    def search(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        """Top-``k`` ``(chunk_id, cosine)`` pairs, best first, ties by ascending chunk_id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not len(self._ids):
            return []
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self._matrix.shape[1],):
            raise ValueError(f"query has shape {query.shape}, index dimension is {self._matrix.shape[1]}")
        scores = (self._matrix * query).sum(axis=1)
        order = np.lexsort((self._ids, -scores))[:k]
        return [(int(self._ids[i]), float(scores[i])) for i in order]


def build_index(records: Iterable[EmbeddingRecord], embedder_name: str | None = None) -> VectorIndex:
    records = list(records)
    ids = [r.chunk_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate chunk_id in index records")
    if not records:
        return VectorIndex(np.zeros(0, dtype=np.int64), np.zeros((0, 0)), embedder_name)
    dims = {len(r.vector) for r in records}
    if len(dims) != 1:
        raise ValueError(f"mixed vector dimensions: {sorted(dims)}")
    matrix = np.array([np.asarray(r.vector, dtype=np.float64) for r in records])
    return VectorIndex(np.array(ids, dtype=np.int64), matrix, embedder_name)


def index_document(doc: str, embedder: Embedder, cfg: ChunkingConfig = ChunkingConfig(),
                   doc_id: str = "doc") -> tuple[VectorIndex, list[Chunk]]:
    """Chunk, embed and index one document, tagging the index with the embedder's name."""
    chunks = chunk_document(doc, cfg, doc_id)
    return build_index(embed_chunks(chunks, embedder), embedder.name), chunks


def search(index: VectorIndex, query_vector: np.ndarray, k: int) -> list[tuple[int, float]]:
    return index.search(query_vector, k)


def save_index(index: VectorIndex, chunks: Sequence[Chunk], directory: str | Path) -> None:
    """Write ``index.jsonl`` (header line, then one ``{chunk_id, vector}`` per line) and ``chunks.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"embedder": index.embedder_name, "dimension": index.dimension, "size": len(index)})]
    for cid, row in zip(index.ids, index._matrix):
        lines.append(json.dumps({"chunk_id": cid, "vector": row.tolist()}))
    (directory / "index.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / "chunks.jsonl").write_text(
        "".join(json.dumps(c.__dict__, ensure_ascii=False) + "\n" for c in chunks), encoding="utf-8"
    )


def load_index(directory: str | Path) -> tuple[VectorIndex, list[Chunk]]:
    directory = Path(directory)
    lines = (directory / "index.jsonl").read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    records = []
    for line in lines[1:]:
        obj = json.loads(line)
        records.append(EmbeddingRecord(obj["chunk_id"], np.array(obj["vector"], dtype=np.float64)))
    chunks = [Chunk(**json.loads(line))
              for line in (directory / "chunks.jsonl").read_text(encoding="utf-8").splitlines() if line]
    return build_index(records, header.get("embedder")), chunks


# -- answering ----------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class RagAnswer:
    question: str
    retrieved: tuple[tuple[int, float], ...]
    context: str
    answer: str
    empty_context: bool = False


def build_rag_prompt(context: str, question: str) -> str:
    return f"Context:\n{context}\n\nQuestion: {question}\nAnswer:"


def answer_unstructured_question(
    question: str,
    index: VectorIndex,
    chunks: Mapping[int, Chunk] | Sequence[Chunk],
    endpoint: ModelEndpoint,
    cfg: RetrievalConfig,
    embedder: Embedder,
) -> RagAnswer:
    """Retrieve the top-k chunks and ask the model to answer from them alone.

    Retrieved chunks are placed in the context in document order (ascending
    chunk_id), not score order. Gateway errors propagate.
    """
    if index.embedder_name is not None and index.embedder_name != embedder.name:
        raise EmbedderMismatch(f"index built with {index.embedder_name!r}, query embedder is {embedder.name!r}")
    if not isinstance(chunks, Mapping):
        chunks = {c.chunk_id: c for c in chunks}
    hits = index.search(embed([question], embedder)[0], cfg.k) if len(index) else []
    context = "\n\n".join(chunks[cid].text for cid in sorted(cid for cid, _ in hits))
    if not hits:
        logger.warning("empty index: answering %r without context", question)
    request = ChatRequest(
        (ChatMessage("system", RAG_SYSTEM_PROMPT), ChatMessage("user", build_rag_prompt(context, question))),
        endpoint.endpoint_id,
    )
    reply = endpoint.complete(request).content.strip()
    return RagAnswer(question, tuple(hits), context, reply, empty_context=not hits)
