"""Chunking, embedding and exact cosine retrieval over the knowledge corpus."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from .core import LESIONS, Lesion
from .ingest import RawDocument

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
DEFAULT_CHUNK_SIZE = 256
DEFAULT_CHUNK_OVERLAP = 32

_TOKEN = re.compile(r"[a-z0-9]+")


class KStoreError(RuntimeError):
    pass


class EmptyIndexError(KStoreError):
    pass


class UnknownPartitionError(KStoreError):
    pass


class EmbeddingError(RuntimeError):
    pass


class RetryableEmbeddingError(EmbeddingError):
    pass


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    lesion: Lesion
    doc_ref: str
    text: str
    token_span: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "lesion", Lesion(self.lesion))
        object.__setattr__(self, "token_span", tuple(self.token_span))
        if not self.text.strip():
            raise ValueError(f"chunk {self.chunk_id} has empty text")

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "lesion": self.lesion.value,
            "doc_ref": self.doc_ref,
            "text": self.text,
            "token_span": list(self.token_span),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "KnowledgeChunk":
        return cls(d["chunk_id"], Lesion(d["lesion"]), d["doc_ref"], d["text"], tuple(d["token_span"]))


def window_starts(n_tokens: int, size: int, overlap: int) -> list[int]:
    if not 0 <= overlap < size:
        raise ValueError(f"need 0 <= overlap < size, got size={size}, overlap={overlap}")
    if n_tokens <= size:
        return [0]
    return list(range(0, n_tokens, size - overlap))


def chunk_document(
    doc: RawDocument,
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    lesion: Optional[Lesion] = None,
) -> list[KnowledgeChunk]:
    """Split a document into whitespace-token windows.

    A document that fits in one window yields a single chunk.  Longer ones
    get a window at every multiple of ``size - overlap``; the last window may
    be short.  Spans are half-open token ranges.
    """
    tokens = doc.body.split()
    if not tokens:
        raise ValueError(f"document {doc.ref} is empty")
    lesion = Lesion(lesion if lesion is not None else doc.term.replace(" ", "_"))
    chunks = []
    for i, start in enumerate(window_starts(len(tokens), size, overlap)):
        end = min(start + size, len(tokens))
        chunks.append(
            KnowledgeChunk(
                chunk_id=f"{lesion.value}/{doc.source.value}:{doc.ref}#{i:04d}",
                lesion=lesion,
                doc_ref=f"{doc.source.value}:{doc.ref}",
                text=" ".join(tokens[start:end]),
                token_span=(start, end),
            )
        )
    return chunks


# --------------------------------------------------------------------------
# embedders


class Embedder(Protocol):
    descriptor: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class HashingEmbedder:
    """Deterministic offline embedder.

    Lower-cased alphanumeric tokens are hashed into ``dim`` buckets, each
    bucket weighted ``1 + log(tf)``, and the vector L2-normalized.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim
        self.descriptor = f"hashing-bow-v1:dim={dim}"

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EmbeddingError("cannot embed text without tokens")
        vec = np.zeros(self.dim)
        for tok, tf in sorted(Counter(tokens).items()):
            vec[token_bucket(tok, self.dim)] += 1.0 + math.log(tf)
        return vec / np.linalg.norm(vec)


class RemoteEmbedder:
    """OpenAI-style ``POST {endpoint}/embeddings`` client.

    Endpoint and key default to ``DALLM_EMBED_ENDPOINT`` / ``DALLM_EMBED_API_KEY``.
    5xx, 429 and connection errors are retryable; other failures are fatal.
    """

    def __init__(self, model: str, dim: int, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                 session=None, attempts: int = 3, backoff: float = 1.0):
        self.model = model
        self.dim = dim
        self.endpoint = (endpoint or os.environ.get("DALLM_EMBED_ENDPOINT", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("DALLM_EMBED_API_KEY")
        self.descriptor = f"remote:{model}:dim={dim}"
        self.attempts = attempts
        self.backoff = backoff
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def _once(self, text: str) -> np.ndarray:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.session.post(f"{self.endpoint}/embeddings", json={"model": self.model, "input": text},
                                     headers=headers, timeout=60)
        except Exception as exc:
            raise RetryableEmbeddingError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableEmbeddingError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise EmbeddingError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=float)
        if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)):
            raise EmbeddingError(f"bad embedding shape {vec.shape}")
        return vec / np.linalg.norm(vec)

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        for attempt in range(self.attempts):
            try:
                return self._once(text)
            except RetryableEmbeddingError:
                if attempt == self.attempts - 1:
                    raise
                time.sleep(self.backoff * 2**attempt)
        raise AssertionError("unreachable")


def embedder_from_descriptor(descriptor: str) -> Embedder:
    m = re.fullmatch(r"hashing-bow-v1:dim=(\d+)", descriptor)
    if m:
        return HashingEmbedder(int(m.group(1)))
    raise ValueError(f"no local embedder for descriptor {descriptor!r}; pass one explicitly")


def embed(text: str, backend: Optional[Embedder] = None) -> np.ndarray:
    if not text or not text.strip():
        raise EmbeddingError("cannot embed empty text")
    return (backend or HashingEmbedder()).embed(text)


# --------------------------------------------------------------------------
# index


class VectorIndex:
    """Sealed, immutable collection of embedded chunks.

    Build with :class:`IndexBuilder`; query with :meth:`search`.
    """

    def __init__(self, chunks: Sequence[KnowledgeChunk], vectors: np.ndarray, embedder: Embedder):
        vectors = np.array(vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2 or len(vectors) != len(chunks):
            raise ValueError("vectors must be an (n_chunks, dim) array")
        if len(chunks) and vectors.shape[1] != embedder.dim:
            raise ValueError(f"dimension {vectors.shape[1]} does not match embedder ({embedder.dim})")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("non-finite embedding component")
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate chunk ids")
        vectors.setflags(write=False)
        self.chunks: tuple[KnowledgeChunk, ...] = tuple(chunks)
        self.vectors = vectors
        self.embedder = embedder
        self.descriptor = embedder.descriptor
        self._by_id = {c.chunk_id: i for i, c in enumerate(self.chunks)}
        parts: dict[Lesion, list[int]] = {}
        for i, c in enumerate(self.chunks):
            parts.setdefault(c.lesion, []).append(i)
        self.partitions = {l: np.array(v, dtype=int) for l, v in parts.items()}

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk(self, chunk_id: str) -> KnowledgeChunk:
        return self.chunks[self._by_id[chunk_id]]

    def search(self, query: str, k: int, lesion: Optional[Lesion] = None) -> list[tuple[str, float]]:
        """Exact top-k by cosine, ties broken by ascending chunk id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.chunks:
            raise EmptyIndexError("index is empty")
        if lesion is None:
            rows = np.arange(len(self.chunks))
        else:
            lesion = Lesion(lesion)
            if lesion not in self.partitions:
                raise UnknownPartitionError(f"index has no chunks for lesion {lesion.value!r}")
            rows = self.partitions[lesion]
        q = self.embedder.embed(query)
        # embedders return unit vectors, so cosine is the dot product; fsum rounds
        # each score exactly, so equal cosines tie whatever the bucket order
        scores = np.clip([math.fsum(p) for p in (self.vectors[rows] * q).tolist()], -1.0, 1.0)
        order = sorted(range(len(rows)), key=lambda i: (-scores[i], self.chunks[rows[i]].chunk_id))
        return [(self.chunks[rows[i]].chunk_id, float(scores[i])) for i in order[:k]]

    def to_dict(self) -> dict:
        vec = np.ascontiguousarray(self.vectors, dtype="<f8")
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "embedder": self.descriptor,
            "dim": int(self.embedder.dim),
            "chunks": [c.to_dict() for c in self.chunks],
            "vectors_b64": base64.b64encode(vec.tobytes()).decode("ascii"),
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        return path


def search(index: VectorIndex, query: str, k: int, lesion: Optional[Lesion] = None) -> list[tuple[str, float]]:
    return index.search(query, k, lesion)


def load_index(path: Union[str, Path], embedder: Optional[Embedder] = None) -> VectorIndex:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != INDEX_FORMAT_VERSION:
        raise ValueError(f"unsupported index format {payload.get('format_version')!r}")
    embedder = embedder or embedder_from_descriptor(payload["embedder"])
    if embedder.descriptor != payload["embedder"]:
        raise ValueError(f"index built with {payload['embedder']!r}, got embedder {embedder.descriptor!r}")
    chunks = [KnowledgeChunk.from_dict(d) for d in payload["chunks"]]
    raw = base64.b64decode(payload["vectors_b64"])
    vectors = np.frombuffer(raw, dtype="<f8").reshape(len(chunks), payload["dim"])
    return VectorIndex(chunks, vectors, embedder)


class IndexBuilder:
    """Single-writer accumulator; :meth:`seal` returns the immutable index."""

    def __init__(self, embedder: Optional[Embedder] = None):
        self.embedder = embedder or HashingEmbedder()
        self._chunks: list[KnowledgeChunk] = []
        self._vectors: list[np.ndarray] = []
        self._sealed = False

    def add(self, chunks: Iterable[KnowledgeChunk]) -> "IndexBuilder":
        if self._sealed:
            raise RuntimeError("index already sealed")
        for c in chunks:
            self._chunks.append(c)
            self._vectors.append(self.embedder.embed(c.text))
        return self

    def seal(self) -> VectorIndex:
        self._sealed = True
        vectors = np.vstack(self._vectors) if self._vectors else np.zeros((0, self.embedder.dim))
        return VectorIndex(self._chunks, vectors, self.embedder)


def build_index(
    corpus: Mapping[Lesion, Sequence[RawDocument]],
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    embedder: Optional[Embedder] = None,
) -> VectorIndex:
    builder = IndexBuilder(embedder)
    for lesion in LESIONS:
        for doc in corpus.get(lesion, ()):
            builder.add(chunk_document(doc, size, overlap, lesion))
    return builder.seal()
