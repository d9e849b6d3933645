"""Text embedding providers for questions and relation labels.

Two implementations sit behind one interface: a deterministic built-in based
on character n-gram feature hashing (no external models, reproducible tests)
and a file-backed provider that serves vectors precomputed offline by any
encoder. Providers are read-only after construction and safe to share.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np

from .errors import PathQAError

DEFAULT_DIMENSION = 256
_NGRAM_SIZE = 3


class EmbeddingError(PathQAError):
    """Empty input text or a lookup miss in a file-backed provider."""


class EmbeddingProvider(Protocol):
    """Uniform interface: fixed output dimension, text -> vector."""

    dimension: int
    deterministic: bool

    def embed(self, text: str) -> np.ndarray: ...


def _require_text(text: str) -> str:
    trimmed = text.strip()
    if not trimmed:
        raise EmbeddingError("cannot embed empty text")
    return trimmed


class HashingEmbeddingProvider:
    """Deterministic embeddings from signed character-trigram hashing.

    Each trigram of the (boundary-padded) raw text is hashed into one of
    ``dimension`` signed buckets; the resulting count vector is L2-normalized.
    Identical text always produces identical vectors, across processes.
    """

    deterministic = True

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        if dimension < 2:
            raise EmbeddingError(f"dimension must be >= 2, got {dimension}")
        self.dimension = dimension
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        trimmed = _require_text(text)
        cached = self._cache.get(trimmed)
        if cached is not None:
            return cached
        vec = np.zeros(self.dimension, dtype=np.float64)
        padded = f" {trimmed} "
        for i in range(len(padded) - _NGRAM_SIZE + 1):
            gram = padded[i : i + _NGRAM_SIZE]
            h = int.from_bytes(
                hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little"
            )
            sign = 1.0 if h & 1 else -1.0
            vec[(h >> 1) % self.dimension] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # signs cancelled exactly; fall back to a single whole-text bucket
            h = int.from_bytes(
                hashlib.blake2b(trimmed.encode("utf-8"), digest_size=8).digest(), "little"
            )
            vec[h % self.dimension] = 1.0
            norm = 1.0
        vec /= norm
        vec.setflags(write=False)
        self._cache[trimmed] = vec
        return vec


class FileEmbeddingProvider:
    """Serves embeddings from a JSONL cache of ``{"text": ..., "vector": [...]}``.

    The cache is produced offline by any encoder; all vectors must share one
    dimension and be finite. Lookups are exact on the raw text.
    """

    deterministic = True

    def __init__(self, path: Union[str, Path]):
        self._path = str(path)
        self._table: dict[str, np.ndarray] = {}
        dimension = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise EmbeddingError(f"{path}: line {lineno}: invalid JSON: {exc}") from None
                if "text" not in row or "vector" not in row:
                    raise EmbeddingError(f"{path}: line {lineno}: rows need 'text' and 'vector'")
                vec = np.asarray(row["vector"], dtype=np.float64)
                if vec.ndim != 1:
                    raise EmbeddingError(f"{path}: line {lineno}: vector must be 1-D")
                if not np.all(np.isfinite(vec)):
                    raise EmbeddingError(f"{path}: line {lineno}: non-finite vector entries")
                if dimension is None:
                    dimension = vec.shape[0]
                elif vec.shape[0] != dimension:
                    raise EmbeddingError(
                        f"{path}: line {lineno}: dimension {vec.shape[0]} != {dimension}"
                    )
                vec.setflags(write=False)
                self._table[str(row["text"])] = vec
        if dimension is None:
            raise EmbeddingError(f"{path}: embedding cache is empty")
        self.dimension = int(dimension)

    def embed(self, text: str) -> np.ndarray:
        trimmed = _require_text(text)
        try:
            return self._table[trimmed]
        except KeyError:
            raise EmbeddingError(
                f"{self._path}: no embedding for text {trimmed!r}"
            ) from None


def provider_from_spec(spec: str) -> EmbeddingProvider:
    """Build a provider from a CLI spec: ``builtin:<dim>`` or ``file:<path>``."""
    kind, _, arg = spec.partition(":")
    if kind == "builtin":
        dim = int(arg) if arg else DEFAULT_DIMENSION
        return HashingEmbeddingProvider(dim)
    if kind == "file":
        if not arg:
            raise EmbeddingError("file provider spec needs a path: file:<path>")
        return FileEmbeddingProvider(arg)
    raise EmbeddingError(f"unknown embedding provider spec {spec!r}")


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise EmbeddingError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine similarity of a zero-norm vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def question_path_similarity(h_q: np.ndarray, relation_embeddings: Sequence[np.ndarray]) -> float:
    """Mean cosine similarity between a question vector and each relation vector.

    This is the SIM ranking baseline; being a mean, it is order-invariant in
    the relation sequence.
    """
    if not len(relation_embeddings):
        raise EmbeddingError("path similarity needs at least one relation embedding")
    return float(np.mean([cosine_similarity(h_q, h_r) for h_r in relation_embeddings]))
