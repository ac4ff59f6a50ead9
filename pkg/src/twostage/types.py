"""Shared domain types and similarity primitives.

Everything here is immutable after construction and safe to share across
threads. Scores are always accumulated in float64 even though embeddings
are stored as float32.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SimilarityKind",
    "Stage",
    "Document",
    "Query",
    "TokenMatrix",
    "ScoredCandidate",
    "RankedRun",
    "as_dense_vector",
    "similarity",
    "ranked_candidates",
]


class SimilarityKind(enum.Enum):
    """Similarity function used by an index or scorer."""

    DOT = "dot"
    COSINE = "cosine"


class Stage(enum.Enum):
    """Provenance of a ranked candidate: fast first stage or re-ranked."""

    FIRST_STAGE = "first_stage"
    RERANKED = "reranked"


@dataclass(frozen=True)
class Document:
    """A retrievable text unit with a stable string id."""

    id: str
    title: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("document id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"document {self.id!r} has empty text")


@dataclass(frozen=True)
class Query:
    """A query with optional gold-relevance links.

    An empty gold set is legal: such queries are usable for latency
    benchmarks but must be filtered before recall evaluation.
    """

    id: str
    text: str
    gold_doc_ids: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.id:
            raise ValueError("query id must be non-empty")
        object.__setattr__(self, "gold_doc_ids", frozenset(self.gold_doc_ids))


def as_dense_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and convert ``values`` into a float32 1-D embedding.

    Rejects NaN/Inf components and, when ``dim`` is given, any length
    mismatch.
    """
    vec = np.asarray(values, dtype=np.float32)
    if vec.ndim != 1:
        raise ValueError(f"dense vector must be 1-D, got shape {vec.shape}")
    if vec.size == 0:
        raise ValueError("dense vector must be non-empty")
    if dim is not None and vec.shape[0] != dim:
        raise ValueError(f"expected dim {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("dense vector contains NaN or Inf")
    return vec


@dataclass(frozen=True)
class TokenMatrix:
    """Per-token embedding matrix for one text (token_count x dim, float32).

    ``row_normalized`` records whether the producing encoder L2-normalized
    each row; when set, every row norm must be within 1e-4 of 1.0.
    """

    rows: np.ndarray
    row_normalized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError(f"token matrix must be 2-D and non-empty, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("token matrix contains NaN or Inf")
        if self.row_normalized:
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValueError("row_normalized set but some row norm deviates from 1.0 by > 1e-4")
        object.__setattr__(self, "rows", rows)

    @property
    def token_count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ScoredCandidate:
    doc_id: str
    score: float
    stage: Stage

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"candidate {self.doc_id!r} has non-finite score")


def ranked_candidates(
    scored: list[tuple[str, float]], stage: Stage, k: int | None = None
) -> tuple[ScoredCandidate, ...]:
    """Sort (doc_id, score) pairs into the standard ranked order.

    Score descending, ties broken by ascending doc_id, optionally truncated
    to the top ``k``. This tie rule is used by every ranked list in the
    engine so results are reproducible.
    """
    ordered = sorted(scored, key=lambda item: (-item[1], item[0]))
    if k is not None:
        ordered = ordered[:k]
    return tuple(ScoredCandidate(doc_id, float(score), stage) for doc_id, score in ordered)


@dataclass(frozen=True)
class RankedRun:
    """An ordered result list for one query.

    Candidates must already be in standard order (score descending, doc_id
    ascending on ties) and free of duplicate doc ids.
    """

    query_id: str
    candidates: tuple[ScoredCandidate, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        seen = set()
        for cand in self.candidates:
            if cand.doc_id in seen:
                raise ValueError(f"duplicate doc_id {cand.doc_id!r} in run {self.query_id!r}")
            seen.add(cand.doc_id)
        for prev, cur in zip(self.candidates, self.candidates[1:]):
            if cur.score > prev.score or (cur.score == prev.score and cur.doc_id < prev.doc_id):
                raise ValueError(f"run {self.query_id!r} is not in ranked order")

    @classmethod
    def from_scores(
        cls, query_id: str, scored: list[tuple[str, float]], stage: Stage, k: int | None = None
    ) -> "RankedRun":
        return cls(query_id, ranked_candidates(scored, stage, k))

    def doc_ids(self) -> list[str]:
        return [cand.doc_id for cand in self.candidates]

    def top(self, k: int) -> "RankedRun":
        return RankedRun(self.query_id, self.candidates[:k])


def similarity(u: np.ndarray, v: np.ndarray, kind: SimilarityKind) -> float:
    """Dot product or cosine similarity of two dense vectors.

    Accumulates in float64. Cosine requires both norms to be positive.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    u64 = u.astype(np.float64, copy=False)
    v64 = v.astype(np.float64, copy=False)
    dot = float(np.dot(u64, v64))
    if kind is SimilarityKind.DOT:
        return dot
    nu = float(np.linalg.norm(u64))
    nv = float(np.linalg.norm(v64))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return dot / (nu * nv)
