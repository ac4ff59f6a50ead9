"""Late-interaction scoring and second-stage re-ranking.

The MaxSim score between a query and a document is the sum, over query
tokens, of each token's best similarity against any document token. It
rewards documents that cover every facet of the query instead of matching
a single pooled vector, at the cost of storing one matrix per document.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import RankedRun, SimilarityKind, Stage, TokenMatrix

__all__ = ["maxsim_score", "TokenStore", "rerank"]


def _unit_rows(matrix: TokenMatrix, label: str) -> np.ndarray:
    rows = matrix.rows.astype(np.float64)
    if matrix.row_normalized:
        return rows
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"cosine MaxSim undefined: {label} has a zero-norm token row")
    return rows / norms


def maxsim_score(
    query_tokens: TokenMatrix, doc_tokens: TokenMatrix, kind: SimilarityKind
) -> float:
    """sum_i max_j sim(q_i, d_j), accumulated in float64."""
    if query_tokens.dim != doc_tokens.dim:
        raise ValueError(f"token dim mismatch: query {query_tokens.dim} vs doc {doc_tokens.dim}")
    if kind is SimilarityKind.COSINE:
        q = _unit_rows(query_tokens, "query")
        d = _unit_rows(doc_tokens, "document")
    else:
        q = query_tokens.rows.astype(np.float64)
        d = doc_tokens.rows.astype(np.float64)
    sims = q @ d.T
    return float(sims.max(axis=1).sum())


@dataclass
class TokenStore:
    """Immutable doc_id -> token matrix lookup with a single dim for all docs."""

    dim: int
    _matrices: dict[str, TokenMatrix] = field(default_factory=dict)

    @classmethod
    def from_matrices(cls, matrices: dict[str, TokenMatrix]) -> "TokenStore":
        if not matrices:
            raise ValueError("token store needs at least one document")
        dims = {m.dim for m in matrices.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent token dims in store: {sorted(dims)}")
        return cls(dim=dims.pop(), _matrices=dict(matrices))

    def __len__(self) -> int:
        return len(self._matrices)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._matrices

    def matrix_for(self, doc_id: str) -> TokenMatrix:
        try:
            return self._matrices[doc_id]
        except KeyError:
            raise KeyError(f"no token matrix for document {doc_id!r}") from None


def rerank(
    run: RankedRun,
    query_tokens: TokenMatrix,
    store: TokenStore,
    kind: SimilarityKind,
    k: int,
) -> RankedRun:
    """Re-score a first-stage run with MaxSim and keep the top k.

    Only documents present in the input run are considered, so recall@k of
    the output can never exceed recall at the first-stage depth.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not run.candidates:
        raise ValueError(f"cannot rerank empty run for query {run.query_id!r}")
    pairs = []
    for cand in run.candidates:
        score = maxsim_score(query_tokens, store.matrix_for(cand.doc_id), kind)
        pairs.append((cand.doc_id, score))
    return RankedRun.from_scores(run.query_id, pairs, Stage.RERANKED, k)
