"""Two-stage retrieve-and-rerank orchestration.

A pipeline owns immutable indexes plus configuration and answers queries in
two steps: a fast first stage over pooled vectors (exact scan or the layered
graph) followed by an optional MaxSim re-rank of the k_init candidates.
Because the second stage only permutes and truncates the first-stage list,
recall of the full pipeline is capped by first-stage recall at depth k_init.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .ann import DEFAULT_EF_SEARCH, AnnIndex, search_ann
from .dense import FlatIndex, search_exact
from .maxsim import TokenStore, rerank
from .types import Document, RankedRun, SimilarityKind, TokenMatrix

__all__ = [
    "Mode",
    "PipelineConfig",
    "ContextBundle",
    "RetrievalPipeline",
    "two_stage_search",
    "assemble_context",
]

DEFAULT_K = 5
DEFAULT_K_INIT = 20


class Mode(enum.Enum):
    RETRIEVE_ONLY = "retrieve_only"
    RETRIEVE_RERANK = "retrieve_rerank"


@dataclass(frozen=True)
class PipelineConfig:
    """Search behavior knobs; immutable and shareable across threads."""

    k: int = DEFAULT_K
    k_init: int = DEFAULT_K_INIT
    mode: Mode = Mode.RETRIEVE_RERANK
    kind: SimilarityKind = SimilarityKind.COSINE
    use_ann: bool = False
    ef_search: int = DEFAULT_EF_SEARCH

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k > self.k_init:
            raise ValueError(f"k ({self.k}) must not exceed k_init ({self.k_init})")
        if self.use_ann and self.ef_search < self.k_init:
            raise ValueError("ef_search must be >= k_init when the ANN first stage is used")


@dataclass(frozen=True)
class ContextBundle:
    """Final ranked passages packaged for the generator prompt."""

    query_text: str
    passages: tuple[tuple[str, str, str], ...]  # (doc_id, title, text) in rank order
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.passages) != len(self.scores):
            raise ValueError("passages and scores must be parallel")


@dataclass
class RetrievalPipeline:
    config: PipelineConfig
    flat: FlatIndex
    ann: AnnIndex | None = None
    tokens: TokenStore | None = None

    def __post_init__(self):
        if self.flat.kind is not self.config.kind:
            raise ValueError("index similarity kind does not match pipeline config")
        if self.config.use_ann and self.ann is None:
            raise ValueError("config requests the ANN first stage but no ANN index was given")
        if self.config.mode is Mode.RETRIEVE_RERANK and self.tokens is None:
            raise ValueError("rerank mode requires a token store")

    def first_stage(self, q_dense: np.ndarray, query_id: str = "") -> RankedRun:
        """Top-k_init candidates from the dense index."""
        depth = min(self.config.k_init, self.flat.doc_count)
        if self.config.use_ann:
            ef = max(self.config.ef_search, depth)
            return search_ann(self.ann, q_dense, depth, ef_search=ef, query_id=query_id)
        return search_exact(self.flat, q_dense, depth, query_id=query_id)

    def rerank_stage(self, run: RankedRun, q_tokens: TokenMatrix) -> RankedRun:
        return rerank(run, q_tokens, self.tokens, self.config.kind, self.config.k)

    def search(
        self, q_dense: np.ndarray, q_tokens: TokenMatrix | None = None, query_id: str = ""
    ) -> RankedRun:
        return two_stage_search(q_dense, q_tokens, self, query_id=query_id)


def two_stage_search(
    q_dense: np.ndarray,
    q_tokens: TokenMatrix | None,
    pipeline: RetrievalPipeline,
    query_id: str = "",
) -> RankedRun:
    """Run the configured flow and return the final top-k RankedRun."""
    cfg = pipeline.config
    first = pipeline.first_stage(q_dense, query_id=query_id)
    if cfg.mode is Mode.RETRIEVE_ONLY:
        return first.top(cfg.k)
    if q_tokens is None:
        raise ValueError("rerank mode requires query token embeddings")
    return pipeline.rerank_stage(first, q_tokens)


def assemble_context(
    run: RankedRun, corpus: dict[str, Document], query_text: str
) -> ContextBundle:
    """Resolve ranked doc_ids to passages, preserving rank order.

    Passage text is left untruncated; length budgeting belongs to the
    generator client.
    """
    passages = []
    scores = []
    for cand in run.candidates:
        doc = corpus.get(cand.doc_id)
        if doc is None:
            raise KeyError(f"run references unknown document {cand.doc_id!r}")
        passages.append((doc.id, doc.title, doc.text))
        scores.append(cand.score)
    return ContextBundle(query_text=query_text, passages=tuple(passages), scores=tuple(scores))
