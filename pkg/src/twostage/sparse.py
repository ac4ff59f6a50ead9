"""Okapi BM25 inverted index.

Serves both the lexical baseline and BM25 hard-negative mining. The scoring
convention is fixed so results are reproducible:

    IDF(t)    = ln(1 + (N - df + 0.5) / (df + 0.5))        (non-negative)
    tf part   = tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))
    score(q)  = sum over *unique* query terms of IDF * tf part

Duplicate query terms are scored once. No stemming, no stopword removal:
the tokenizer lowercases and splits on non-alphanumeric codepoints, which
keeps the lexical-gap behaviour of keyword search observable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .types import Document, RankedRun, Stage

__all__ = ["tokenize", "SparseIndex", "build_sparse_index"]

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric codepoint."""
    tokens = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            tokens.append("".join(word))
            word = []
    if word:
        tokens.append("".join(word))
    return tokens


@dataclass
class SparseIndex:
    """Immutable after build; safe for concurrent searches."""

    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc ordinal, tf)]
    doc_ids: list[str]
    doc_lengths: list[int]
    avg_doc_length: float
    k1: float
    b: float
    _idf: dict[str, float] = field(default_factory=dict, repr=False)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        cached = self._idf.get(term)
        if cached is None:
            df = len(self.postings.get(term, ()))
            cached = math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))
            self._idf[term] = cached
        return cached

    def bm25_score(self, query_terms: list[str], ordinal: int) -> float:
        """Score one document against the unique terms of the query."""
        if not 0 <= ordinal < self.doc_count:
            raise IndexError(f"doc ordinal {ordinal} out of range")
        length_norm = self.k1 * (
            1.0 - self.b + self.b * self.doc_lengths[ordinal] / self.avg_doc_length
        )
        score = 0.0
        for term in dict.fromkeys(query_terms):
            tf = 0
            for doc, freq in self.postings.get(term, ()):
                if doc == ordinal:
                    tf = freq
                    break
            if tf == 0:
                continue
            score += self.idf(term) * tf * (self.k1 + 1.0) / (tf + length_norm)
        return score

    def search(self, query: str, k: int, query_id: str = "") -> RankedRun:
        """Top-k documents matching at least one query term."""
        return self.search_terms(tokenize(query), k, query_id=query_id)

    def search_terms(self, query_terms: list[str], k: int, query_id: str = "") -> RankedRun:
        if k < 1:
            raise ValueError("k must be >= 1")
        scores: dict[int, float] = {}
        for term in dict.fromkeys(query_terms):
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for ordinal, tf in postings:
                length_norm = self.k1 * (
                    1.0 - self.b + self.b * self.doc_lengths[ordinal] / self.avg_doc_length
                )
                scores[ordinal] = scores.get(ordinal, 0.0) + idf * tf * (self.k1 + 1.0) / (
                    tf + length_norm
                )
        pairs = [(self.doc_ids[ordinal], score) for ordinal, score in scores.items()]
        return RankedRun.from_scores(query_id, pairs, Stage.FIRST_STAGE, k)


def build_sparse_index(
    corpus: list[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> SparseIndex:
    """Build the inverted index over ``title + " " + text`` of each document.

    Deterministic for a given corpus order.
    """
    if not corpus:
        raise ValueError("cannot build a sparse index over an empty corpus")
    if k1 <= 0:
        raise ValueError("k1 must be > 0")
    if not 0.0 <= b <= 1.0:
        raise ValueError("b must be in [0, 1]")

    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    doc_ids: list[str] = []
    for ordinal, doc in enumerate(corpus):
        terms = tokenize(doc.title + " " + doc.text)
        doc_lengths.append(len(terms))
        doc_ids.append(doc.id)
        counts: dict[str, int] = {}
        for term in terms:
            counts[term] = counts.get(term, 0) + 1
        for term, freq in counts.items():
            postings.setdefault(term, []).append((ordinal, freq))

    avg = sum(doc_lengths) / len(doc_lengths)
    return SparseIndex(
        postings=postings,
        doc_ids=doc_ids,
        doc_lengths=doc_lengths,
        avg_doc_length=avg,
        k1=k1,
        b=b,
    )
