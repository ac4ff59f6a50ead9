"""First-stage single-vector index: exact (full-scan) search.

Exact search is the ground-truth oracle for the approximate index and the
default for desk-scale corpora; the HNSW graph in :mod:`twostage.ann` is
opt-in for large collections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .formats import BadMagicError, TruncatedFileError
from .types import RankedRun, ScoredCandidate, SimilarityKind, Stage, as_dense_vector

__all__ = ["FlatIndex", "build_flat", "search_exact", "save_flat", "load_flat"]

_FLAT_MAGIC = b"TSFLAT01"


@dataclass
class FlatIndex:
    """Contiguous float32 vector store with cached norms under cosine."""

    kind: SimilarityKind
    ids: list[str]
    vectors: np.ndarray  # (doc_count, dim) float32, insertion order
    norms: np.ndarray | None  # (doc_count,) float64, only under cosine

    def __post_init__(self):
        self._id_arr = np.asarray(self.ids)
        self._id_to_ordinal = {doc_id: i for i, doc_id in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def doc_count(self) -> int:
        return self.vectors.shape[0]

    def vector_for(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._id_to_ordinal[doc_id]]

    def scores_for(self, q: np.ndarray) -> np.ndarray:
        """Similarity of ``q`` against every stored vector, in float64."""
        if q.shape[0] != self.dim:
            raise ValueError(f"query dim {q.shape[0]} != index dim {self.dim}")
        q64 = np.asarray(q, dtype=np.float64)
        scores = self.vectors @ q64
        if self.kind is SimilarityKind.COSINE:
            q_norm = float(np.linalg.norm(q64))
            if q_norm == 0.0:
                raise ValueError("cosine search undefined for zero-norm query")
            scores = scores / (self.norms * q_norm)
        return scores


def build_flat(records: list[tuple[str, np.ndarray]], kind: SimilarityKind) -> FlatIndex:
    """Build an exact-search index from (doc_id, vector) records.

    All vectors must share one dimension; under cosine every norm must be
    positive. Insertion order is preserved.
    """
    if not records:
        raise ValueError("cannot build an index from zero vectors")
    dim = None
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    for doc_id, values in records:
        vec = as_dense_vector(values, dim)
        if dim is None:
            dim = vec.shape[0]
        if doc_id in seen:
            raise ValueError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        ids.append(doc_id)
        rows.append(vec)
    vectors = np.vstack(rows)
    norms = None
    if kind is SimilarityKind.COSINE:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        if np.any(norms == 0.0):
            zero_id = ids[int(np.argmax(norms == 0.0))]
            raise ValueError(f"zero-norm vector {zero_id!r} not indexable under cosine")
    return FlatIndex(kind=kind, ids=ids, vectors=vectors, norms=norms)


def top_k_run(
    index: FlatIndex, scores: np.ndarray, k: int, stage: Stage, query_id: str = ""
) -> RankedRun:
    """Rank all scores with the standard tie rule and truncate to k."""
    # lexsort: primary key -scores ascending (= score descending), ties by id.
    order = np.lexsort((index._id_arr, -scores))[:k]
    candidates = tuple(
        ScoredCandidate(index.ids[i], float(scores[i]), stage) for i in order
    )
    return RankedRun(query_id, candidates)


def search_exact(index: FlatIndex, q: np.ndarray, k: int, query_id: str = "") -> RankedRun:
    """Exact top-k by similarity over all stored vectors."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.scores_for(q)
    return top_k_run(index, scores, k, Stage.FIRST_STAGE, query_id)


# --------------------------------------------------------------------------
# persistence (versioned, little-endian, bit-exact round-trip)
# --------------------------------------------------------------------------


def _write_flat_body(fh, index: FlatIndex) -> None:
    kind_code = 1 if index.kind is SimilarityKind.COSINE else 0
    fh.write(struct.pack("<BIQ", kind_code, index.dim, index.doc_count))
    for doc_id in index.ids:
        raw = doc_id.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
    fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def _read_flat_body(fh, path) -> FlatIndex:
    kind_code, dim, count = struct.unpack("<BIQ", _read_exact(fh, 13, path, "index header"))
    kind = SimilarityKind.COSINE if kind_code == 1 else SimilarityKind.DOT
    ids = []
    for i in range(count):
        (id_len,) = struct.unpack("<I", _read_exact(fh, 4, path, f"id length {i}"))
        ids.append(_read_exact(fh, id_len, path, f"id {i}").decode("utf-8"))
    raw = _read_exact(fh, count * dim * 4, path, "vectors")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    norms = None
    if kind is SimilarityKind.COSINE:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    return FlatIndex(kind=kind, ids=ids, vectors=vectors, norms=norms)


def save_flat(index: FlatIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FLAT_MAGIC)
        _write_flat_body(fh, index)


def load_flat(path) -> FlatIndex:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _FLAT_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        index = _read_flat_body(fh, path)
        if fh.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after index body")
    return index
