"""Approximate nearest-neighbour search over a flat index.

Hierarchical navigable small-world graph with seeded level assignment, so
two builds from the same input and seed produce identical graphs. Layer 0
contains every vector; upper layers thin out geometrically and provide
long-range entry points. Defaults (M=16, ef_construction=200, ef_search=128)
are chosen to give recall@10 >= 0.95 against exact search on desk-scale
Gaussian data.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .dense import FlatIndex, _read_exact, _read_flat_body, _write_flat_body
from .formats import BadMagicError
from .types import RankedRun, SimilarityKind, Stage

__all__ = ["AnnIndex", "build_ann", "search_ann", "save_ann", "load_ann"]

DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 128

_ANN_MAGIC = b"TSHNSW01"


@dataclass
class AnnIndex:
    base: FlatIndex
    m: int
    ef_construction: int
    seed: int
    levels: list[int]
    # neighbors[node][layer] -> list of node ordinals; layer 0 exists for all
    neighbors: list[list[list[int]]]
    entry_point: int
    max_level: int
    _unit: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._unit is None:
            self._unit = _internal_matrix(self.base)

    @property
    def m0(self) -> int:
        return 2 * self.m

    def _score_batch(self, q: np.ndarray, nodes: list[int]) -> np.ndarray:
        return self._unit[nodes] @ q

    def _search_layer(
        self, q: np.ndarray, entry: list[int], layer: int, ef: int
    ) -> list[tuple[float, int]]:
        """Greedy best-first search on one layer.

        Returns up to ``ef`` (similarity, node) pairs sorted by similarity
        descending, node ascending on ties.
        """
        visited = np.zeros(self.base.doc_count, dtype=bool)
        visited[entry] = True
        sims = self._score_batch(q, entry)
        # candidates: min-heap on -similarity (pop closest first)
        candidates = [(-s, n) for s, n in zip(sims.tolist(), entry)]
        heapq.heapify(candidates)
        # best: min-heap on similarity (worst of the kept set at the top)
        best = [(s, n) for s, n in zip(sims.tolist(), entry)]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)

        while candidates:
            neg_sim, node = heapq.heappop(candidates)
            if len(best) >= ef and -neg_sim < best[0][0]:
                break
            fresh = [n for n in self.neighbors[node][layer] if not visited[n]]
            if not fresh:
                continue
            visited[fresh] = True
            fresh_sims = self._score_batch(q, fresh).tolist()
            for n, s in zip(fresh, fresh_sims):
                if len(best) < ef:
                    heapq.heappush(best, (s, n))
                    heapq.heappush(candidates, (-s, n))
                elif s > best[0][0]:
                    heapq.heapreplace(best, (s, n))
                    heapq.heappush(candidates, (-s, n))
        return sorted(best, key=lambda pair: (-pair[0], pair[1]))

    def _select_neighbors(self, ranked: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity-aware neighbor selection.

        A candidate is kept only while it is closer to the query than to any
        already-selected neighbor; pruned candidates back-fill remaining
        slots. This keeps the graph navigable instead of clustering edges.
        """
        if len(ranked) <= m:
            return [n for _, n in ranked]
        selected: list[int] = []
        discarded: list[int] = []
        for sim, node in ranked:
            if len(selected) == m:
                break
            if not selected:
                selected.append(node)
                continue
            to_selected = self._score_batch(self._unit[node], selected)
            if sim > float(to_selected.max()):
                selected.append(node)
            else:
                discarded.append(node)
        for node in discarded:
            if len(selected) == m:
                break
            selected.append(node)
        return selected

    def _insert(self, node: int) -> None:
        level = self.levels[node]
        self.neighbors[node] = [[] for _ in range(level + 1)]
        q = self._unit[node]

        entry = [self.entry_point]
        for layer in range(self.max_level, level, -1):
            entry = [self._search_layer(q, entry, layer, 1)[0][1]]

        for layer in range(min(level, self.max_level), -1, -1):
            ranked = self._search_layer(q, entry, layer, self.ef_construction)
            cap = self.m0 if layer == 0 else self.m
            selected = self._select_neighbors(ranked, cap)
            self.neighbors[node][layer] = list(selected)
            for other in selected:
                other_nbrs = self.neighbors[other][layer]
                other_nbrs.append(node)
                if len(other_nbrs) > cap:
                    sims = self._score_batch(self._unit[other], other_nbrs)
                    ranked_nbrs = sorted(
                        zip(sims.tolist(), other_nbrs), key=lambda pair: (-pair[0], pair[1])
                    )
                    self.neighbors[other][layer] = self._select_neighbors(ranked_nbrs, cap)
            entry = [n for _, n in ranked]

        if level > self.max_level:
            self.entry_point = node
            self.max_level = level


def _internal_matrix(base: FlatIndex) -> np.ndarray:
    """Graph construction/search scores: raw dot, or dot on unit rows for cosine."""
    if base.kind is SimilarityKind.COSINE:
        return (base.vectors / base.norms[:, None]).astype(np.float32)
    return base.vectors


def _draw_levels(count: int, m: int, seed: int) -> list[int]:
    # Geometric layer assignment with the standard 1/ln(M) multiplier.
    rng = np.random.default_rng(seed)
    ml = 1.0 / math.log(m)
    uniform = rng.random(count)
    return [int(-math.log(u) * ml) for u in uniform]


def build_ann(
    flat: FlatIndex,
    m: int = DEFAULT_M,
    ef_construction: int = DEFAULT_EF_CONSTRUCTION,
    seed: int = 0,
) -> AnnIndex:
    """Build the layered graph over an existing flat index.

    Insertion is sequential so the result is fully determined by the input
    order and the seed.
    """
    if m < 2:
        raise ValueError("M must be >= 2")
    if ef_construction < m:
        raise ValueError("ef_construction must be >= M")
    levels = _draw_levels(flat.doc_count, m, seed)
    index = AnnIndex(
        base=flat,
        m=m,
        ef_construction=ef_construction,
        seed=seed,
        levels=levels,
        neighbors=[None] * flat.doc_count,
        entry_point=0,
        max_level=levels[0],
    )
    index.neighbors[0] = [[] for _ in range(levels[0] + 1)]
    for node in range(1, flat.doc_count):
        index._insert(node)
    return index


def search_ann(
    index: AnnIndex, q: np.ndarray, k: int, ef_search: int = DEFAULT_EF_SEARCH, query_id: str = ""
) -> RankedRun:
    """Approximate top-k. Final scores are exact float64 similarities."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if ef_search < k:
        raise ValueError("ef_search must be >= k")
    base = index.base
    if q.shape[0] != base.dim:
        raise ValueError(f"query dim {q.shape[0]} != index dim {base.dim}")

    q32 = np.asarray(q, dtype=np.float32)
    if base.kind is SimilarityKind.COSINE:
        q_norm = float(np.linalg.norm(q32.astype(np.float64)))
        if q_norm == 0.0:
            raise ValueError("cosine search undefined for zero-norm query")
        q32 = (q32 / q_norm).astype(np.float32)

    entry = [index.entry_point]
    for layer in range(index.max_level, 0, -1):
        entry = [index._search_layer(q32, entry, layer, 1)[0][1]]
    found = index._search_layer(q32, entry, 0, ef_search)

    nodes = [n for _, n in found]
    q64 = np.asarray(q, dtype=np.float64)
    scores = base.vectors[nodes] @ q64
    if base.kind is SimilarityKind.COSINE:
        scores = scores / (base.norms[nodes] * np.linalg.norm(q64))
    pairs = [(base.ids[n], float(s)) for n, s in zip(nodes, scores)]
    return RankedRun.from_scores(query_id, pairs, Stage.FIRST_STAGE, k)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_ann(index: AnnIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_ANN_MAGIC)
        _write_flat_body(fh, index.base)
        fh.write(
            struct.pack(
                "<IIQQI",
                index.m,
                index.ef_construction,
                index.seed,
                index.entry_point,
                index.max_level,
            )
        )
        fh.write(np.asarray(index.levels, dtype="<u4").tobytes())
        for node in range(index.base.doc_count):
            layers = index.neighbors[node]
            fh.write(struct.pack("<I", len(layers)))
            for nbrs in layers:
                fh.write(struct.pack("<I", len(nbrs)))
                fh.write(np.asarray(nbrs, dtype="<u4").tobytes())


def load_ann(path) -> AnnIndex:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _ANN_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        base = _read_flat_body(fh, path)
        m, ef_construction, seed, entry_point, max_level = struct.unpack(
            "<IIQQI", _read_exact(fh, 28, path, "graph header")
        )
        levels_raw = _read_exact(fh, base.doc_count * 4, path, "levels")
        levels = np.frombuffer(levels_raw, dtype="<u4").astype(int).tolist()
        neighbors: list[list[list[int]]] = []
        for node in range(base.doc_count):
            (layer_count,) = struct.unpack("<I", _read_exact(fh, 4, path, f"node {node} layers"))
            layers = []
            for layer in range(layer_count):
                (n,) = struct.unpack(
                    "<I", _read_exact(fh, 4, path, f"node {node} layer {layer} size")
                )
                raw = _read_exact(fh, n * 4, path, f"node {node} layer {layer} neighbors")
                layers.append(np.frombuffer(raw, dtype="<u4").astype(int).tolist())
            neighbors.append(layers)
    return AnnIndex(
        base=base,
        m=m,
        ef_construction=ef_construction,
        seed=seed,
        levels=levels,
        neighbors=neighbors,
        entry_point=entry_point,
        max_level=max_level,
    )
