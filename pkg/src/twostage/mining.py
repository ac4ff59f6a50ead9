"""Negative passage mining for contrastive training.

Three strategies over a fixed corpus: uniform random, BM25 hard negatives
(lexically close but lower-ranked), and negatives mined from a retriever's
own top predictions. Every strategy derives a per-pair seed from the global
seed and the query id, so parallel and sequential mining agree.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .sparse import SparseIndex
from .types import RankedRun

__all__ = [
    "Strategy",
    "TrainingPairSpec",
    "MiningConfig",
    "MinedPair",
    "mine_random",
    "mine_bm25",
    "mine_from_retriever",
    "read_pair_specs",
    "write_pairs",
    "read_pairs",
]

DEFAULT_NEGATIVES = 32
DEFAULT_BM25_POOL = 42


class Strategy(enum.Enum):
    RANDOM = "random"
    BM25_HARD = "bm25"
    RETRIEVER_MINED = "retriever"


@dataclass(frozen=True)
class TrainingPairSpec:
    query_id: str
    query_text: str
    positive_doc_id: str


@dataclass(frozen=True)
class MiningConfig:
    strategy: Strategy
    negatives_per_pair: int = DEFAULT_NEGATIVES
    bm25_pool: int = DEFAULT_BM25_POOL
    seed: int = 0

    def __post_init__(self):
        if self.negatives_per_pair < 1:
            raise ValueError("negatives_per_pair must be >= 1")
        if self.strategy is Strategy.BM25_HARD and self.negatives_per_pair > self.bm25_pool - 1:
            raise ValueError("negatives_per_pair must be <= bm25_pool - 1 for BM25 mining")


@dataclass(frozen=True)
class MinedPair:
    """One training pair with its mined negatives.

    ``shortfall`` marks pairs where the corpus or candidate pool could not
    supply the full negative count; callers decide whether to keep them.
    """

    query_id: str
    positive_doc_id: str
    negative_doc_ids: tuple[str, ...]
    strategy: Strategy
    shortfall: bool = False

    def __post_init__(self):
        if self.positive_doc_id in self.negative_doc_ids:
            raise ValueError(f"positive {self.positive_doc_id!r} leaked into negatives")
        if len(set(self.negative_doc_ids)) != len(self.negative_doc_ids):
            raise ValueError(f"duplicate negatives for query {self.query_id!r}")


def _pair_seed(seed: int, query_id: str) -> int:
    digest = hashlib.blake2b(
        f"{seed}:{query_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def mine_random(spec: TrainingPairSpec, corpus_ids: list[str], cfg: MiningConfig) -> MinedPair:
    """Uniform sample of non-gold documents, without replacement."""
    candidates = [doc_id for doc_id in corpus_ids if doc_id != spec.positive_doc_id]
    if len(candidates) < cfg.negatives_per_pair:
        raise ValueError(
            f"corpus has only {len(candidates)} non-gold documents, "
            f"need {cfg.negatives_per_pair}"
        )
    rng = np.random.default_rng(_pair_seed(cfg.seed, spec.query_id))
    chosen = rng.choice(len(candidates), size=cfg.negatives_per_pair, replace=False)
    negatives = tuple(candidates[i] for i in chosen)
    return MinedPair(spec.query_id, spec.positive_doc_id, negatives, Strategy.RANDOM)


def mine_bm25(spec: TrainingPairSpec, index: SparseIndex, cfg: MiningConfig) -> MinedPair:
    """Bottom slice of the BM25 top-`bm25_pool`, gold excluded.

    The lowest-ranked survivors keep lexical overlap with the query while
    being least likely to be unlabeled positives.
    """
    run = index.search(spec.query_text, cfg.bm25_pool, query_id=spec.query_id)
    pool = [doc_id for doc_id in run.doc_ids() if doc_id != spec.positive_doc_id]
    take = cfg.negatives_per_pair
    negatives = tuple(pool[-take:]) if len(pool) > take else tuple(pool)
    return MinedPair(
        spec.query_id,
        spec.positive_doc_id,
        negatives,
        Strategy.BM25_HARD,
        shortfall=len(negatives) < cfg.negatives_per_pair,
    )


def mine_from_retriever(spec: TrainingPairSpec, run: RankedRun, cfg: MiningConfig) -> MinedPair:
    """Top-ranked retriever predictions, gold excluded, first n kept."""
    if len(run.candidates) < cfg.negatives_per_pair + 1:
        raise ValueError(
            f"run depth {len(run.candidates)} too shallow for "
            f"{cfg.negatives_per_pair} negatives (need depth >= n + 1)"
        )
    pool = [doc_id for doc_id in run.doc_ids() if doc_id != spec.positive_doc_id]
    negatives = tuple(pool[: cfg.negatives_per_pair])
    return MinedPair(spec.query_id, spec.positive_doc_id, negatives, Strategy.RETRIEVER_MINED)


def read_pair_specs(path) -> list[TrainingPairSpec]:
    """Read JSONL records {query_id, query_text, positive_doc_id}."""
    specs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                specs.append(
                    TrainingPairSpec(
                        query_id=str(obj["query_id"]),
                        query_text=str(obj["query_text"]),
                        positive_doc_id=str(obj["positive_doc_id"]),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: bad pair spec record: {exc}") from exc
    return specs


def write_pairs(path, pairs: list[MinedPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            record = {
                "query_id": pair.query_id,
                "positive_doc_id": pair.positive_doc_id,
                "negative_doc_ids": list(pair.negative_doc_ids),
                "strategy": pair.strategy.value,
            }
            if pair.shortfall:
                record["shortfall"] = True
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_pairs(path) -> list[MinedPair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pair = MinedPair(
                    query_id=obj["query_id"],
                    positive_doc_id=obj["positive_doc_id"],
                    negative_doc_ids=tuple(obj["negative_doc_ids"]),
                    strategy=Strategy(obj["strategy"]),
                    shortfall=bool(obj.get("shortfall", False)),
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad training pair record: {exc}") from exc
            pairs.append(pair)
    return pairs
