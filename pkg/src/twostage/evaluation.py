"""Retrieval and answer-quality metrics, latency benchmarks, report files.

Recall@k is the fraction of queries with at least one gold document in the
top k. MCQ accuracy is plain proportion correct, with missing or invalid
predictions counted wrong rather than dropped. Benchmarks use a monotonic
clock, exclude a warm-up pass, and report both median and mean because desk
hardware is noisy.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .formats import McqItem
from .pipeline import Mode, RetrievalPipeline
from .types import RankedRun, TokenMatrix

__all__ = [
    "RecallReport",
    "AccuracyReport",
    "LatencyReport",
    "recall_at_k",
    "recall_report",
    "mcq_accuracy",
    "accuracy_report",
    "bench_indexing",
    "bench_inference",
    "emit_report",
]

log = logging.getLogger(__name__)

ACCURACY_TASKS = ("MMLU-Med", "MedQA", "MedMCQA", "PubMedQA*", "BioASQ-Y/N")


@dataclass(frozen=True)
class RecallReport:
    config: str
    recalls: dict[int, float]
    query_count: int
    excluded_query_count: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = sorted(self.recalls)
        for lo, hi in zip(ks, ks[1:]):
            if self.recalls[lo] > self.recalls[hi] + 1e-12:
                raise ValueError(
                    f"recall must be non-decreasing in k: "
                    f"R@{lo}={self.recalls[lo]} > R@{hi}={self.recalls[hi]}"
                )


@dataclass(frozen=True)
class AccuracyReport:
    config: str
    overall: float
    per_task: dict[str, float]
    item_count: int
    missing_predictions: int = 0
    invalid_predictions: int = 0


@dataclass(frozen=True)
class LatencyReport:
    config: str
    query_ms: float
    total_inference_ms: float
    rerank_ms: float | None = None
    query_ms_median: float | None = None
    rerank_ms_median: float | None = None
    total_ms_median: float | None = None
    index_ms_per_passage: float | None = None
    index_ms_median: float | None = None
    batch_size: int | None = None
    repetitions: int = 0


def recall_at_k(runs: list[RankedRun], qrels: dict[str, set[str]], k: int) -> float:
    """Mean over queries of "any gold doc in the top k"."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not runs:
        raise ValueError("no runs to score")
    hits = 0
    for run in runs:
        gold = qrels.get(run.query_id)
        if not gold:
            raise ValueError(f"query {run.query_id!r} has no gold documents in qrels")
        if gold.intersection(run.doc_ids()[:k]):
            hits += 1
    return hits / len(runs)


def recall_report(
    config: str,
    runs: list[RankedRun],
    qrels: dict[str, set[str]],
    ks: tuple[int, ...] = (3, 5, 10),
    corpus_ids: set[str] | None = None,
    metadata: dict | None = None,
) -> RecallReport:
    """Score runs at several depths.

    When ``corpus_ids`` is given, queries whose entire gold set falls outside
    the indexed corpus are excluded and counted, instead of silently
    deflating recall.
    """
    kept = runs
    excluded = 0
    if corpus_ids is not None:
        kept = []
        for run in runs:
            gold = qrels.get(run.query_id)
            if not gold:
                raise ValueError(f"query {run.query_id!r} has no gold documents in qrels")
            if gold & corpus_ids:
                kept.append(run)
            else:
                excluded += 1
    recalls = {k: recall_at_k(kept, qrels, k) for k in ks}
    return RecallReport(
        config=config,
        recalls=recalls,
        query_count=len(kept),
        excluded_query_count=excluded,
        metadata=dict(metadata or {}),
    )


def _prediction_correct(item: McqItem, letter: str | None) -> tuple[bool, bool, bool]:
    """-> (correct, missing, invalid)."""
    if letter is None:
        return False, True, False
    if letter not in dict(item.options):
        log.warning("prediction %r for item %s is not an option", letter, item.id)
        return False, False, True
    return letter == item.answer_key, False, False


def mcq_accuracy(predictions: dict[str, str], items: list[McqItem]) -> float:
    if not items:
        raise ValueError("no items to score")
    correct = 0
    for item in items:
        ok, _, _ = _prediction_correct(item, predictions.get(item.id))
        correct += ok
    return correct / len(items)


def accuracy_report(
    config: str, predictions: dict[str, str], items: list[McqItem]
) -> AccuracyReport:
    """Overall accuracy plus a per-task breakdown from the items' task tags."""
    if not items:
        raise ValueError("no items to score")
    correct = 0
    missing = 0
    invalid = 0
    by_task: dict[str, list[int]] = {}
    for item in items:
        ok, miss, bad = _prediction_correct(item, predictions.get(item.id))
        correct += ok
        missing += miss
        invalid += bad
        by_task.setdefault(item.task, []).append(int(ok))
    per_task = {task: sum(v) / len(v) for task, v in sorted(by_task.items())}
    return AccuracyReport(
        config=config,
        overall=correct / len(items),
        per_task=per_task,
        item_count=len(items),
        missing_predictions=missing,
        invalid_predictions=invalid,
    )


# --------------------------------------------------------------------------
# latency benchmarks
# --------------------------------------------------------------------------


def bench_indexing(
    records: list,
    builder,
    batch_size: int = 500,
    repetitions: int = 3,
    config: str = "index",
) -> LatencyReport:
    """Per-passage indexing cost over full batches, warm-up excluded.

    ``builder`` is called once per batch with the batch's records and must
    do the full embedding-to-index work for those passages.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    full = len(records) // batch_size
    if full < 1:
        raise ValueError(f"need at least one full batch of {batch_size}, got {len(records)} records")
    batches = [records[i * batch_size : (i + 1) * batch_size] for i in range(full)]

    builder(batches[0])  # warm-up, not measured
    per_passage = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for batch in batches:
            builder(batch)
        elapsed = time.perf_counter() - start
        per_passage.append(elapsed * 1000.0 / (full * batch_size))
    return LatencyReport(
        config=config,
        query_ms=0.0,
        total_inference_ms=0.0,
        index_ms_per_passage=float(np.mean(per_passage)),
        index_ms_median=float(np.median(per_passage)),
        batch_size=batch_size,
        repetitions=repetitions,
    )


def bench_inference(
    pipeline: RetrievalPipeline,
    queries: list[tuple[str, np.ndarray, TokenMatrix | None]],
    repetitions: int = 3,
    config: str = "inference",
) -> LatencyReport:
    """Per-query first-stage and re-rank timings, measured separately.

    The total is defined as their sum, so the additivity invariant holds
    exactly. One warm-up pass over all queries is excluded.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not queries:
        raise ValueError("no queries to benchmark")
    reranking = pipeline.config.mode is Mode.RETRIEVE_RERANK
    if reranking and any(tokens is None for _, _, tokens in queries):
        raise ValueError("rerank benchmarking requires token matrices for every query")

    for query_id, dense, tokens in queries:  # warm-up
        run = pipeline.first_stage(dense, query_id=query_id)
        if reranking:
            pipeline.rerank_stage(run, tokens)

    query_ms, rerank_ms = [], []
    for _ in range(repetitions):
        t_query = 0.0
        t_rerank = 0.0
        for query_id, dense, tokens in queries:
            start = time.perf_counter()
            run = pipeline.first_stage(dense, query_id=query_id)
            t_query += time.perf_counter() - start
            if reranking:
                start = time.perf_counter()
                pipeline.rerank_stage(run, tokens)
                t_rerank += time.perf_counter() - start
        query_ms.append(t_query * 1000.0 / len(queries))
        rerank_ms.append(t_rerank * 1000.0 / len(queries))

    mean_q = float(np.mean(query_ms))
    med_q = float(np.median(query_ms))
    if reranking:
        mean_r = float(np.mean(rerank_ms))
        med_r = float(np.median(rerank_ms))
        return LatencyReport(
            config=config,
            query_ms=mean_q,
            rerank_ms=mean_r,
            total_inference_ms=mean_q + mean_r,
            query_ms_median=med_q,
            rerank_ms_median=med_r,
            total_ms_median=med_q + med_r,
            repetitions=repetitions,
        )
    return LatencyReport(
        config=config,
        query_ms=mean_q,
        rerank_ms=None,
        total_inference_ms=mean_q,
        query_ms_median=med_q,
        total_ms_median=med_q,
        repetitions=repetitions,
    )


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

_RECALL_COLUMNS = ("config", "R@3", "R@5", "R@10")
_ACCURACY_COLUMNS = ("config",) + ACCURACY_TASKS + ("Avg",)
_LATENCY_COLUMNS = (
    "config",
    "index_ms_per_passage",
    "query_ms",
    "rerank_ms",
    "total_inference_ms",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.4f}"


def _report_rows(reports, kind: str) -> tuple[tuple[str, ...], list[list[str]]]:
    if kind == "recall":
        header = _RECALL_COLUMNS
        rows = [
            [r.config] + [_fmt(r.recalls.get(k)) for k in (3, 5, 10)]
            for r in reports
        ]
    elif kind == "accuracy":
        header = _ACCURACY_COLUMNS
        rows = []
        for r in reports:
            cells = [r.config]
            present = []
            for task in ACCURACY_TASKS:
                value = r.per_task.get(task)
                cells.append(_fmt(value))
                if value is not None:
                    present.append(value)
            avg = sum(present) / len(present) if present else r.overall
            cells.append(_fmt(avg))
            rows.append(cells)
    elif kind == "latency":
        header = _LATENCY_COLUMNS
        rows = [
            [
                r.config,
                _fmt(r.index_ms_per_passage),
                _fmt(r.query_ms),
                _fmt(r.rerank_ms),
                _fmt(r.total_inference_ms),
            ]
            for r in reports
        ]
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    return header, rows


def _infer_kind(report) -> str:
    if isinstance(report, RecallReport):
        return "recall"
    if isinstance(report, AccuracyReport):
        return "accuracy"
    if isinstance(report, LatencyReport):
        return "latency"
    raise TypeError(f"cannot emit report of type {type(report).__name__}")


def emit_report(reports: list, fmt: str, path, kind: str | None = None) -> None:
    """Write reports as csv, markdown, or an aligned text table."""
    if kind is None:
        if not reports:
            raise ValueError("empty report list needs an explicit kind")
        kind = _infer_kind(reports[0])
    mismatched = [r for r in reports if _infer_kind(r) != kind]
    if mismatched:
        raise TypeError(
            f"cannot mix report types: expected {kind}, "
            f"got {type(mismatched[0]).__name__}"
        )
    header, rows = _report_rows(reports, kind)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        text = buf.getvalue()
    elif fmt == "markdown":
        lines = [
            "| " + " | ".join(header) + " |",
            "| " + " | ".join("---" for _ in header) + " |",
        ]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        text = "\n".join(lines) + "\n"
    elif fmt == "table":
        widths = [
            max(len(header[i]), *(len(row[i]) for row in rows)) if rows else len(header[i])
            for i in range(len(header))
        ]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")

    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
