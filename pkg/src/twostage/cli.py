"""Command-line entry point wiring indexing, search, mining, training,
evaluation, and benchmarking into one binary.

Configuration comes from an optional JSON file plus flag overrides (flags
win). The effective configuration is echoed to stderr at startup so every
run is reproducible from its log. Exit codes: 0 success, 1 usage error,
2 input or format error, 3 external-service failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import ann as ann_mod
from . import dense as dense_mod
from .evaluation import bench_indexing, bench_inference, emit_report, recall_report
from .formats import (
    FormatError,
    load_dense_map,
    load_token_map,
    read_corpus,
    read_mcq_items,
    read_qrels,
    read_run,
    write_run,
)
from .maxsim import TokenStore
from .mining import (
    MiningConfig,
    Strategy,
    mine_bm25,
    mine_from_retriever,
    mine_random,
    read_pair_specs,
    read_pairs,
    write_pairs,
)
from .pipeline import Mode, PipelineConfig, RetrievalPipeline
from .rag import GeneratorConfig, GeneratorError, run_rag_eval
from .sparse import build_sparse_index
from .training import Loss, TrainConfig, config_digest, save_adapter, train_adapter
from .types import SimilarityKind

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_SERVICE = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise UsageError(message)


def _kind(name: str) -> SimilarityKind:
    try:
        return SimilarityKind(name)
    except ValueError:
        raise UsageError(f"unknown similarity kind {name!r} (expected dot or cosine)")


def _load_index(path):
    """Open a flat or graph index file by sniffing its magic."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == ann_mod._ANN_MAGIC:
        index = ann_mod.load_ann(path)
        return index.base, index
    return dense_mod.load_flat(path), None


def _echo_config(args: argparse.Namespace) -> None:
    shown = {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in ("func",) and value is not None
    }
    print("effective config: " + json.dumps(shown, default=str), file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_index(args) -> int:
    header, vectors = load_dense_map(args.embeddings)
    records = list(vectors.items())
    kind = _kind(args.kind)
    start = time.perf_counter()
    flat = dense_mod.build_flat(records, kind)
    if args.ann:
        if args.m < 2:
            raise UsageError("--m must be >= 2")
        if args.ef_construction < args.m:
            raise UsageError("--ef-construction must be >= --m")
        index = ann_mod.build_ann(flat, m=args.m, ef_construction=args.ef_construction, seed=args.seed)
        elapsed = time.perf_counter() - start
        ann_mod.save_ann(index, args.out)
    else:
        elapsed = time.perf_counter() - start
        dense_mod.save_flat(flat, args.out)
    per_passage = elapsed * 1000.0 / len(records)
    print(f"indexed {len(records)} passages in {elapsed:.2f}s ({per_passage:.3f} ms/passage)")
    print(f"index written to {args.out}")
    return EXIT_OK


def _build_pipeline(args, need_tokens: bool) -> tuple[RetrievalPipeline, object]:
    flat, graph = _load_index(args.index)
    mode = Mode.RETRIEVE_RERANK if args.mode == "rerank" else Mode.RETRIEVE_ONLY
    tokens = None
    if mode is Mode.RETRIEVE_RERANK or need_tokens:
        if not args.doc_tokens:
            raise UsageError("rerank mode requires --doc-tokens")
        _, token_map = load_token_map(args.doc_tokens)
        tokens = TokenStore.from_matrices(token_map)
    try:
        cfg = PipelineConfig(
            k=args.k,
            k_init=args.k_init,
            mode=mode,
            kind=flat.kind,
            use_ann=graph is not None,
            ef_search=max(args.ef_search, args.k_init),
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    return RetrievalPipeline(config=cfg, flat=flat, ann=graph, tokens=tokens), flat


def _query_token_map(args):
    if not args.query_tokens:
        raise UsageError("rerank mode requires --query-tokens")
    _, token_map = load_token_map(args.query_tokens)
    return token_map


def cmd_search(args) -> int:
    pipeline, _ = _build_pipeline(args, need_tokens=False)
    _, queries = load_dense_map(args.queries)
    query_tokens = None
    if pipeline.config.mode is Mode.RETRIEVE_RERANK:
        query_tokens = _query_token_map(args)
        missing = [qid for qid in queries if qid not in query_tokens]
        if missing:
            raise KeyError(f"missing query token matrices for: {missing[:5]}")
    runs = []
    for query_id, vec in queries.items():
        tokens = query_tokens[query_id] if query_tokens else None
        runs.append(pipeline.search(vec, tokens, query_id=query_id))
    write_run(runs, args.tag, args.out)
    print(f"wrote {len(runs)} runs to {args.out}")
    return EXIT_OK


def cmd_mine(args) -> int:
    specs = read_pair_specs(args.pairs)
    try:
        cfg = MiningConfig(
            strategy=Strategy(args.strategy),
            negatives_per_pair=args.negatives,
            bm25_pool=args.pool,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc))

    if cfg.strategy is Strategy.RANDOM:
        corpus = read_corpus(args.corpus)
        ids = [doc.id for doc in corpus]
        mined = [mine_random(spec, ids, cfg) for spec in specs]
    elif cfg.strategy is Strategy.BM25_HARD:
        corpus = read_corpus(args.corpus)
        index = build_sparse_index(corpus)
        mined = [mine_bm25(spec, index, cfg) for spec in specs]
    else:
        runs = {run.query_id: run for run in read_run(args.run)}
        missing = [spec.query_id for spec in specs if spec.query_id not in runs]
        if missing:
            raise KeyError(f"run file lacks queries: {missing[:5]}")
        mined = [mine_from_retriever(spec, runs[spec.query_id], cfg) for spec in specs]

    write_pairs(args.out, mined)
    shortfalls = sum(pair.shortfall for pair in mined)
    note = f" ({shortfalls} with shortfall)" if shortfalls else ""
    print(f"mined {len(mined)} pairs to {args.out}{note}")
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = read_pairs(args.pairs)
    _, query_vecs = load_dense_map(args.query_embeddings)
    _, doc_vecs = load_dense_map(args.doc_embeddings)
    try:
        cfg = TrainConfig(
            loss=Loss(args.loss),
            kind=_kind(args.kind),
            temperature=args.temperature,
            batch_size=args.batch_size,
            epochs=args.epochs,
            learning_rate=args.lr,
            momentum=args.momentum,
            seed=args.seed,
            dim_out=args.dim_out,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    adapter, log = train_adapter(pairs, query_vecs, doc_vecs, cfg)
    save_adapter(args.out, adapter, cfg.kind, cfg.seed, config_digest(cfg))
    for epoch, loss in enumerate(log.epoch_losses, start=1):
        print(f"epoch {epoch}: loss {loss:.6f}")
    print(
        f"training-set loss {log.initial_eval_loss:.6f} -> {log.final_eval_loss:.6f}"
        + (" (reverted to init)" if log.reverted else "")
    )
    print(f"adapter written to {args.out}")
    return EXIT_OK


def cmd_eval_recall(args) -> int:
    runs = read_run(args.run)
    qrels = read_qrels(args.qrels)
    ks = tuple(int(k) for k in args.ks.split(","))
    corpus_ids = None
    if args.corpus:
        corpus_ids = {doc.id for doc in read_corpus(args.corpus)}
    report = recall_report(args.config_label, runs, qrels, ks=ks, corpus_ids=corpus_ids)
    emit_report([report], args.format, args.out)
    for k in ks:
        print(f"R@{k}: {report.recalls[k]:.4f}")
    if report.excluded_query_count:
        print(f"excluded {report.excluded_query_count} queries with no gold in corpus")
    print(f"report written to {args.out}")
    return EXIT_OK


def _stub_generate_fn(spec: str, items):
    """Built-in generators for offline runs: stub:key or stub:<LETTER>."""
    by_question = {item.question: item for item in items}

    def answer_for(prompt: str) -> str:
        if spec == "key":
            for question, item in by_question.items():
                if f"**Question:** {question}\n" in prompt:
                    return item.answer_key
            raise ValueError("stub generator could not match prompt to an item")
        return spec

    def fn(prompt: str) -> str:
        letter = answer_for(prompt)
        return json.dumps(
            {
                "step_by_step_thinking": "stubbed",
                "relevant_context": "YES",
                "answer_choice": letter,
            }
        )

    return fn


def cmd_eval_rag(args) -> int:
    items = read_mcq_items(args.items)
    corpus = {doc.id: doc for doc in read_corpus(args.corpus)}
    pipeline, _ = _build_pipeline(args, need_tokens=False)
    _, query_vecs = load_dense_map(args.query_embeddings)
    query_tokens = None
    if pipeline.config.mode is Mode.RETRIEVE_RERANK:
        query_tokens = _query_token_map(args)
    query_inputs = {}
    for item in items:
        if item.id not in query_vecs:
            raise KeyError(f"no query embedding for item {item.id!r}")
        tokens = query_tokens.get(item.id) if query_tokens else None
        query_inputs[item.id] = (query_vecs[item.id], tokens)

    generate_fn = None
    cfg = GeneratorConfig(endpoint=args.endpoint or "", model=args.model or "")
    if args.generator and args.generator.startswith("stub:"):
        generate_fn = _stub_generate_fn(args.generator[len("stub:"):], items)
    elif args.generator:
        cfg = GeneratorConfig(endpoint=args.generator, model=args.model or "")
    elif not args.endpoint:
        raise UsageError("eval-rag needs --generator (URL or stub:...) or --endpoint")

    report, _ = run_rag_eval(
        items,
        pipeline,
        corpus,
        query_inputs,
        cfg,
        concurrency=args.threads,
        trace_path=args.trace,
        generate_fn=generate_fn,
        config_label=args.config_label,
    )
    emit_report([report], args.format, args.out)
    print(f"accuracy: {report.overall:.4f} over {report.item_count} items")
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    reports = []
    if args.stage in ("indexing", "both"):
        if not args.embeddings:
            raise UsageError("indexing benchmark needs --embeddings")
        _, vectors = load_dense_map(args.embeddings)
        records = list(vectors.items())
        kind = _kind(args.kind)
        reports.append(
            bench_indexing(
                records,
                lambda batch: dense_mod.build_flat(batch, kind),
                batch_size=args.batch_size,
                repetitions=args.repetitions,
                config=f"{args.config_label}:indexing",
            )
        )
    if args.stage in ("inference", "both"):
        if not args.index or not args.queries:
            raise UsageError("inference benchmark needs --index and --queries")
        pipeline, _ = _build_pipeline(args, need_tokens=False)
        _, queries = load_dense_map(args.queries)
        query_tokens = None
        if pipeline.config.mode is Mode.RETRIEVE_RERANK:
            query_tokens = _query_token_map(args)
        bench_queries = [
            (qid, vec, query_tokens.get(qid) if query_tokens else None)
            for qid, vec in queries.items()
        ]
        reports.append(
            bench_inference(
                pipeline,
                bench_queries,
                repetitions=args.repetitions,
                config=f"{args.config_label}:{args.mode}",
            )
        )
    emit_report(reports, args.format, args.out, kind="latency")
    for report in reports:
        if report.index_ms_per_passage is not None:
            print(f"{report.config}: {report.index_ms_per_passage:.4f} ms/passage")
        else:
            rerank = f" rerank {report.rerank_ms:.4f}" if report.rerank_ms is not None else ""
            print(
                f"{report.config}: query {report.query_ms:.4f}{rerank} "
                f"total {report.total_inference_ms:.4f} ms/query"
            )
    print(f"report written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser assembly
# --------------------------------------------------------------------------


def build_parser() -> tuple[_Parser, list]:
    parser = _Parser(prog="twostage", description=__doc__)
    parser.add_argument("--config", help="JSON file of defaults; flags override")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = []

    def common(p):
        subparsers.append(p)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=4)
        p.add_argument("--config", help=argparse.SUPPRESS)

    p = sub.add_parser("index", help="build and persist a dense index")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--kind", default="cosine", choices=("dot", "cosine"))
    p.add_argument("--ann", action="store_true", help="build the layered graph index")
    p.add_argument("--m", type=int, default=ann_mod.DEFAULT_M)
    p.add_argument("--ef-construction", type=int, default=ann_mod.DEFAULT_EF_CONSTRUCTION)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    def search_flags(p, require_queries: bool):
        p.add_argument("--index", required=True)
        p.add_argument("--queries", required=require_queries)
        p.add_argument("--mode", default="retrieve", choices=("retrieve", "rerank"))
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--k-init", type=int, default=20)
        p.add_argument("--ef-search", type=int, default=ann_mod.DEFAULT_EF_SEARCH)
        p.add_argument("--query-tokens")
        p.add_argument("--doc-tokens")

    p = sub.add_parser("search", help="run queries and write a 6-column run file")
    common(p)
    search_flags(p, require_queries=True)
    p.add_argument("--tag", default="twostage")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("mine", help="mine negatives for training pairs")
    common(p)
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--pairs", required=True, help="JSONL {query_id, query_text, positive_doc_id}")
    p.add_argument("--corpus", help="JSONL corpus (random and bm25 strategies)")
    p.add_argument("--run", help="run file of retriever predictions (retriever strategy)")
    p.add_argument("--negatives", type=int, default=32)
    p.add_argument("--pool", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train a linear adapter on mined pairs")
    common(p)
    p.add_argument("--pairs", required=True, help="mined pairs file")
    p.add_argument("--query-embeddings", required=True)
    p.add_argument("--doc-embeddings", required=True)
    p.add_argument("--loss", default="in_batch", choices=[loss.value for loss in Loss])
    p.add_argument("--kind", default="cosine", choices=("dot", "cosine"))
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--dim-out", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-recall", help="score a run file against qrels")
    common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--ks", default="3,5,10")
    p.add_argument("--corpus", help="restrict to queries whose gold docs are in this corpus")
    p.add_argument("--config-label", default="run")
    p.add_argument("--format", default="csv", choices=("csv", "markdown", "table"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("eval-rag", help="end-to-end MCQ evaluation with a generator")
    common(p)
    search_flags(p, require_queries=False)
    p.add_argument("--items", required=True, help="JSONL MCQ items")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query-embeddings", required=True)
    p.add_argument("--generator", help="endpoint URL, stub:key, or stub:<LETTER>")
    p.add_argument("--endpoint", help="chat-completion endpoint URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--trace", help="per-item JSONL trace output path")
    p.add_argument("--config-label", default="rag")
    p.add_argument("--format", default="csv", choices=("csv", "markdown", "table"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_rag)

    p = sub.add_parser("bench", help="latency benchmarks in the standard table shape")
    common(p)
    p.add_argument("--stage", default="both", choices=("indexing", "inference", "both"))
    p.add_argument("--embeddings")
    p.add_argument("--kind", default="cosine", choices=("dot", "cosine"))
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--index")
    p.add_argument("--queries")
    p.add_argument("--mode", default="retrieve", choices=("retrieve", "rerank"))
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--k-init", type=int, default=20)
    p.add_argument("--ef-search", type=int, default=ann_mod.DEFAULT_EF_SEARCH)
    p.add_argument("--query-tokens")
    p.add_argument("--doc-tokens")
    p.add_argument("--config-label", default="bench")
    p.add_argument("--format", default="csv", choices=("csv", "markdown", "table"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser, subparsers


def _apply_config_file(parser: _Parser, subparsers: list, argv: list[str]) -> None:
    """Load --config JSON as parser defaults; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    with open(known.config, "r", encoding="utf-8") as fh:
        try:
            values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{known.config}: invalid JSON config: {exc}")
    if not isinstance(values, dict):
        raise FormatError(f"{known.config}: config must be a JSON object")
    normalized = {key.replace("-", "_"): value for key, value in values.items()}
    parser.set_defaults(**normalized)
    for sub in subparsers:
        sub.set_defaults(**normalized)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config_file(parser, subparsers, argv)
        args = parser.parse_args(argv)
        _echo_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GeneratorError as exc:
        print(f"generator error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (FormatError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
