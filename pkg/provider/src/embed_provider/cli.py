"""Command-line entry point: bulk export and the serve mode.

Exit codes: 0 success, 1 usage error, 2 input or model error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ProviderConfig, ProviderError
from .export import export_dense, export_tokens
from .server import serve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


class _Usage(Exception):
    pass


def read_inputs(path) -> list[tuple[str, str]]:
    """JSONL records with ``id`` and ``text``; a non-empty ``title`` is
    prepended to the text, matching how corpora are indexed downstream."""
    inputs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text = str(obj["text"])
                title = str(obj.get("title", ""))
                inputs.append((str(obj["id"]), f"{title} {text}" if title else text))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{line_no}: bad input record: {exc}") from exc
    return inputs


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="hash-768")
    p.add_argument("--kind", default="dense", choices=("dense", "token"))
    p.add_argument("--max-seq-len", type=int, default=8192)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--pooling", default="mean", choices=("mean", "first"))
    p.add_argument("--device", default="cpu")


def _config(args) -> ProviderConfig:
    try:
        return ProviderConfig(
            model=args.model,
            kind=args.kind,
            max_seq_len=args.max_seq_len,
            batch_size=args.batch_size,
            normalize=args.normalize,
            pooling=args.pooling,
            device=args.device,
        )
    except ValueError as exc:
        raise _Usage(str(exc))


def build_parser() -> _Parser:
    parser = _Parser(prog="embed-provider", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="encode a JSONL input file into an embedding file")
    _add_config_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="serve embeddings over HTTP")
    _add_config_flags(p)
    p.add_argument("--port", type=int, default=8089)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        if args.command == "export":
            inputs = read_inputs(args.input)
            run = export_dense if cfg.kind == "dense" else export_tokens
            summary = run(inputs, cfg, args.out)
            print(f"wrote {summary.record_count} records (dim {summary.dim}) to {args.out}")
            return EXIT_OK
        serve(cfg, args.port)
        return EXIT_OK
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProviderError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
