"""Bit-exact file formats: corpora, qrels, embeddings, runs, and MCQ items.

The embedding interchange format is the contract between this engine and
any external embedding exporter, so it is specified byte for byte:

    header:
        magic         8 bytes, ASCII "LIEMBED1"
        kind          u8   (0 = one dense vector per record, 1 = token matrix)
        dim           u32  little-endian
        record_count  u64  little-endian
        normalized    u8   (0/1; for kind 1 this means rows are L2-normalized)
    per record:
        id_len        u32  little-endian
        id            id_len bytes, UTF-8
        token_count   u32  little-endian (always 1 for kind 0)
        values        token_count * dim float32 little-endian

Writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .types import Document, RankedRun, ScoredCandidate, Stage, TokenMatrix

__all__ = [
    "FormatError",
    "MalformedLineError",
    "DuplicateIdError",
    "BadMagicError",
    "TruncatedFileError",
    "RecordCountError",
    "EmbeddingHeader",
    "DENSE_KIND",
    "TOKEN_KIND",
    "read_corpus",
    "read_queries",
    "read_qrels",
    "write_embeddings",
    "read_embeddings",
    "write_run",
    "read_run",
    "McqItem",
    "read_mcq_items",
]

MAGIC = b"LIEMBED1"
DENSE_KIND = 0
TOKEN_KIND = 1

_HEADER = struct.Struct("<8sBIQB")


class FormatError(Exception):
    """Base class for malformed or inconsistent input files."""


class MalformedLineError(FormatError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class DuplicateIdError(FormatError):
    def __init__(self, path, duplicate_id: str):
        super().__init__(f"{path}: duplicate id {duplicate_id!r}")
        self.duplicate_id = duplicate_id


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class RecordCountError(FormatError):
    pass


@dataclass(frozen=True)
class EmbeddingHeader:
    kind: int
    dim: int
    record_count: int
    normalized: bool

    def __post_init__(self):
        if self.kind not in (DENSE_KIND, TOKEN_KIND):
            raise ValueError(f"unknown embedding kind {self.kind}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.record_count < 0:
            raise ValueError("record_count must be non-negative")


# --------------------------------------------------------------------------
# line-delimited corpus / queries / qrels
# --------------------------------------------------------------------------


def read_corpus(path, field_map: dict[str, str] | None = None) -> list[Document]:
    """Read a UTF-8 JSONL corpus into Documents, preserving file order.

    Each line is one object with string fields ``id``, ``title``, ``text``;
    a missing ``title`` becomes "". ``field_map`` renames source fields at
    read time, e.g. ``{"id": "pmid", "text": "contents"}`` for corpora that
    use different field names.
    """
    field_map = field_map or {}
    id_key = field_map.get("id", "id")
    title_key = field_map.get("title", "title")
    text_key = field_map.get("text", "text")

    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or id_key not in obj:
                raise MalformedLineError(path, line_no, f"missing field {id_key!r}")
            if text_key not in obj:
                raise MalformedLineError(path, line_no, f"missing field {text_key!r}")
            doc_id = str(obj[id_key])
            if doc_id in seen:
                raise DuplicateIdError(path, doc_id)
            seen.add(doc_id)
            try:
                docs.append(
                    Document(id=doc_id, title=str(obj.get(title_key, "")), text=str(obj[text_key]))
                )
            except ValueError as exc:
                raise MalformedLineError(path, line_no, str(exc)) from exc
    return docs


def read_queries(path) -> list[dict]:
    """Read a JSONL query file: {id, text} plus any extra fields, verbatim."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if "id" not in obj or "text" not in obj:
                raise MalformedLineError(path, line_no, "missing field 'id' or 'text'")
            out.append(obj)
    return out


def read_qrels(path) -> dict[str, set[str]]:
    """Read tab-separated ``query_id<TAB>doc_id`` relevance judgments.

    Multiple lines per query aggregate into one set.
    """
    qrels: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedLineError(path, line_no, f"expected 2 columns, got {len(parts)}")
            qid, did = parts
            qrels.setdefault(qid, set()).add(did)
    return qrels


# --------------------------------------------------------------------------
# binary embedding files
# --------------------------------------------------------------------------


def write_embeddings(path, header: EmbeddingHeader, records) -> None:
    """Write embedding records in the interchange layout.

    ``records`` is a sequence of (id, payload): payloads are 1-D arrays of
    length dim for kind 0, or (token_count, dim) row-major arrays for kind 1.
    """
    records = list(records)
    if header.record_count != len(records):
        raise ValueError(f"header says {header.record_count} records, got {len(records)}")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(MAGIC, header.kind, header.dim, header.record_count, int(header.normalized))
        )
        for rec_id, payload in records:
            arr = np.asarray(payload, dtype=np.float32)
            if header.kind == DENSE_KIND:
                if arr.ndim != 1 or arr.shape[0] != header.dim:
                    raise ValueError(f"record {rec_id!r}: expected dense vector of dim {header.dim}")
                arr = arr.reshape(1, header.dim)
            else:
                if arr.ndim != 2 or arr.shape[1] != header.dim:
                    raise ValueError(f"record {rec_id!r}: expected rows of dim {header.dim}")
            id_bytes = rec_id.encode("utf-8")
            fh.write(struct.pack("<I", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<I", arr.shape[0]))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def read_embeddings(path) -> tuple[EmbeddingHeader, list[tuple[str, np.ndarray]]]:
    """Read a file written by :func:`write_embeddings`.

    Round-trips bit-exactly: dense records come back as (dim,) float32
    arrays, token records as (token_count, dim) float32 arrays.
    """
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
        if len(raw) != _HEADER.size:
            raise TruncatedFileError(f"{path}: truncated header")
        _, kind, dim, record_count, normalized = _HEADER.unpack(raw)
        try:
            header = EmbeddingHeader(kind, dim, record_count, bool(normalized))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc

        records: list[tuple[str, np.ndarray]] = []
        for i in range(record_count):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4, path, f"record {i} id length"))
            rec_id = _read_exact(fh, id_len, path, f"record {i} id").decode("utf-8")
            (token_count,) = struct.unpack(
                "<I", _read_exact(fh, 4, path, f"record {rec_id!r} token count")
            )
            if kind == DENSE_KIND and token_count != 1:
                raise FormatError(f"{path}: dense record {rec_id!r} has token_count {token_count}")
            payload = _read_exact(
                fh, token_count * dim * 4, path, f"record {rec_id!r} payload"
            )
            arr = np.frombuffer(payload, dtype="<f4").reshape(token_count, dim).copy()
            records.append((rec_id, arr[0] if kind == DENSE_KIND else arr))
        if fh.read(1):
            raise RecordCountError(f"{path}: trailing bytes after {record_count} records")
    return header, records


def load_dense_map(path) -> tuple[EmbeddingHeader, dict[str, np.ndarray]]:
    """Read a kind-0 file into an id -> vector mapping."""
    header, records = read_embeddings(path)
    if header.kind != DENSE_KIND:
        raise FormatError(f"{path}: expected dense embeddings (kind 0), got kind {header.kind}")
    return header, dict(records)


def load_token_map(path) -> tuple[EmbeddingHeader, dict[str, TokenMatrix]]:
    """Read a kind-1 file into an id -> TokenMatrix mapping."""
    header, records = read_embeddings(path)
    if header.kind != TOKEN_KIND:
        raise FormatError(f"{path}: expected token embeddings (kind 1), got kind {header.kind}")
    return header, {
        rec_id: TokenMatrix(rows, row_normalized=header.normalized) for rec_id, rows in records
    }


# --------------------------------------------------------------------------
# TREC-style run files
# --------------------------------------------------------------------------


def write_run(runs: list[RankedRun], tag: str, path) -> None:
    """Write runs in the six-column TREC convention.

    One line per candidate: ``query_id Q0 doc_id rank score tag`` with ranks
    starting at 1 and scores printed with 6 decimal places.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for run in runs:
            for rank, cand in enumerate(run.candidates, start=1):
                fh.write(f"{run.query_id} Q0 {cand.doc_id} {rank} {cand.score:.6f} {tag}\n")


def read_run(path, stage: Stage = Stage.FIRST_STAGE) -> list[RankedRun]:
    """Read a six-column run file back into RankedRuns (grouped by query)."""
    by_query: dict[str, list[ScoredCandidate]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise MalformedLineError(path, line_no, f"expected 6 columns, got {len(parts)}")
            qid, _, did, _, score, _ = parts
            try:
                cand = ScoredCandidate(did, float(score), stage)
            except ValueError as exc:
                raise MalformedLineError(path, line_no, str(exc)) from exc
            if qid not in by_query:
                order.append(qid)
            by_query.setdefault(qid, []).append(cand)
    return [RankedRun(qid, tuple(by_query[qid])) for qid in order]


# --------------------------------------------------------------------------
# multiple-choice items
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class McqItem:
    """One multiple-choice or binary question with its answer key."""

    id: str
    question: str
    options: tuple[tuple[str, str], ...]  # (letter, text), in presentation order
    answer_key: str
    task: str = ""

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError(f"item {self.id!r} needs at least 2 options")
        letters = [letter for letter, _ in self.options]
        if len(set(letters)) != len(letters):
            raise ValueError(f"item {self.id!r} has duplicate option letters")
        for letter in letters:
            if len(letter) != 1 or not "A" <= letter <= "Z":
                raise ValueError(f"item {self.id!r} has invalid option letter {letter!r}")
        if self.answer_key not in letters:
            raise ValueError(f"item {self.id!r}: answer {self.answer_key!r} not among options")

    def option_letters(self) -> list[str]:
        return [letter for letter, _ in self.options]


def read_mcq_items(path) -> list[McqItem]:
    """Read line-delimited MCQ records: {id, question, options, answer[, task]}."""
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            try:
                items.append(
                    McqItem(
                        id=str(obj["id"]),
                        question=str(obj["question"]),
                        options=tuple(sorted(obj["options"].items())),
                        answer_key=str(obj["answer"]),
                        task=str(obj.get("task", "")),
                    )
                )
            except KeyError as exc:
                raise MalformedLineError(path, line_no, f"missing field {exc.args[0]!r}") from exc
            except (ValueError, AttributeError) as exc:
                raise MalformedLineError(path, line_no, str(exc)) from exc
    return items
