"""Bulk export of dense vectors and token matrices to interchange files."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BatchEncodeError, EmptyTextError, ProviderConfig
from .encoder import HashEncoder, load_encoder
from .records import DENSE_KIND, TOKEN_KIND, write_file


@dataclass(frozen=True)
class ExportSummary:
    record_count: int
    dim: int
    kind: int


def _batches(inputs: list[tuple[str, str]], size: int):
    for start in range(0, len(inputs), size):
        yield inputs[start : start + size]


def _encode_all(inputs, cfg: ProviderConfig, encoder: HashEncoder, one):
    """Sequential batch loop; failures name the offending id range."""
    out = []
    for batch in _batches(list(inputs), cfg.batch_size):
        try:
            for input_id, text in batch:
                out.append((input_id, one(input_id, text)))
        except EmptyTextError:
            raise
        except Exception as exc:
            raise BatchEncodeError(batch[0][0], batch[-1][0], exc) from exc
    return out


def export_dense(inputs, cfg: ProviderConfig, out_path) -> ExportSummary:
    """One dense record per (id, text) input, kind 0.

    The normalize flag is both honored (rows scaled to unit norm) and
    recorded in the file header.
    """
    encoder = load_encoder(cfg)
    encoded = _encode_all(
        inputs, cfg, encoder, lambda i, t: encoder.encode_dense(i, t, cfg).reshape(1, -1)
    )
    count = write_file(out_path, DENSE_KIND, encoder.dim, cfg.normalize, encoded)
    return ExportSummary(count, encoder.dim, DENSE_KIND)


def export_tokens(inputs, cfg: ProviderConfig, out_path) -> ExportSummary:
    """One token-matrix record per (id, text) input, kind 1.

    Rows cover real tokens only; there is no padding to strip because
    the encoder never emits it. ``normalize`` scales each row.
    """
    encoder = load_encoder(cfg)

    def one(input_id, text):
        rows = encoder.encode_tokens(input_id, text, cfg.max_seq_len)
        if cfg.normalize:
            norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
            if not np.all(norms > 0):
                raise EmptyTextError(input_id)
            rows = (rows / norms).astype(np.float32)
        return rows

    encoded = _encode_all(inputs, cfg, encoder, one)
    count = write_file(out_path, TOKEN_KIND, encoder.dim, cfg.normalize, encoded)
    return ExportSummary(count, encoder.dim, TOKEN_KIND)
