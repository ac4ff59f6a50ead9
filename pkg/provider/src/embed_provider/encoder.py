"""Deterministic built-in encoder.

Model identifiers of the form ``hash-<dim>`` load a feature-hashing
encoder: each vocabulary token maps to a fixed Gaussian vector seeded
from a keyed hash of the token, and each token state mixes its own
vector with its immediate neighbours so the same word gets a slightly
different embedding in a different context. There is nothing to
download and inference is bit-reproducible, which is exactly what the
export and serve conformance contracts need. Real model runtimes can
be added behind ``load_encoder`` without touching callers.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .config import EmptyTextError, ModelLoadError, ProviderConfig

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_MODEL_RE = re.compile(r"^hash-(\d+)$")

SELF_WEIGHT = 0.8
NEIGHBOR_WEIGHT = 0.1


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class HashEncoder:
    """Seeded per-token Gaussian embeddings with neighbour mixing."""

    def __init__(self, model: str, dim: int):
        self.model = model
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _base_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                token.encode("utf-8"), digest_size=8, key=self.model.encode("utf-8")
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def encode_tokens(self, input_id: str, text: str, max_seq_len: int) -> np.ndarray:
        """(token_count, dim) float32 matrix; only real token rows, no padding."""
        tokens = tokenize(text)[:max_seq_len]
        if not tokens:
            raise EmptyTextError(input_id)
        base = np.stack([self._base_vector(t) for t in tokens]).astype(np.float64)
        rows = SELF_WEIGHT * base
        rows[1:] += NEIGHBOR_WEIGHT * base[:-1]
        rows[:-1] += NEIGHBOR_WEIGHT * base[1:]
        return rows.astype(np.float32)

    def encode_dense(self, input_id: str, text: str, cfg: ProviderConfig) -> np.ndarray:
        rows = self.encode_tokens(input_id, text, cfg.max_seq_len)
        if cfg.pooling == "first":
            vec = rows[0].astype(np.float64)
        else:
            vec = rows.astype(np.float64).mean(axis=0)
        if cfg.normalize:
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise EmptyTextError(input_id)
            vec = vec / norm
        return vec.astype(np.float32)


def load_encoder(cfg: ProviderConfig) -> HashEncoder:
    match = _MODEL_RE.match(cfg.model)
    if not match or int(match.group(1)) < 1:
        raise ModelLoadError(f"unknown model identifier {cfg.model!r} (expected hash-<dim>)")
    return HashEncoder(cfg.model, int(match.group(1)))
