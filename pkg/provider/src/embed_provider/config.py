"""Provider configuration and error types."""

from __future__ import annotations

from dataclasses import dataclass

KINDS = ("dense", "token")
POOLINGS = ("mean", "first")


class ProviderError(Exception):
    """Base class for provider failures."""


class ModelLoadError(ProviderError):
    """The model identifier names no loadable encoder."""


class EmptyTextError(ProviderError):
    """An input produced zero tokens; carries the offending id."""

    def __init__(self, input_id: str):
        super().__init__(f"input {input_id!r} has no tokens to encode")
        self.input_id = input_id


class BatchEncodeError(ProviderError):
    """Encoding failed; names the id range of the offending batch."""

    def __init__(self, first_id: str, last_id: str, cause: Exception):
        super().__init__(f"encoding failed in batch {first_id!r}..{last_id!r}: {cause}")
        self.first_id = first_id
        self.last_id = last_id
        self.cause = cause


@dataclass(frozen=True)
class ProviderConfig:
    """Everything model-specific lives behind this one record.

    ``model`` selects the encoder; ``kind`` picks the output shape
    (one dense vector per input, or one token matrix per input).
    ``pooling`` controls how the dense vector is derived from token
    states: mean over all real tokens, or the first token's state.
    """

    model: str = "hash-768"
    kind: str = "dense"
    max_seq_len: int = 8192
    batch_size: int = 32
    normalize: bool = False
    pooling: str = "mean"
    device: str = "cpu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
