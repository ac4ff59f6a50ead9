"""Embedding provider: encoders in, interchange embedding files out."""

from .config import (
    BatchEncodeError,
    EmptyTextError,
    ModelLoadError,
    ProviderConfig,
    ProviderError,
)
from .encoder import HashEncoder, load_encoder, tokenize
from .export import ExportSummary, export_dense, export_tokens
from .records import DENSE_KIND, TOKEN_KIND, decode_record, encode_record, write_file
from .server import make_server, serve

__all__ = [
    "BatchEncodeError",
    "DENSE_KIND",
    "EmptyTextError",
    "ExportSummary",
    "HashEncoder",
    "ModelLoadError",
    "ProviderConfig",
    "ProviderError",
    "TOKEN_KIND",
    "decode_record",
    "encode_record",
    "export_dense",
    "export_tokens",
    "load_encoder",
    "make_server",
    "serve",
    "tokenize",
    "write_file",
]
