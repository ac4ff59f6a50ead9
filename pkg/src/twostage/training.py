"""Contrastive training of a linear adapter over frozen embeddings.

The adapter is a single matrix W applied siamese-style to query and passage
vectors (v -> W^T v). Losses are temperature-scaled softmax cross-entropy
(InfoNCE) with either in-batch negatives or explicitly mined ones. All
gradients are analytic and verified against central finite differences in
the test suite; training itself is plain mini-batch gradient descent with
optional momentum, fully deterministic for a fixed seed.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .formats import BadMagicError, TruncatedFileError
from .mining import MinedPair
from .types import SimilarityKind, TokenMatrix

__all__ = [
    "Loss",
    "Adapter",
    "TrainConfig",
    "TrainingLog",
    "inbatch_loss",
    "explicit_negatives_loss",
    "maxsim_negatives_loss",
    "train_adapter",
    "save_adapter",
    "load_adapter",
]

_ADAPTER_MAGIC = b"TSADPT01"


class Loss(enum.Enum):
    IN_BATCH = "in_batch"
    EXPLICIT_NEGATIVES = "explicit_negatives"


@dataclass
class Adapter:
    """Linear map W (dim_in x dim_out) applied to row vectors as v @ W."""

    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("adapter matrix must be 2-D")
        if W.shape[1] > W.shape[0]:
            raise ValueError("dim_out must not exceed dim_in")
        if not np.all(np.isfinite(W)):
            raise ValueError("adapter matrix contains NaN or Inf")
        self.W = W

    @property
    def dim_in(self) -> int:
        return self.W.shape[0]

    @property
    def dim_out(self) -> int:
        return self.W.shape[1]

    @classmethod
    def identity(cls, dim_in: int, dim_out: int | None = None) -> "Adapter":
        """Identity-padded init: training starts from the base embeddings."""
        dim_out = dim_in if dim_out is None else dim_out
        W = np.zeros((dim_in, dim_out), dtype=np.float64)
        np.fill_diagonal(W, 1.0)
        return cls(W)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Adapt a vector (dim_in,) or a row matrix (n, dim_in)."""
        return np.asarray(vectors, dtype=np.float64) @ self.W

    def apply_token_matrix(self, matrix: TokenMatrix) -> TokenMatrix:
        return TokenMatrix(self.apply(matrix.rows).astype(np.float32))


@dataclass(frozen=True)
class TrainConfig:
    loss: Loss = Loss.IN_BATCH
    kind: SimilarityKind = SimilarityKind.COSINE
    temperature: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    dim_out: int | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.loss is Loss.IN_BATCH and self.batch_size < 2:
            raise ValueError("in-batch loss needs batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def config_digest(cfg: TrainConfig) -> bytes:
    payload = {
        "loss": cfg.loss.value,
        "kind": cfg.kind.value,
        "temperature": cfg.temperature,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "seed": cfg.seed,
        "dim_out": cfg.dim_out,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=16).digest()


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _softmax_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax plus numerically safe log-softmax (no log-of-zero)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=-1, keepdims=True)
    return exp / total, shifted - np.log(total)


def _normalize_rows(rows: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError(f"cosine loss undefined: zero-norm adapted {what} vector")
    return rows / norms, norms


def _unnormalize_grad(grad_hat: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain rule through row L2 normalization: d/dx of f(x/|x|)."""
    inner = np.sum(grad_hat * unit, axis=-1, keepdims=True)
    return (grad_hat - inner * unit) / norms


def inbatch_loss(
    W: np.ndarray,
    queries: np.ndarray,
    positives: np.ndarray,
    kind: SimilarityKind,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """InfoNCE over a batch: other rows' positives serve as negatives.

    Returns (loss, dL/dW). Row i of the similarity matrix is query i against
    every positive; the true class is the diagonal.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    U = np.asarray(queries, dtype=np.float64)
    V = np.asarray(positives, dtype=np.float64)
    if U.shape != V.shape or U.ndim != 2:
        raise ValueError("queries and positives must be equal-shape 2-D batches")
    batch = U.shape[0]
    if batch < 2:
        raise ValueError("in-batch loss needs at least 2 pairs")

    A = U @ W
    C = V @ W
    if kind is SimilarityKind.COSINE:
        A_hat, a_norms = _normalize_rows(A, "query")
        C_hat, c_norms = _normalize_rows(C, "positive")
        S = A_hat @ C_hat.T
    else:
        S = A @ C.T

    probs, log_probs = _softmax_rows(S / temperature)
    loss = float(-log_probs[np.arange(batch), np.arange(batch)].mean())

    G = probs.copy()
    G[np.arange(batch), np.arange(batch)] -= 1.0
    G /= batch * temperature

    if kind is SimilarityKind.COSINE:
        dA_hat = G @ C_hat
        dC_hat = G.T @ A_hat
        dA = _unnormalize_grad(dA_hat, A_hat, a_norms)
        dC = _unnormalize_grad(dC_hat, C_hat, c_norms)
    else:
        dA = G @ C
        dC = G.T @ A
    grad = U.T @ dA + V.T @ dC
    return loss, grad


def explicit_negatives_loss(
    W: np.ndarray,
    query: np.ndarray,
    positive: np.ndarray,
    negatives: np.ndarray,
    kind: SimilarityKind,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over (positive, negatives) similarities."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = np.asarray(query, dtype=np.float64)
    negs = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negs.shape[0] < 1:
        raise ValueError("need at least one negative")
    P = np.vstack([np.asarray(positive, dtype=np.float64), negs])

    a = q @ W
    C = P @ W
    if kind is SimilarityKind.COSINE:
        a_hat, a_norm = _normalize_rows(a[None, :], "query")
        C_hat, c_norms = _normalize_rows(C, "passage")
        logits = C_hat @ a_hat[0]
    else:
        logits = C @ a

    probs, log_probs = _softmax_rows(logits / temperature)
    loss = float(-log_probs[0])

    g = probs.copy()
    g[0] -= 1.0
    g /= temperature

    if kind is SimilarityKind.COSINE:
        da_hat = C_hat.T @ g
        dC_hat = np.outer(g, a_hat[0])
        da = _unnormalize_grad(da_hat[None, :], a_hat, a_norm)[0]
        dC = _unnormalize_grad(dC_hat, C_hat, c_norms)
    else:
        da = C.T @ g
        dC = np.outer(g, a)
    grad = np.outer(q, da) + P.T @ dC
    return loss, grad


def maxsim_negatives_loss(
    W: np.ndarray,
    query_tokens: np.ndarray,
    positive_tokens: np.ndarray,
    negative_token_mats: list[np.ndarray],
    kind: SimilarityKind,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Explicit-negatives loss with MaxSim scores in place of similarities.

    The backward pass treats each query token's argmax document token as
    fixed, which is the exact gradient wherever the argmax is unique.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    Q = np.asarray(query_tokens, dtype=np.float64)
    docs = [np.asarray(positive_tokens, dtype=np.float64)] + [
        np.asarray(m, dtype=np.float64) for m in negative_token_mats
    ]
    if len(docs) < 2:
        raise ValueError("need at least one negative document")

    AQ = Q @ W
    if kind is SimilarityKind.COSINE:
        AQ_hat, q_norms = _normalize_rows(AQ, "query token")
    adapted = []
    scores = np.empty(len(docs))
    argmaxes = []
    for d_idx, D in enumerate(docs):
        AD = D @ W
        if kind is SimilarityKind.COSINE:
            AD_hat, d_norms = _normalize_rows(AD, "document token")
            sims = AQ_hat @ AD_hat.T
            adapted.append((AD_hat, d_norms))
        else:
            sims = AQ @ AD.T
            adapted.append((AD, None))
        best = sims.argmax(axis=1)
        argmaxes.append(best)
        scores[d_idx] = sims[np.arange(Q.shape[0]), best].sum()

    probs, log_probs = _softmax_rows(scores / temperature)
    loss = float(-log_probs[0])
    g = probs.copy()
    g[0] -= 1.0
    g /= temperature

    if kind is SimilarityKind.COSINE:
        dAQ_hat = np.zeros_like(AQ)
        grad = np.zeros_like(W)
        for d_idx, D in enumerate(docs):
            AD_hat, d_norms = adapted[d_idx]
            best = argmaxes[d_idx]
            dAQ_hat += g[d_idx] * AD_hat[best]
            dAD_hat = np.zeros_like(AD_hat)
            np.add.at(dAD_hat, best, g[d_idx] * AQ_hat)
            dAD = _unnormalize_grad(dAD_hat, AD_hat, d_norms)
            grad += D.T @ dAD
        dAQ = _unnormalize_grad(dAQ_hat, AQ_hat, q_norms)
        grad += Q.T @ dAQ
    else:
        dAQ = np.zeros_like(AQ)
        grad = np.zeros_like(W)
        for d_idx, D in enumerate(docs):
            AD, _ = adapted[d_idx]
            best = argmaxes[d_idx]
            dAQ += g[d_idx] * AD[best]
            dAD = np.zeros_like(AD)
            np.add.at(dAD, best, g[d_idx] * AQ)
            grad += D.T @ dAD
        grad += Q.T @ dAQ
    return loss, grad


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------


@dataclass
class TrainingLog:
    epoch_losses: list[float]
    initial_eval_loss: float
    final_eval_loss: float
    pair_count: int
    reverted: bool = False


def _gather(ids, table: dict[str, np.ndarray], what: str) -> np.ndarray:
    missing = [i for i in ids if i not in table]
    if missing:
        raise KeyError(f"missing {what} embeddings for ids: {missing[:5]}")
    return np.stack([table[i] for i in ids]).astype(np.float64)


def _eval_loss(
    W: np.ndarray,
    pairs: list[MinedPair],
    Q: np.ndarray,
    P: np.ndarray,
    doc_vecs: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> float:
    """Training-set loss in file order with no shuffling, for comparability."""
    if cfg.loss is Loss.IN_BATCH:
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            u = Q[start : start + cfg.batch_size]
            v = P[start : start + cfg.batch_size]
            if u.shape[0] < 2:
                continue
            losses.append(inbatch_loss(W, u, v, cfg.kind, cfg.temperature)[0])
        return float(np.mean(losses))
    losses = []
    for i, pair in enumerate(pairs):
        negs = np.stack([doc_vecs[d] for d in pair.negative_doc_ids]).astype(np.float64)
        losses.append(
            explicit_negatives_loss(W, Q[i], P[i], negs, cfg.kind, cfg.temperature)[0]
        )
    return float(np.mean(losses))


def train_adapter(
    pairs: list[MinedPair],
    query_vecs: dict[str, np.ndarray],
    doc_vecs: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> tuple[Adapter, TrainingLog]:
    """Mini-batch gradient descent from an identity-padded start.

    Deterministic for a fixed config: shuffling comes from one seeded
    generator and updates run in a fixed order. If the last epoch somehow
    ends worse than the start on the full training set, the initial adapter
    is returned instead (flagged in the log), so callers never regress.
    """
    if not pairs:
        raise ValueError("no training pairs")
    if cfg.loss is Loss.EXPLICIT_NEGATIVES and any(not p.negative_doc_ids for p in pairs):
        raise ValueError("explicit-negatives training requires mined negatives on every pair")

    Q = _gather([p.query_id for p in pairs], query_vecs, "query")
    P = _gather([p.positive_doc_id for p in pairs], doc_vecs, "positive")
    neg_ids = {d for p in pairs for d in p.negative_doc_ids}
    if cfg.loss is Loss.EXPLICIT_NEGATIVES:
        _gather(sorted(neg_ids), doc_vecs, "negative")
    dim_in = Q.shape[1]
    if P.shape[1] != dim_in:
        raise ValueError("query and document embedding dims differ")

    adapter = Adapter.identity(dim_in, cfg.dim_out)
    W = adapter.W
    W0 = W.copy()
    velocity = np.zeros_like(W)
    rng = np.random.default_rng(cfg.seed)

    initial_eval = _eval_loss(W, pairs, Q, P, doc_vecs, cfg)
    epoch_losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        batch_losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cfg.loss is Loss.IN_BATCH:
                if idx.shape[0] < 2:
                    continue
                loss, grad = inbatch_loss(W, Q[idx], P[idx], cfg.kind, cfg.temperature)
            else:
                grads = np.zeros_like(W)
                total = 0.0
                for i in idx:
                    pair = pairs[i]
                    negs = np.stack(
                        [doc_vecs[d] for d in pair.negative_doc_ids]
                    ).astype(np.float64)
                    l, g = explicit_negatives_loss(
                        W, Q[i], P[i], negs, cfg.kind, cfg.temperature
                    )
                    grads += g
                    total += l
                loss = total / idx.shape[0]
                grad = grads / idx.shape[0]
            velocity = cfg.momentum * velocity - cfg.learning_rate * grad
            W = W + velocity
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))

    final_eval = _eval_loss(W, pairs, Q, P, doc_vecs, cfg)
    reverted = final_eval > initial_eval
    if reverted:
        W = W0
        final_eval = initial_eval
    log = TrainingLog(
        epoch_losses=epoch_losses,
        initial_eval_loss=initial_eval,
        final_eval_loss=final_eval,
        pair_count=len(pairs),
        reverted=reverted,
    )
    return Adapter(W), log


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_adapter(path, adapter: Adapter, kind: SimilarityKind, seed: int, digest: bytes) -> None:
    if len(digest) != 16:
        raise ValueError("config digest must be 16 bytes")
    kind_code = 0 if kind is SimilarityKind.DOT else 1
    with open(path, "wb") as fh:
        fh.write(_ADAPTER_MAGIC)
        fh.write(struct.pack("<IIBQ", adapter.dim_in, adapter.dim_out, kind_code, seed))
        fh.write(digest)
        fh.write(np.ascontiguousarray(adapter.W, dtype="<f8").tobytes())


def load_adapter(path) -> tuple[Adapter, SimilarityKind, int, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _ADAPTER_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        header = fh.read(17)
        if len(header) != 17:
            raise TruncatedFileError(f"{path}: truncated adapter header")
        dim_in, dim_out, kind_code, seed = struct.unpack("<IIBQ", header)
        digest = fh.read(16)
        if len(digest) != 16:
            raise TruncatedFileError(f"{path}: truncated config digest")
        payload = fh.read(dim_in * dim_out * 8)
        if len(payload) != dim_in * dim_out * 8:
            raise TruncatedFileError(f"{path}: truncated adapter matrix")
        if fh.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after adapter matrix")
    W = np.frombuffer(payload, dtype="<f8").reshape(dim_in, dim_out)
    kind = SimilarityKind.DOT if kind_code == 0 else SimilarityKind.COSINE
    return Adapter(W.copy()), kind, seed, digest
