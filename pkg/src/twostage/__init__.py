"""Two-stage dense retrieval with late-interaction re-ranking.

A fast first stage (exact scan or a layered small-world graph) produces
k_init candidates from pooled vectors; a MaxSim re-ranker over per-token
matrices reorders them into the final top k. Around that core: an Okapi
BM25 index, negative mining, contrastive adapter training with verified
gradients, recall/accuracy/latency evaluation, and a prompt-exact RAG
harness, all wired into one CLI.
"""

from .types import (
    Document,
    Query,
    RankedRun,
    ScoredCandidate,
    SimilarityKind,
    Stage,
    TokenMatrix,
    as_dense_vector,
    similarity,
)
from .formats import (
    EmbeddingHeader,
    FormatError,
    McqItem,
    read_corpus,
    read_embeddings,
    read_mcq_items,
    read_qrels,
    read_run,
    write_embeddings,
    write_run,
)
from .sparse import SparseIndex, build_sparse_index, tokenize
from .dense import FlatIndex, build_flat, load_flat, save_flat, search_exact
from .ann import AnnIndex, build_ann, load_ann, save_ann, search_ann
from .maxsim import TokenStore, maxsim_score, rerank
from .pipeline import (
    ContextBundle,
    Mode,
    PipelineConfig,
    RetrievalPipeline,
    assemble_context,
    two_stage_search,
)
from .mining import (
    MinedPair,
    MiningConfig,
    Strategy,
    TrainingPairSpec,
    mine_bm25,
    mine_from_retriever,
    mine_random,
)
from .training import (
    Adapter,
    Loss,
    TrainConfig,
    explicit_negatives_loss,
    inbatch_loss,
    load_adapter,
    maxsim_negatives_loss,
    save_adapter,
    train_adapter,
)
from .evaluation import (
    AccuracyReport,
    LatencyReport,
    RecallReport,
    accuracy_report,
    bench_indexing,
    bench_inference,
    emit_report,
    mcq_accuracy,
    recall_at_k,
    recall_report,
)
from .rag import (
    PROMPT_TEMPLATE,
    GenerationResult,
    GeneratorConfig,
    generate,
    parse_generation,
    render_prompt,
    run_rag_eval,
)

__version__ = "0.1.0"
