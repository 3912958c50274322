"""Multi-vector retrieval with sparse token alignment and salience pruning."""

from .alignment import (
    AlignmentResult,
    AlignmentStrategy,
    align_differentiable,
    align_exact_match,
    align_single_vector,
    align_topk,
    align_topp,
    apply_strategy,
    compute_similarity,
    evaluate_alignment,
    score,
    score_full,
)
from .adaptation import AdaptationReport, FoldOutcome, adapt_alignment, default_grid
from .engine import (
    RankedList,
    RetrievalConfig,
    brute_force_retrieve,
    gather_candidates,
    read_run,
    rescore_candidates,
    retrieve,
    write_run,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    CorruptionError,
    DimensionError,
    DuplicateIdError,
    FormatError,
    InsufficientDataError,
    MissingQrelsError,
    MvixError,
    NormalizationError,
    NumericalError,
)
from .evaluation import (
    evaluate_run,
    mrr_at_k,
    ndcg_at_k,
    read_qrels,
    recall_at_k,
    write_qrels,
)
from .index import TokenIndex, build_index, read_index, search_tokens, write_index
from .salience import (
    SalienceConfig,
    SalienceHead,
    gated_salience,
    load_head,
    prune_select,
    raw_salience,
    save_head,
)
from .solver import (
    SolverConfig,
    SolverResult,
    objective,
    solve_relaxed_topk,
    vjp_relaxed_topk,
)
from .store import (
    DocumentRecord,
    StoreHeader,
    TokenEmbeddings,
    normalize_rows,
    read_store,
    write_store,
)
from .synth import PlantSpec, synth_corpus
from .training import TrainConfig, contrastive_loss, init_heads, train_salience

__version__ = "0.1.0"
