"""Candidate retrieval and refinement scoring over a token index.

The pipeline: prune the query to its most salient tokens, run token-level
inner-product search for each kept token, trace the hits back to their
documents, then re-score every traced document with the configured alignment
strategy (and salience weighting when heads are supplied). A brute-force
scorer with the same ordering contract serves as the exactness oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .alignment import AlignmentStrategy, apply_strategy, compute_similarity, score, score_full
from .errors import ConfigError
from .index import TokenIndex, search_tokens
from .salience import SalienceHead, prune_select, raw_salience
from .store import DocumentRecord, TokenEmbeddings


@dataclass
class RetrievalConfig:
    strategy: AlignmentStrategy = field(default_factory=lambda: AlignmentStrategy.top_k(1))
    neighbors_per_token: int = 4000
    final_top_n: int = 1000
    beta_q: float = 1.0
    beta_d: float = 1.0  # consumed at index build time; recorded here for provenance
    nprobe: int = 1
    normalize: bool = True
    refine_full_store: bool = False

    def __post_init__(self):
        if self.final_top_n < 1:
            raise ConfigError("final_top_n must be >= 1")
        if self.neighbors_per_token < 1:
            raise ConfigError("neighbors_per_token must be >= 1")
        if not 0.0 < self.beta_q <= 1.0 or not 0.0 < self.beta_d <= 1.0:
            raise ConfigError("pruning ratios must lie in (0, 1]")


@dataclass
class RankedList:
    """Scored documents for one query, best first; ties by ascending doc id."""

    query_id: str
    hits: list[tuple[str, float]]

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.hits]


def _rank(query_id: str, scored: list[tuple[str, float]], top_n: int) -> RankedList:
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RankedList(query_id, scored[:top_n])


def _query_salience(query: TokenEmbeddings, head: Optional[SalienceHead]):
    if query.salience is not None:
        return np.asarray(query.salience, dtype=np.float64)
    if head is not None:
        return raw_salience(query, head)
    return None


def _pair_score(
    q_vectors: np.ndarray,
    q_ids: np.ndarray,
    q_salience: Optional[np.ndarray],
    doc: TokenEmbeddings,
    token_subset: Optional[np.ndarray],
    doc_head: Optional[SalienceHead],
    config: RetrievalConfig,
    use_salience: bool,
) -> float:
    d_vectors = doc.vectors
    d_ids = doc.token_ids
    d_salience = doc.salience
    if token_subset is not None:
        d_vectors = d_vectors[token_subset]
        d_ids = d_ids[token_subset]
        d_salience = None if d_salience is None else d_salience[token_subset]

    S = compute_similarity(q_vectors, d_vectors)
    pairwise = apply_strategy(S, config.strategy, query_ids=q_ids, doc_ids=d_ids)
    if not use_salience:
        return score(S, pairwise, normalize=config.normalize)

    if d_salience is None:
        if doc_head is None:
            raise ConfigError("salience scoring needs a document head or stored salience")
        d_salience = raw_salience(d_vectors, doc_head)
    # the sparsity gate is a training device; refinement weights use raw salience
    return score_full(
        S,
        pairwise,
        q_salience,
        np.asarray(d_salience, dtype=np.float64),
        normalize=config.normalize,
    )


def _prepare_query(
    query: DocumentRecord,
    query_head: Optional[SalienceHead],
    config: RetrievalConfig,
):
    emb = query.embeddings
    q_sal = _query_salience(emb, query_head)
    if config.beta_q < 1.0:
        if q_sal is None:
            raise ConfigError(
                "beta_q < 1 needs a query salience head (or per-token salience in the query file)"
            )
        kept = prune_select(q_sal, config.beta_q)
    else:
        kept = np.arange(emb.num_tokens)
    q_vectors = emb.vectors[kept]
    q_ids = emb.token_ids[kept]
    q_sal_kept = None if q_sal is None else q_sal[kept]
    return kept, q_vectors, q_ids, q_sal_kept


def gather_candidates(
    index: TokenIndex,
    q_vectors: np.ndarray,
    config: RetrievalConfig,
) -> np.ndarray:
    """Union of doc ordinals traced from each kept query token's search."""
    found: set[int] = set()
    for row in q_vectors:
        doc_ords, _, _ = search_tokens(
            index, row, config.neighbors_per_token, nprobe=config.nprobe
        )
        found.update(int(d) for d in np.unique(doc_ords))
    return np.array(sorted(found), dtype=np.int64)


def rescore_candidates(
    index: TokenIndex,
    records: Sequence[DocumentRecord],
    query: DocumentRecord,
    candidates: np.ndarray,
    heads: Optional[tuple[Optional[SalienceHead], Optional[SalienceHead]]] = None,
    config: Optional[RetrievalConfig] = None,
) -> RankedList:
    """Refinement stage alone: score the given doc ordinals and rank them.

    Candidate sets do not depend on the alignment strategy, so callers that
    sweep strategies (adaptation) trace candidates once and re-enter here.
    """
    config = config or RetrievalConfig()
    query_head, doc_head = heads if heads is not None else (None, None)
    use_salience = heads is not None
    _, q_vectors, q_ids, q_sal = _prepare_query(query, query_head, config)

    scored: list[tuple[str, float]] = []
    for ordinal in candidates:
        rec = records[ordinal]
        subset = None if config.refine_full_store else index.kept_tokens(int(ordinal))
        value = _pair_score(
            q_vectors, q_ids, q_sal, rec.embeddings, subset, doc_head, config, use_salience
        )
        scored.append((rec.doc_id, value))
    return _rank(query.doc_id, scored, config.final_top_n)


def retrieve(
    index: TokenIndex,
    records: Sequence[DocumentRecord],
    query: DocumentRecord,
    heads: Optional[tuple[Optional[SalienceHead], Optional[SalienceHead]]] = None,
    config: Optional[RetrievalConfig] = None,
) -> RankedList:
    """Search, trace back, and refine; empty candidate sets rank nothing."""
    config = config or RetrievalConfig()
    query_head = heads[0] if heads is not None else None
    _, q_vectors, _, _ = _prepare_query(query, query_head, config)
    candidates = gather_candidates(index, q_vectors, config)
    return rescore_candidates(index, records, query, candidates, heads, config)


def brute_force_retrieve(
    records: Sequence[DocumentRecord],
    query: DocumentRecord,
    strategy: Optional[AlignmentStrategy] = None,
    heads: Optional[tuple[Optional[SalienceHead], Optional[SalienceHead]]] = None,
    config: Optional[RetrievalConfig] = None,
) -> RankedList:
    """Score every document with full token sets; the index-free oracle."""
    config = config or RetrievalConfig()
    if strategy is not None:
        config = replace(config, strategy=strategy)
    query_head, doc_head = heads if heads is not None else (None, None)
    use_salience = heads is not None
    _, q_vectors, q_ids, q_sal = _prepare_query(query, query_head, config)

    scored = []
    for rec in records:
        value = _pair_score(
            q_vectors, q_ids, q_sal, rec.embeddings, None, doc_head, config, use_salience
        )
        scored.append((rec.doc_id, value))
    return _rank(query.doc_id, scored, config.final_top_n)


def write_run(path, ranked_lists: Sequence[RankedList], tag: str = "mvix") -> None:
    """TREC run format: `qid Q0 doc_id rank score tag`, one line per hit."""
    lines = []
    for ranked in ranked_lists:
        for rank, (doc_id, value) in enumerate(ranked.hits, start=1):
            lines.append(f"{ranked.query_id} Q0 {doc_id} {rank} {value:.6f} {tag}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_run(path) -> list[RankedList]:
    by_query: dict[str, list[tuple[int, str, float]]] = {}
    order: list[str] = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{line_no}: expected 6 fields, got {len(parts)}")
        qid, _, doc_id, rank, value, _ = parts
        if qid not in by_query:
            by_query[qid] = []
            order.append(qid)
        by_query[qid].append((int(rank), doc_id, float(value)))
    out = []
    for qid in order:
        rows = sorted(by_query[qid])
        out.append(RankedList(qid, [(doc_id, value) for _, doc_id, value in rows]))
    return out
