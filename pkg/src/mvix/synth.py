"""Deterministic synthetic corpora with planted relevant documents.

Each query gets one designated relevant document seeded with "evidence"
tokens: noisy copies of the query's token vectors. Optional "trap" documents
receive near-perfect copies of a subset of query tokens, which rewards
strategies that aggregate several alignments per query token over ones that
trust a single best match.

Token-id convention: query tokens (and their evidence copies, which inherit
the query token's id) draw ids from [EVIDENCE_ID_BASE, NOISE_ID_BASE); filler
tokens draw ids from [NOISE_ID_BASE, NOISE_ID_BASE + NOISE_ID_SPAN). Tests
and oracles recover evidence positions from this split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .store import DocumentRecord, TokenEmbeddings, normalize_rows

EVIDENCE_ID_BASE = 100
NOISE_ID_BASE = 10_000
NOISE_ID_SPAN = 50_000

Qrels = dict[str, dict[str, int]]


@dataclass
class PlantSpec:
    """How relevance is planted into the corpus.

    num_queries:        queries to generate (each gets one relevant doc)
    query_tokens:       tokens per query
    evidence_per_token: evidence copies planted per covered query token
    evidence_coverage:  fraction of query tokens that receive evidence
                        (ceil(coverage·n) tokens, chosen at random per query).
                        Covered tokens are "content-like": they mix in the
                        signal direction and get planted evidence. Uncovered
                        tokens are filler-like (no signal, no evidence), so
                        positives have rows without evidence, which is what
                        makes salience weighting matter for scoring
    noise:              evidence = normalize(query_token + noise * u) with u a
                        random unit vector, so the perturbation norm is
                        exactly `noise` at any dimension (dot with the query
                        token ~ 1/sqrt(1 + noise²))
    traps_per_query:    non-relevant docs seeded with near-copies, per query
    trap_tokens:        how many distinct query tokens each trap doc copies
    trap_copies:        near-copies planted per chosen token in a trap doc;
                        several copies sink every budget up to trap_copies
                        while leaving proportional-budget strategies intact
    trap_noise:         perturbation used for trap copies
    signal_coef:        strength of a shared latent direction mixed into query
                        tokens; makes evidence linearly separable from filler,
                        which a salience head can learn. 0 disables it.
    """

    num_queries: int = 16
    query_tokens: int = 4
    evidence_per_token: int = 1
    evidence_coverage: float = 1.0
    noise: float = 0.1
    traps_per_query: int = 0
    trap_tokens: int = 2
    trap_copies: int = 1
    trap_noise: float = 0.02
    signal_coef: float = 0.0


def synth_corpus(
    seed: int,
    num_docs: int,
    tokens_per_doc: int,
    dim: int,
    planted: PlantSpec | None = None,
) -> tuple[list[DocumentRecord], list[DocumentRecord], Qrels]:
    """Generate (documents, queries, qrels), deterministic in `seed`."""
    planted = planted or PlantSpec()
    if min(num_docs, tokens_per_doc, dim) < 1:
        raise ValueError("num_docs, tokens_per_doc and dim must all be >= 1")
    if min(planted.num_queries, planted.query_tokens, planted.evidence_per_token) < 1:
        raise ValueError("num_queries, query_tokens and evidence_per_token must be >= 1")
    if not 0.0 < planted.evidence_coverage <= 1.0:
        raise ValueError("evidence_coverage must lie in (0, 1]")
    if planted.num_queries > num_docs:
        raise ValueError("need at least one document per query to plant relevance")
    n_covered = max(int(math.ceil(planted.evidence_coverage * planted.query_tokens - 1e-9)), 1)
    n_evidence = n_covered * planted.evidence_per_token
    if n_evidence > tokens_per_doc:
        raise ValueError(
            f"{n_evidence} evidence tokens do not fit into documents of {tokens_per_doc} tokens"
        )
    if planted.traps_per_query > 0:
        if planted.trap_tokens > planted.query_tokens:
            raise ValueError("trap_tokens cannot exceed query_tokens")
        if planted.trap_copies < 1:
            raise ValueError("trap_copies must be >= 1")
        if planted.trap_tokens * planted.trap_copies > tokens_per_doc:
            raise ValueError("trap plantings do not fit into a document")
        if num_docs <= planted.num_queries:
            raise ValueError("traps need documents beyond the planted ones")

    rng = np.random.default_rng(seed)
    signal = normalize_rows(rng.standard_normal(dim))

    doc_vectors = normalize_rows(
        rng.standard_normal((num_docs, tokens_per_doc, dim), dtype=np.float32)
    )
    doc_ids_tok = rng.integers(
        NOISE_ID_BASE, NOISE_ID_BASE + NOISE_ID_SPAN, size=(num_docs, tokens_per_doc), dtype=np.uint32
    )

    queries: list[DocumentRecord] = []
    qrels: Qrels = {}
    for qi in range(planted.num_queries):
        covered = np.sort(rng.choice(planted.query_tokens, size=n_covered, replace=False))
        raw = rng.standard_normal((planted.query_tokens, dim), dtype=np.float32)
        if planted.signal_coef != 0.0:
            raw[covered] += np.float32(planted.signal_coef) * signal
        q_vecs = normalize_rows(raw)
        q_tok_ids = rng.integers(
            EVIDENCE_ID_BASE, NOISE_ID_BASE, size=planted.query_tokens, dtype=np.uint32
        )
        query_id = f"q{qi:04d}"
        queries.append(DocumentRecord(query_id, TokenEmbeddings(q_vecs, q_tok_ids)))

        # evidence for the covered tokens goes into document qi
        positions = rng.choice(tokens_per_doc, size=n_evidence, replace=False)
        for slot, t in enumerate(covered):
            for c in range(planted.evidence_per_token):
                pos = positions[slot * planted.evidence_per_token + c]
                wobble = normalize_rows(rng.standard_normal(dim, dtype=np.float32))
                vec = q_vecs[t] + np.float32(planted.noise) * wobble
                doc_vectors[qi, pos] = normalize_rows(vec)
                doc_ids_tok[qi, pos] = q_tok_ids[t]

        n_trap = planted.trap_tokens * planted.trap_copies
        for _ in range(planted.traps_per_query):
            trap_doc = int(rng.integers(planted.num_queries, num_docs))
            tok_choice = rng.choice(planted.query_tokens, size=planted.trap_tokens, replace=False)
            trap_pos = rng.choice(tokens_per_doc, size=n_trap, replace=False)
            for slot, t in enumerate(np.repeat(tok_choice, planted.trap_copies)):
                wobble = normalize_rows(rng.standard_normal(dim, dtype=np.float32))
                vec = q_vecs[t] + np.float32(planted.trap_noise) * wobble
                doc_vectors[trap_doc, trap_pos[slot]] = normalize_rows(vec)

        qrels[query_id] = {f"d{qi:06d}": 1}

    docs = [
        DocumentRecord(f"d{di:06d}", TokenEmbeddings(doc_vectors[di], doc_ids_tok[di]))
        for di in range(num_docs)
    ]
    return docs, queries, qrels


def evidence_mask(record: DocumentRecord) -> np.ndarray:
    """Boolean mask of planted evidence tokens, recovered from the id split."""
    return record.embeddings.token_ids < NOISE_ID_BASE
