"""Gradient training of the salience heads over frozen token embeddings.

Only the two affine+ReLU heads learn; token vectors and the pairwise
alignment rule are fixed inputs. Similarities are scored with gated salience
on both sides, the loss is a softmax cross-entropy over the positive against
sampled negatives, and gradients flow through the gate via its VJP, so the
loop exercises the differentiability of the sparsity constraint end to end.

Negative sets are sampled once per annotated query at setup (a fixed
hard-negative pool), which makes each full-batch step a deterministic
function of the head parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .alignment import AlignmentStrategy, apply_strategy, compute_similarity
from .errors import ConfigError, NumericalError
from .salience import SalienceHead, ceil_budget
from .solver import SolverConfig, SolverResult, solve_relaxed_topk, vjp_from_result
from .store import DocumentRecord, TokenEmbeddings


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    steps: int = 200
    batch_queries: int = 8
    negatives_per_query: int = 4
    epsilon: float = 0.002
    alpha_q: float = 0.5
    alpha_d: float = 0.4
    unroll_iters: int = 8
    seed: int = 0
    temperature: float = 0.05

    def __post_init__(self):
        positive = {
            "learning_rate": self.learning_rate,
            "batch_queries": self.batch_queries,
            "negatives_per_query": self.negatives_per_query,
            "epsilon": self.epsilon,
            "unroll_iters": self.unroll_iters,
            "temperature": self.temperature,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("alpha_q", "alpha_d"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(epsilon=self.epsilon, max_iters=self.unroll_iters)


@dataclass
class _HeadGrads:
    w: np.ndarray
    b: float = 0.0

    def add(self, other: "_HeadGrads") -> None:
        self.w += other.w
        self.b += other.b


class _GateTape:
    """Forward pass of one head side, with what the backward pass needs."""

    def __init__(self, emb: TokenEmbeddings, head: SalienceHead, alpha: float, cfg: SolverConfig):
        self.x = emb.vectors.astype(np.float64)
        self.pre = self.x @ head.weights + head.bias
        self.s = np.maximum(self.pre, 0.0)
        self.k = ceil_budget(alpha, self.s.size)
        self.result: SolverResult = solve_relaxed_topk(self.s, self.k, cfg)
        self.u = self.result.lam * self.s
        self.eps = cfg.epsilon

    def backward(self, g_u: np.ndarray) -> _HeadGrads:
        # u = lam(s) * s  =>  g_s = g_u*lam + (g_u*s)ᵀ·(dlam/ds)
        g_s = g_u * self.result.lam + vjp_from_result(self.result, self.eps, g_u * self.s)
        g_pre = np.where(self.pre > 0.0, g_s, 0.0)
        return _HeadGrads(self.x.T @ g_pre, float(g_pre.sum()))


# below this, the normalizer counts as zero: sim and its gradients vanish
# (also keeps 1/z from overflowing on denormal salience products)
_Z_FLOOR = 1e-30


def _sim_with_tapes(q_tape: _GateTape, d_tape: _GateTape, q_emb, d_emb, strategy):
    S = compute_similarity(q_emb.vectors, d_emb.vectors)
    pairwise = apply_strategy(S, strategy, query_ids=q_emb.token_ids, doc_ids=d_emb.token_ids)
    A = pairwise * np.outer(q_tape.u, d_tape.u)
    z = float(A.sum())
    if not np.isfinite(z):
        sim = float("nan")  # surfaces as NumericalError in the train loop
    elif z > _Z_FLOOR:
        sim = float((S * A).sum()) / z
    else:
        sim = 0.0
    return sim, S, pairwise, z


def _sim_grads(S, pairwise, z, sim, u_q, u_d):
    """d sim / d u on both sides; zero when nothing aligned."""
    if z <= _Z_FLOOR:
        return np.zeros_like(u_q), np.zeros_like(u_d)
    weighted = (S - sim) * pairwise
    return (weighted @ u_d) / z, (weighted.T @ u_q) / z


def example_loss_and_grads(
    query: DocumentRecord,
    positive: DocumentRecord,
    negatives: Sequence[DocumentRecord],
    query_head: SalienceHead,
    doc_head: SalienceHead,
    strategy: AlignmentStrategy,
    config: TrainConfig,
) -> tuple[float, _HeadGrads, _HeadGrads]:
    """Softmax cross-entropy of one (query, positive, negatives) example."""
    if not negatives:
        raise ValueError("need at least one negative document")
    cfg = config.solver_config()
    q_tape = _GateTape(query.embeddings, query_head, config.alpha_q, cfg)
    docs = [positive, *negatives]
    tapes, sims, forwards = [], [], []
    for doc in docs:
        d_tape = _GateTape(doc.embeddings, doc_head, config.alpha_d, cfg)
        sim, S, pairwise, z = _sim_with_tapes(q_tape, d_tape, query.embeddings, doc.embeddings, strategy)
        tapes.append(d_tape)
        sims.append(sim)
        forwards.append((S, pairwise, z))

    logits = np.array(sims) / config.temperature
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    loss = -float(np.log(p[0]))

    d_sims = p.copy()
    d_sims[0] -= 1.0
    d_sims /= config.temperature

    g_uq_total = np.zeros_like(q_tape.u)
    d_grads = _HeadGrads(np.zeros_like(doc_head.weights))
    for d_sim, d_tape, sim, (S, pairwise, z) in zip(d_sims, tapes, sims, forwards):
        g_uq, g_ud = _sim_grads(S, pairwise, z, sim, q_tape.u, d_tape.u)
        g_uq_total += d_sim * g_uq
        d_grads.add(d_tape.backward(d_sim * g_ud))
    q_grads = q_tape.backward(g_uq_total)
    return loss, q_grads, d_grads


def contrastive_loss(
    query: DocumentRecord,
    positive: DocumentRecord,
    negatives: Sequence[DocumentRecord],
    heads: tuple[SalienceHead, SalienceHead],
    strategy: AlignmentStrategy,
    alpha_q: float = 0.5,
    alpha_d: float = 0.4,
    epsilon: float = 0.002,
    temperature: float = 0.05,
) -> float:
    """-log softmax(sim(Q, D+)/τ) over the positive plus negatives."""
    config = TrainConfig(
        alpha_q=alpha_q, alpha_d=alpha_d, epsilon=epsilon, temperature=temperature
    )
    loss, _, _ = example_loss_and_grads(
        query, positive, negatives, heads[0], heads[1], strategy, config
    )
    return loss


def init_heads(
    dim: int, seed: int = 0, weight_scale: float = 1e-3, bias: float = 0.5
) -> tuple[SalienceHead, SalienceHead]:
    """Random heads sized for trainability at step 0.

    The positive bias keeps every ReLU alive, and the weight scale should sit
    below the gate temperature so the initial score spread leaves the gate
    soft: a hard gate passes no gradient to the tokens it masks.
    """
    rng = np.random.default_rng(seed)
    query_head = SalienceHead(rng.normal(0.0, weight_scale, dim), bias, side="query")
    doc_head = SalienceHead(rng.normal(0.0, weight_scale, dim), bias, side="doc")
    return query_head, doc_head


def train_salience(
    records: Sequence[DocumentRecord],
    annotated: Sequence[tuple[DocumentRecord, str]],
    config: TrainConfig,
    strategy: Optional[AlignmentStrategy] = None,
) -> tuple[SalienceHead, SalienceHead, np.ndarray]:
    """Plain gradient descent on the two heads; returns (q, d, loss trace).

    `annotated` pairs each query record with its positive doc_id. steps=0
    returns the freshly initialized heads untouched.
    """
    strategy = strategy or AlignmentStrategy.top_k(1)
    records = list(records)
    annotated = list(annotated)
    if not annotated:
        raise ConfigError("no annotated (query, positive) pairs")
    by_id = {rec.doc_id: i for i, rec in enumerate(records)}
    if config.negatives_per_query > len(records) - 1:
        raise ConfigError("not enough documents to sample negatives from")

    rng = np.random.default_rng(config.seed)
    query_head, doc_head = init_heads(
        records[0].embeddings.dim, config.seed, weight_scale=0.5 * config.epsilon
    )

    examples = []
    for query, pos_id in annotated:
        if pos_id not in by_id:
            raise ConfigError(f"positive doc {pos_id!r} not in the corpus")
        pos_idx = by_id[pos_id]
        pool = np.delete(np.arange(len(records)), pos_idx)
        neg_idx = rng.choice(pool, size=config.negatives_per_query, replace=False)
        examples.append((query, records[pos_idx], [records[i] for i in neg_idx]))

    losses = np.zeros(config.steps)
    batch_size = min(config.batch_queries, len(examples))
    for step in range(config.steps):
        batch = rng.choice(len(examples), size=batch_size, replace=False)
        total = 0.0
        gq = _HeadGrads(np.zeros_like(query_head.weights))
        gd = _HeadGrads(np.zeros_like(doc_head.weights))
        for ei in batch:
            query, positive, negatives = examples[ei]
            loss, q_grads, d_grads = example_loss_and_grads(
                query, positive, negatives, query_head, doc_head, strategy, config
            )
            total += loss
            gq.add(q_grads)
            gd.add(d_grads)
        mean_loss = total / batch_size
        if not np.isfinite(mean_loss):
            raise NumericalError(f"non-finite loss at step {step}", step=step)
        losses[step] = mean_loss
        lr = config.learning_rate / batch_size
        query_head.weights = query_head.weights - lr * gq.w
        query_head.bias = query_head.bias - lr * gq.b
        doc_head.weights = doc_head.weights - lr * gd.w
        doc_head.bias = doc_head.bias - lr * gd.b
    return query_head, doc_head, losses


def write_loss_trace(losses: np.ndarray, path) -> None:
    lines = ["step,loss"] + [f"{i},{v:.8f}" for i, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")
