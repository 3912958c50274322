"""Token-similarity matrices, pairwise alignment strategies, and scoring.

The similarity between a query and a document is a normalized weighted sum
over all token pairs:

    sim(Q, D) = (1/Z) Σ_ij S[i,j] · A[i,j],   Z = Σ_ij A[i,j]

where S holds token dot products and A is an alignment matrix with entries in
[0, 1]. Hard strategies put exact 0/1 entries in A; the differentiable
strategy fills each row with a relaxed top-k gate whose row sums equal k.
A can further be factored into a pairwise part and per-token salience
weights (see `score_full`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ConvergenceError, DimensionError
from .solver import SolverConfig, solve_relaxed_topk

STRATEGY_KINDS = (
    "single_vector",
    "first_k",
    "top_k",
    "top_p",
    "exact_match",
    "differentiable",
)


@dataclass(frozen=True)
class AlignmentStrategy:
    """Tagged choice of pairwise alignment rule.

    kind      parameters
    ----      ----------
    single_vector   (none; scores position (0, 0) only)
    first_k         k: restrict row 0 to the first k document tokens
    top_k           k: each query token aligns with its k best doc tokens
    top_p           p in (0, 1]: per-row budget max(floor(p·m), 1)
    exact_match     (none; best doc token sharing the query token's id)
    differentiable  k and epsilon: relaxed top-k rows summing to k
    """

    kind: str
    k: Optional[int] = None
    p: Optional[float] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown alignment kind {self.kind!r}")
        needs_k = self.kind in ("first_k", "top_k", "differentiable")
        if needs_k and (self.k is None or self.k < 1):
            raise ConfigError(f"{self.kind} requires a positive k")
        if not needs_k and self.k is not None:
            raise ConfigError(f"{self.kind} takes no k")
        if self.kind == "top_p":
            if self.p is None or not 0.0 < self.p <= 1.0:
                raise ConfigError("top_p requires p in (0, 1]")
        elif self.p is not None:
            raise ConfigError(f"{self.kind} takes no p")
        if self.kind == "differentiable":
            if self.epsilon is None or self.epsilon <= 0:
                raise ConfigError("differentiable requires a positive epsilon")
        elif self.epsilon is not None:
            raise ConfigError(f"{self.kind} takes no epsilon")

    @classmethod
    def single_vector(cls) -> "AlignmentStrategy":
        return cls("single_vector")

    @classmethod
    def first_k(cls, k: int) -> "AlignmentStrategy":
        return cls("first_k", k=k)

    @classmethod
    def top_k(cls, k: int) -> "AlignmentStrategy":
        return cls("top_k", k=k)

    @classmethod
    def top_p(cls, p: float) -> "AlignmentStrategy":
        return cls("top_p", p=p)

    @classmethod
    def exact_match(cls) -> "AlignmentStrategy":
        return cls("exact_match")

    @classmethod
    def differentiable(cls, k: int, epsilon: float) -> "AlignmentStrategy":
        return cls("differentiable", k=k, epsilon=epsilon)

    def label(self) -> str:
        if self.kind in ("top_k", "first_k"):
            return f"{self.kind}:{self.k}"
        if self.kind == "top_p":
            return f"top_p:{self.p:g}"
        if self.kind == "differentiable":
            return f"differentiable:{self.k}:{self.epsilon:g}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "AlignmentStrategy":
        """Inverse of label(); accepts hyphens as separators in kind names."""
        parts = text.strip().split(":")
        kind = parts[0].replace("-", "_")
        try:
            if kind in ("top_k", "first_k"):
                return cls(kind, k=int(parts[1]))
            if kind == "top_p":
                return cls(kind, p=float(parts[1]))
            if kind == "differentiable":
                return cls(kind, k=int(parts[1]), epsilon=float(parts[2]))
            if kind in ("single_vector", "exact_match"):
                return cls(kind)
        except (IndexError, ValueError) as e:
            raise ConfigError(f"cannot parse strategy {text!r}: {e}") from e
        raise ConfigError(f"unknown alignment strategy {text!r}")


@dataclass
class AlignmentResult:
    """Pairwise matrix Ã, the normalizer Z of the final A, and the score."""

    pairwise: np.ndarray
    normalizer: float
    score: float


def compute_similarity(query_vectors, doc_vectors) -> np.ndarray:
    """All-pairs dot products; rows index query tokens, columns doc tokens."""
    q = np.asarray(query_vectors)
    d = np.asarray(doc_vectors)
    if q.ndim != 2 or d.ndim != 2 or q.shape[1] != d.shape[1]:
        raise DimensionError(f"cannot multiply shapes {q.shape} and {d.shape}")
    return (q @ d.T).astype(np.float64)


def align_topk(S: np.ndarray, k: int) -> np.ndarray:
    """Ones at each row's min(k, m) largest entries, ties toward low columns."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n, m = S.shape
    k_eff = min(k, m)
    order = np.argsort(-S, axis=1, kind="stable")
    A = np.zeros((n, m))
    np.put_along_axis(A, order[:, :k_eff], 1.0, axis=1)
    return A


def effective_topp_budget(p: float, m: int) -> int:
    # 1e-9 guard keeps exact decimal products (0.01 * 300) exact in binary
    return max(int(math.floor(p * m + 1e-9)), 1)


def align_topp(S: np.ndarray, p: float) -> np.ndarray:
    """Top-k with a per-document budget proportional to its length."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    return align_topk(S, effective_topp_budget(p, S.shape[1]))


def align_exact_match(S: np.ndarray, query_ids, doc_ids) -> np.ndarray:
    """Best same-id doc token per query token; rows without a match stay 0."""
    query_ids = np.asarray(query_ids)
    doc_ids = np.asarray(doc_ids)
    n, m = S.shape
    if query_ids.shape != (n,) or doc_ids.shape != (m,):
        raise DimensionError("id sequences must match the similarity shape")
    A = np.zeros((n, m))
    for i in range(n):
        cols = np.flatnonzero(doc_ids == query_ids[i])
        if cols.size:
            A[i, cols[int(np.argmax(S[i, cols]))]] = 1.0
    return A


def align_single_vector(S: np.ndarray, k: int = 1) -> np.ndarray:
    """Single alignment in row 0: its best entry among the first k columns.

    k=1 reduces to scoring position (0, 0) alone, the single-CLS-vector rule;
    larger k is the first-k-document-vectors rule. k clamps to m.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m = S.shape[1]
    A = np.zeros_like(S, dtype=np.float64)
    A[0, int(np.argmax(S[0, : min(k, m)]))] = 1.0
    return A


def align_differentiable(
    S: np.ndarray, k: int, epsilon: float, solver_config: SolverConfig | None = None
) -> np.ndarray:
    """Relaxed rows: each solves the gate problem with budget min(k, m)."""
    n, m = S.shape
    k_eff = min(k, m)
    config = solver_config or SolverConfig(epsilon=epsilon)
    if config.epsilon != epsilon:
        config = SolverConfig(epsilon=epsilon, max_iters=config.max_iters, tol=config.tol)
    A = np.empty((n, m))
    for i in range(n):
        result = solve_relaxed_topk(S[i], k_eff, config)
        if not result.converged:
            raise ConvergenceError(
                f"row {i} gate did not converge (residual {result.residual:.3g})",
                result=result,
            )
        A[i] = result.lam
    return A


def apply_strategy(
    S: np.ndarray,
    strategy: AlignmentStrategy,
    query_ids=None,
    doc_ids=None,
) -> np.ndarray:
    """Build the pairwise alignment matrix for `strategy`."""
    if strategy.kind == "top_k":
        return align_topk(S, strategy.k)
    if strategy.kind == "top_p":
        return align_topp(S, strategy.p)
    if strategy.kind == "exact_match":
        if query_ids is None or doc_ids is None:
            raise ConfigError("exact_match alignment requires token ids on both sides")
        return align_exact_match(S, query_ids, doc_ids)
    if strategy.kind == "single_vector":
        return align_single_vector(S, 1)
    if strategy.kind == "first_k":
        return align_single_vector(S, strategy.k)
    if strategy.kind == "differentiable":
        return align_differentiable(S, strategy.k, strategy.epsilon)
    raise ConfigError(f"unknown alignment kind {strategy.kind!r}")


def score(S: np.ndarray, A: np.ndarray, normalize: bool = True) -> float:
    """Normalized alignment score; 0 by convention when nothing aligns."""
    S = np.asarray(S, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if S.shape != A.shape:
        raise DimensionError(f"similarity {S.shape} vs alignment {A.shape}")
    total = float((S * A).sum())
    if not normalize:
        return total
    z = float(A.sum())
    return total / z if z > 0.0 else 0.0


def score_full(
    S: np.ndarray,
    pairwise: np.ndarray,
    query_salience,
    doc_salience,
    normalize: bool = True,
) -> float:
    """Score with A = pairwise ⊙ (query_salience ⊗ doc_salience)."""
    u_q = np.asarray(query_salience, dtype=np.float64).ravel()
    u_d = np.asarray(doc_salience, dtype=np.float64).ravel()
    if pairwise.shape != (u_q.size, u_d.size):
        raise DimensionError(
            f"salience lengths ({u_q.size}, {u_d.size}) do not match alignment {pairwise.shape}"
        )
    return score(S, pairwise * np.outer(u_q, u_d), normalize=normalize)


def evaluate_alignment(
    S: np.ndarray,
    strategy: AlignmentStrategy,
    query_ids=None,
    doc_ids=None,
    query_salience=None,
    doc_salience=None,
    normalize: bool = True,
) -> AlignmentResult:
    """Apply a strategy and score it, reporting the normalizer used."""
    pairwise = apply_strategy(S, strategy, query_ids=query_ids, doc_ids=doc_ids)
    if query_salience is not None and doc_salience is not None:
        A = pairwise * np.outer(
            np.asarray(query_salience, dtype=np.float64),
            np.asarray(doc_salience, dtype=np.float64),
        )
    else:
        A = pairwise
    z = float(A.sum())
    return AlignmentResult(pairwise=pairwise, normalizer=z, score=score(S, A, normalize=normalize))
