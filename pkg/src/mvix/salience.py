"""Per-token salience: affine+ReLU heads, sparsity gating, and pruning.

A head scores each token as max(0, w·x + b). At training time the scores pass
through the relaxed top-k gate (budget ceil(alpha·m)), which drives most of
them toward zero while staying differentiable. At retrieval time the raw
scores rank tokens for pruning: keep the ceil(beta·m) most salient ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DimensionError
from .solver import SolverConfig, solve_relaxed_topk
from .store import TokenEmbeddings


@dataclass
class SalienceHead:
    """One affine+ReLU scoring head (a single weight row and bias)."""

    weights: np.ndarray
    bias: float
    side: str = "doc"  # "query" or "doc"; informational, kept in the JSON form

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.bias = float(self.bias)

    @property
    def dim(self) -> int:
        return int(self.weights.size)


@dataclass
class SalienceConfig:
    """Sparsity ratios (training) and pruning ratios (retrieval/indexing)."""

    alpha_q: float = 0.5
    alpha_d: float = 0.4
    epsilon: float = 0.002
    beta_q: float = 1.0
    beta_d: float = 1.0

    def __post_init__(self):
        for name in ("alpha_q", "alpha_d", "beta_q", "beta_d"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def ceil_budget(ratio: float, m: int) -> int:
    """ceil(ratio·m) with a guard so exact decimal products stay exact."""
    return max(int(math.ceil(ratio * m - 1e-9)), 1)


def raw_salience(tokens: Union[TokenEmbeddings, np.ndarray], head: SalienceHead) -> np.ndarray:
    """Pre-gate scores max(0, w·x + b) for each token row."""
    vectors = tokens.vectors if isinstance(tokens, TokenEmbeddings) else np.asarray(tokens)
    if vectors.ndim != 2 or vectors.shape[1] != head.dim:
        raise DimensionError(
            f"head dim {head.dim} does not match token matrix shape {vectors.shape}"
        )
    return np.maximum(vectors.astype(np.float64) @ head.weights + head.bias, 0.0)


def gated_salience(
    scores,
    alpha: float,
    epsilon: float,
    solver_config: SolverConfig | None = None,
) -> np.ndarray:
    """Sparsified salience λ ⊙ s with gate budget ceil(alpha·m)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    s = np.asarray(scores, dtype=np.float64).ravel()
    config = solver_config or SolverConfig(epsilon=epsilon)
    if config.epsilon != epsilon:
        config = SolverConfig(epsilon=epsilon, max_iters=config.max_iters, tol=config.tol)
    result = solve_relaxed_topk(s, ceil_budget(alpha, s.size), config)
    return result.lam * s


def prune_select(salience, beta: float) -> np.ndarray:
    """Indices of the ceil(beta·m) most salient tokens, ascending.

    Ties break toward the lower index; ascending output preserves token order
    in pruned stores.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    s = np.asarray(salience, dtype=np.float64).ravel()
    keep = ceil_budget(beta, s.size)
    top = np.argsort(-s, kind="stable")[:keep]
    return np.sort(top)


def save_head(head: SalienceHead, path) -> None:
    doc = {
        "side": head.side,
        "dim": head.dim,
        "weights": [float(w) for w in head.weights],
        "bias": head.bias,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_head(path) -> SalienceHead:
    doc = json.loads(Path(path).read_text())
    head = SalienceHead(np.array(doc["weights"], dtype=np.float64), doc["bias"], doc["side"])
    if head.dim != doc["dim"]:
        raise DimensionError(f"{path}: dim field {doc['dim']} vs {head.dim} weights")
    return head
