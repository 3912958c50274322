"""Relaxed top-k gate via an entropy-smoothed budgeted linear program.

Given scores s and a budget k, the gate solves

    max_λ  s·λ + ε·H(λ)   s.t.  Σλ = k,  0 ≤ λ_i ≤ 1

with H the elementwise entropy. As ε→0 the solution approaches the hard
top-k indicator; for ε>0 it is a smooth, differentiable relaxation. The dual
has one scalar variable a (budget) and one clamp variable b_i ≤ 0 per entry
(the λ_i ≤ 1 caps), with the primal recovered as λ_i = exp((s_i + a + b_i)/ε).

Dual descent alternates the a-step and the b-step. Plain per-coordinate
alternation moves a by O(ε) per pass and can take thousands of passes to
cross score gaps, so the a-step here maximizes the reduced dual exactly: with
b eliminated at its optimum, a solves the monotone scalar equation

    R(a) = Σ_i exp(min(0, s_i + a)/ε) = k.

A scan over clamp counts on the sorted scores yields the closed-form
candidate, and bisection refines it to machine precision; the b-step
b_i = min(-s_i - a, 0) then lands on the joint optimum, so one outer pass
converges. Everything stays in the log domain (no intermediate overflow for
ε ≥ 1e-6 and |s_i| ≤ 1e3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SolverConfig:
    """epsilon: entropy temperature; tol: bound on |Σλ - k| for convergence."""

    epsilon: float = 0.002
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass
class SolverResult:
    """Gate vector with its dual certificate and convergence diagnostics.

    lam:    (m,) gate values in [0, 1]
    dual_a: scalar budget dual
    dual_b: (m,) clamp duals, all ≤ 0
    """

    lam: np.ndarray
    dual_a: float
    dual_b: np.ndarray
    iterations_used: int
    converged: bool
    residual: float


def _budget_residual(s: np.ndarray, a: float, eps: float, k: int) -> float:
    return float(np.exp(np.minimum(0.0, s + a) / eps).sum()) - k


def _optimal_scalar_dual(s: np.ndarray, k: int, eps: float) -> float:
    """Solve R(a) = k for the budget dual; R is nondecreasing in a."""
    m = s.size
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    # suffix[j] = logsumexp(ss[j:] / eps)
    suffix = np.logaddexp.accumulate(ss[::-1] / eps)[::-1]
    counts = np.arange(k, dtype=np.float64)  # clamp counts 0..k-1
    candidates = eps * (np.log(k - counts) - suffix[:k])
    # candidate j is consistent iff it clamps exactly the top j entries
    lower = np.empty(k)
    lower[0] = -np.inf
    lower[1:] = -ss[: k - 1]
    upper = -ss[:k]
    slack = 1e-9 * (1.0 + np.abs(upper))  # float round-off at segment edges
    valid = (candidates >= lower - slack) & (candidates <= upper + slack)

    pool = [float(c) for c in candidates[valid][:4]]
    pool.append(float(-ss[m - 1]))  # k == m: every entry clamps
    a = min(pool, key=lambda c: abs(_budget_residual(s, c, eps, k)))
    g = _budget_residual(s, a, eps, k)
    tol_machine = 5e-14 * max(1.0, float(k))
    if abs(g) <= tol_machine:
        return a

    # bracket [lo, hi] with R(lo) < k <= R(hi), then bisect
    step = max(eps, 1e-3)
    if g > 0:
        hi, lo = a, a - step
        while _budget_residual(s, lo, eps, k) > 0:
            step *= 4.0
            lo -= step
    else:
        lo, hi = a, a + step
        while _budget_residual(s, hi, eps, k) < 0:
            step *= 4.0
            hi += step
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        g = _budget_residual(s, mid, eps, k)
        a = mid
        if abs(g) <= tol_machine:
            break
        if g > 0:
            hi = mid
        else:
            lo = mid
    return a


def solve_relaxed_topk(s, k: int, config: SolverConfig | None = None) -> SolverResult:
    """Compute the relaxed top-k gate for scores `s` and integer budget `k`.

    Returns a SolverResult; converged is False (never raised) if the budget
    residual exceeds config.tol, which callers may surface as a warning.
    """
    config = config or SolverConfig()
    s = np.asarray(s, dtype=np.float64).ravel()
    m = s.size
    if m < 1:
        raise ValueError("scores must be non-empty")
    if not 1 <= k <= m:
        raise ValueError(f"budget k={k} outside [1, m={m}]")
    eps = config.epsilon

    a = 0.0
    b = np.zeros(m)
    lam = np.ones(m)
    residual = np.inf
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        a = _optimal_scalar_dual(s, k, eps)
        b = np.minimum(-s - a, 0.0)
        lam = np.exp((s + b + a) / eps)
        residual = abs(float(lam.sum()) - k)
        if residual <= config.tol:
            break
        # the a-step is exact, so another pass cannot improve the residual
        break

    return SolverResult(
        lam=lam,
        dual_a=a,
        dual_b=b,
        iterations_used=iterations,
        converged=residual <= config.tol,
        residual=residual,
    )


def objective(s, lam, epsilon: float) -> float:
    """Gate objective s·λ + ε·H(λ), with the 0·log(0) = 0 convention."""
    s = np.asarray(s, dtype=np.float64).ravel()
    lam = np.asarray(lam, dtype=np.float64).ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(lam > 0.0, -lam * np.log(lam), 0.0)
    return float(s @ lam + epsilon * ent.sum())


def vjp_from_result(result: SolverResult, epsilon: float, upstream) -> np.ndarray:
    """Gate VJP given an already-computed solve (see vjp_relaxed_topk)."""
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    if upstream.shape != result.lam.shape:
        raise ValueError("upstream must match the gate vector's shape")
    open_gate = result.dual_b >= 0.0  # b < 0 marks entries clamped at 1
    lam_open = np.where(open_gate, result.lam, 0.0)
    grad = upstream * lam_open / epsilon
    mass = lam_open.sum()
    if mass > 0.0:
        grad = grad - grad.sum() * lam_open / mass
    return grad


def vjp_relaxed_topk(s, k: int, config: SolverConfig | None, upstream) -> np.ndarray:
    """Vector-Jacobian product upstreamᵀ·(∂λ/∂s) at the converged gate.

    The solve reaches its fixed point in one pass, so differentiating the
    unrolled pass equals differentiating the fixed point: clamped entries are
    locally constant, and for the rest dλ_i = λ_i(ds_i + da)/ε with da chosen
    to keep Σλ = k.
    """
    config = config or SolverConfig()
    s = np.asarray(s, dtype=np.float64).ravel()
    result = solve_relaxed_topk(s, k, config)
    return vjp_from_result(result, config.epsilon, upstream)
