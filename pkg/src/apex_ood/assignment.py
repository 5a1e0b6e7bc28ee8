"""Entropy-regularized optimal-transport assignment of samples to prototypes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._math import logsumexp
from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class AssignmentMatrix:
    """``weights`` is K x B: rows are prototypes, columns are batch samples."""

    weights: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    iterations_used: int
    converged: bool


def sinkhorn(
    similarities: np.ndarray,
    epsilon: float = 0.05,
    row_marginals: np.ndarray | None = None,
    col_marginals: np.ndarray | None = None,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> AssignmentMatrix:
    """Solve ``W = diag(u) exp(S / epsilon) diag(v)`` for the given marginals.

    Scalings are kept as log-potentials so small ``epsilon`` never
    under- or overflows. Iteration stops once both marginal residuals
    (max-norm) are at most ``tol``. Marginals default to uniform.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 2:
        raise ConfigError("similarities must be a K x B matrix")
    if not np.isfinite(s).all():
        raise ConfigError("similarities must be finite")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    k, b = s.shape
    a = np.full(k, 1.0 / k) if row_marginals is None else np.asarray(row_marginals, dtype=np.float64)
    c = np.full(b, 1.0 / b) if col_marginals is None else np.asarray(col_marginals, dtype=np.float64)
    if a.shape != (k,) or c.shape != (b,):
        raise ConfigError("marginal lengths must match the similarity matrix shape")
    if (a < 0).any() or (c < 0).any():
        raise ConfigError("marginals must be non-negative")
    if abs(a.sum() - c.sum()) > 1e-12:
        raise ConfigError(f"marginal totals differ: {a.sum()!r} vs {c.sum()!r}")

    log_k = s / epsilon
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_c = np.log(c)
    log_u = np.zeros(k)
    log_v = np.zeros(b)
    converged = False
    it = 0
    w = None
    for it in range(1, max_iters + 1):
        log_u = log_a - logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_c - logsumexp(log_k + log_u[:, None], axis=0)
        w = np.exp(log_u[:, None] + log_k + log_v[None, :])
        row_err = np.max(np.abs(w.sum(axis=1) - a))
        col_err = np.max(np.abs(w.sum(axis=0) - c))
        if row_err <= tol and col_err <= tol:
            converged = True
            break
    if w is None:
        w = np.exp(log_k - logsumexp(log_k))  # max_iters == 0
    if not np.isfinite(w).all():
        raise NumericalError("non-finite transport plan after log-domain stabilization")
    return AssignmentMatrix(w, a, c, it, converged)


def batch_class_weights(
    batch: np.ndarray,
    prototypes: np.ndarray,
    epsilon: float = 0.05,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> AssignmentMatrix:
    """Soft weights of one class's batch samples over that class's prototypes.

    The transport plan uses uniform marginals; afterwards every column is
    rescaled to sum to one so each sample carries a distribution over its
    class prototypes.
    """
    z = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    p = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if z.shape[0] == 0:
        raise ConfigError("batch must be non-empty")
    if z.shape[1] != p.shape[1]:
        raise ConfigError("batch and prototype dimensions differ")
    plan = sinkhorn(p @ z.T, epsilon, max_iters=max_iters, tol=tol)
    w = plan.weights / plan.weights.sum(axis=0, keepdims=True)
    b = z.shape[0]
    return AssignmentMatrix(
        weights=w,
        row_marginals=plan.row_marginals * b,
        col_marginals=np.ones(b),
        iterations_used=plan.iterations_used,
        converged=plan.converged,
    )
