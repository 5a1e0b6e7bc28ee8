"""Per-class prototype counts from EM-fitted Gaussian mixtures scored by BIC.

The EM implementation is deliberately small: k-means++ seeding, hard
initial responsibilities, and an M-step whose covariance update clamps
variances (diagonal) or eigenvalues (full) at ``VAR_FLOOR``. Clamping is the
exact constrained maximizer of the expected complete log-likelihood, so the
log-likelihood stays monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._math import logsumexp
from .embeddings import EmbeddingSet
from .errors import ConfigError, InfeasibleError, NumericalError
from .seeding import STAGE_GMM, STAGE_STRATEGY, derive_rng

VAR_FLOOR = 1e-6
STRATEGIES = ("bic", "fixed", "random-uniform", "dirichlet-noise", "shuffle-of-bic")


@dataclass(frozen=True)
class GmmModel:
    k: int
    weights: np.ndarray
    means: np.ndarray
    # (k, D) variances for "diagonal", (k, D, D) matrices for "full"
    covariances: np.ndarray
    cov_kind: str
    log_likelihood: float
    n_iter: int = 0
    converged: bool = False
    history: tuple[float, ...] = field(default=(), repr=False)


# --------------------------------------------------------------------------
# EM internals


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Return indices of ``k`` k-means++ seeds drawn from the rows of ``x``."""
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every remaining point coincides with a seed
            remaining = np.setdiff1d(np.arange(n), idx)
            idx.append(int(rng.choice(remaining)))
        else:
            idx.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((x - x[idx[-1]]) ** 2, axis=1))
    return np.asarray(idx)


def _log_gauss(x: np.ndarray, means: np.ndarray, covs: np.ndarray, cov_kind: str, xx=None) -> np.ndarray:
    n, d = x.shape
    k = means.shape[0]
    if cov_kind == "diagonal":
        prec = 1.0 / covs
        quad = (
            (x * x if xx is None else xx) @ prec.T
            - 2.0 * x @ (means * prec).T
            + np.sum(means * means * prec, axis=1)[None, :]
        )
        logdet = np.sum(np.log(covs), axis=1)
    else:
        quad = np.empty((n, k))
        logdet = np.empty(k)
        for j in range(k):
            chol = np.linalg.cholesky(covs[j])
            sol = np.linalg.solve(chol, (x - means[j]).T)
            quad[:, j] = np.sum(sol * sol, axis=0)
            logdet[j] = 2.0 * np.sum(np.log(np.diag(chol)))
    np.maximum(quad, 0.0, out=quad)
    quad += logdet[None, :] + d * math.log(2.0 * math.pi)
    quad *= -0.5
    return quad


def _m_step(x: np.ndarray, resp: np.ndarray, cov_kind: str, xx=None):
    n, d = x.shape
    nk = resp.sum(axis=0) + 10.0 * np.finfo(float).eps
    weights = nk / n
    means = (resp.T @ x) / nk[:, None]
    if cov_kind == "diagonal":
        covs = (resp.T @ (x * x if xx is None else xx)) / nk[:, None] - means * means
        covs = np.maximum(covs, VAR_FLOOR)
    else:
        covs = np.empty((means.shape[0], d, d))
        for j in range(means.shape[0]):
            diff = x - means[j]
            s = (resp[:, j, None] * diff).T @ diff / nk[j]
            s = 0.5 * (s + s.T)
            vals, vecs = np.linalg.eigh(s)
            if vals.min() < VAR_FLOOR:
                s = (vecs * np.maximum(vals, VAR_FLOOR)) @ vecs.T
                s = 0.5 * (s + s.T)
            covs[j] = s
    return weights, means, covs


def _em_run(x, k, cov_kind, rng, max_iters, tol):
    n = x.shape[0]
    seeds = kmeans_plusplus(x, k, rng)
    d2 = ((x[:, None, :] - x[seeds][None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    xx = x * x
    weights, means, covs = _m_step(x, resp, cov_kind, xx)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        resp = _log_gauss(x, means, covs, cov_kind, xx)
        resp += np.log(weights)[None, :]
        top = resp.max(axis=1, keepdims=True)
        resp -= top
        np.exp(resp, out=resp)
        total = resp.sum(axis=1, keepdims=True)
        ll = float(np.sum(np.log(total) + top))
        if not math.isfinite(ll):
            return None
        history.append(ll)
        if len(history) > 1 and (history[-1] - history[-2]) / n < tol:
            converged = True
            break
        resp /= total
        weights, means, covs = _m_step(x, resp, cov_kind, xx)
    # ``ll`` belongs to the parameters currently held unless the loop ran
    # out of iterations after an M-step; re-evaluate in that case.
    if not converged:
        log_joint = _log_gauss(x, means, covs, cov_kind) + np.log(weights)[None, :]
        ll = float(logsumexp(log_joint, axis=1).sum())
        if not math.isfinite(ll):
            return None
        history.append(ll)
    return GmmModel(
        k=k,
        weights=weights / weights.sum(),
        means=means,
        covariances=covs,
        cov_kind=cov_kind,
        log_likelihood=ll,
        n_iter=it,
        converged=converged,
        history=tuple(history),
    )


def fit_gmm(
    features: np.ndarray,
    k: int,
    cov_kind: str = "diagonal",
    seed: int = 0,
    restarts: int = 4,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> GmmModel:
    """Fit a ``k``-component Gaussian mixture by EM, keeping the best restart.

    ``tol`` applies to the per-sample mean log-likelihood improvement.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("features must be a 2-D matrix")
    if cov_kind not in ("diagonal", "full"):
        raise ConfigError(f"unknown cov_kind {cov_kind!r}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if x.shape[0] < k:
        raise InfeasibleError(f"cannot fit {k} components to {x.shape[0]} samples")
    if not np.isfinite(x).all():
        raise ConfigError("features must be finite")
    best = None
    for r in range(max(1, restarts)):
        rng = derive_rng(seed, STAGE_GMM, k, r)
        model = _em_run(x, k, cov_kind, rng, max_iters, tol)
        if model is None:
            raise NumericalError(f"EM produced a non-finite likelihood in run {r}")
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    return best


# --------------------------------------------------------------------------
# model selection


def param_count(k: int, d: int, cov_kind: str = "diagonal") -> int:
    """Free parameters of a ``k``-component mixture in ``d`` dimensions."""
    cov = k * d if cov_kind == "diagonal" else k * d * (d + 1) // 2
    return (k - 1) + k * d + cov


def bic(model: GmmModel, n_c: int, d: int, cov_kind: str | None = None) -> float:
    if n_c < 2:
        raise ConfigError(f"BIC is undefined for n_c = {n_c} < 2")
    kind = cov_kind or model.cov_kind
    return param_count(model.k, d, kind) * math.log(n_c) - 2.0 * model.log_likelihood


def select_k(
    features: np.ndarray,
    candidates,
    cov_kind: str = "diagonal",
    seed: int = 0,
    restarts: int = 4,
    max_iters: int = 200,
    tol: float = 1e-6,
):
    """Return ``(k_star, trace)`` where trace holds ``(k, bic or None)``.

    Infeasible candidates (``k > n_c``) appear in the trace with ``None``.
    Ties go to the smaller ``k``.
    """
    x = np.asarray(features, dtype=np.float64)
    candidates = [int(k) for k in candidates]
    if not candidates:
        raise ConfigError("candidate list is empty")
    n, d = x.shape
    trace = []
    for k in candidates:
        if k > n or n < 2:
            trace.append((k, None))
            continue
        model = fit_gmm(x, k, cov_kind, seed, restarts, max_iters, tol)
        trace.append((k, bic(model, n, d, cov_kind)))
    feasible = [(b, k) for k, b in trace if b is not None]
    if not feasible:
        raise InfeasibleError(f"no feasible candidate among {candidates} for {n} samples")
    return min(feasible)[1], trace


@dataclass
class KSelectionReport:
    strategy: str
    k_map: list
    traces: list
    seed: int
    cov_kind: str = "diagonal"
    normalized: bool = True
    params: dict = field(default_factory=dict)

    @property
    def total_prototypes(self) -> int:
        return int(sum(self.k_map))

    def to_dict(self) -> dict:
        per_class = []
        for c, (k, trace) in enumerate(zip(self.k_map, self.traces)):
            per_class.append({
                "class": c,
                "k": int(k),
                "trace": [
                    {"k": int(kk), "bic": None if b is None else float(b), "skipped": b is None}
                    for kk, b in trace
                ],
            })
        return {
            "strategy": self.strategy,
            "params": self.params,
            "seed": int(self.seed),
            "cov_kind": self.cov_kind,
            "normalized": bool(self.normalized),
            "k_map": [int(k) for k in self.k_map],
            "total_prototypes": self.total_prototypes,
            "per_class": per_class,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KSelectionReport":
        traces = [
            [(t["k"], t["bic"]) for t in entry["trace"]]
            for entry in sorted(data["per_class"], key=lambda e: e["class"])
        ]
        return cls(
            strategy=data["strategy"],
            k_map=list(data["k_map"]),
            traces=traces,
            seed=data["seed"],
            cov_kind=data.get("cov_kind", "diagonal"),
            normalized=data.get("normalized", True),
            params=data.get("params", {}),
        )


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    base = np.floor(raw).astype(int)
    short = total - int(base.sum())
    # stable order: larger remainder first, then lower class index
    order = np.lexsort((np.arange(raw.size), -(raw - base)))
    base[order[:short]] += 1
    return base


def _bic_counts(data: EmbeddingSet, config, seed: int):
    k_map, traces = [], []
    for c in range(data.class_count):
        x = data.class_features(c)
        if x.shape[0] == 0:
            raise InfeasibleError(f"class {c} has no samples")
        k, trace = select_k(
            x,
            config.k_candidates,
            config.cov_kind,
            seed=derive_rng(seed, STAGE_GMM, c).integers(2**63),
            restarts=config.gmm_restarts,
            max_iters=config.gmm_max_iters,
            tol=config.gmm_tol,
        )
        k_map.append(k)
        traces.append(trace)
    return k_map, traces


def assign_k_all_classes(
    data: EmbeddingSet,
    config,
    strategy: str = "bic",
    seed: int | None = None,
    k: int | None = None,
    k_range: tuple[int, int] | None = None,
) -> KSelectionReport:
    """Assign a prototype count to every class.

    Strategies: ``bic``; ``fixed`` (needs ``k``); ``random-uniform`` (needs
    ``k_range``, inclusive); ``dirichlet-noise``; ``shuffle-of-bic``.
    """
    seed = config.seed if seed is None else seed
    C = data.class_count
    params: dict = {}
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    traces = [[] for _ in range(C)]
    rng = derive_rng(seed, STAGE_STRATEGY)

    if strategy == "fixed":
        if k is None or k < 1:
            raise ConfigError("fixed strategy needs k >= 1")
        k_map = [int(k)] * C
        params["k"] = int(k)
    elif strategy == "random-uniform":
        if k_range is None:
            k_range = (min(config.k_candidates), max(config.k_candidates))
        lo, hi = int(k_range[0]), int(k_range[1])
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid range {k_range}")
        k_map = [int(v) for v in rng.integers(lo, hi + 1, size=C)]
        params["range"] = [lo, hi]
    else:
        k_map, traces = _bic_counts(data, config, seed)
        params["bic_k_map"] = list(k_map)
        if strategy == "shuffle-of-bic":
            k_map = _shuffle_non_identity(k_map, rng)
        elif strategy == "dirichlet-noise":
            counts = np.asarray(k_map, dtype=float)
            shares = rng.dirichlet(counts)
            total = int(counts.sum())
            k_map = [int(v) for v in np.maximum(_largest_remainder(shares, total), 1)]

    return KSelectionReport(
        strategy=strategy,
        k_map=k_map,
        traces=traces,
        seed=seed,
        cov_kind=config.cov_kind,
        normalized=data.normalized,
        params=params,
    )


def _shuffle_non_identity(k_map, rng, max_tries: int = 1000):
    values = np.asarray(k_map)
    if len(set(k_map)) < 2:
        return list(k_map)
    for _ in range(max_tries):
        perm = values[rng.permutation(values.size)]
        if np.any(perm != values):
            return [int(v) for v in perm]
    raise NumericalError("could not draw a value-changing permutation")  # pragma: no cover
