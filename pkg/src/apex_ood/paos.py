"""Posterior-aware OOD scoring.

Prototype qualities are turned into a per-class confidence (a temperature
scaled log-sum-exp, i.e. the negative free energy of a Gibbs distribution
over the class's prototypes). The confidence shrinks each class's
Mahalanobis distance before the minimum over classes is taken. Lower scores
mean more in-distribution.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._math import logsumexp, softmax
from .embeddings import EmbeddingSet, load_binary, save_binary
from .errors import ConfigError, LoadError, NumericalError

MIN_DENOMINATOR = 0.1


def prototype_energy(q: float) -> float:
    return -q


def gibbs_weights(qualities, tau_q: float = 1.0) -> np.ndarray:
    q = np.asarray(qualities, dtype=np.float64)
    if q.size < 1 or not tau_q > 0:
        raise ConfigError("need at least one quality and tau_q > 0")
    return softmax(-prototype_energy(q) / tau_q)


def class_confidence(qualities, tau_q: float = 1.0) -> float:
    """tau_q * log sum_k exp(Q_k / tau_q)."""
    q = np.asarray(qualities, dtype=np.float64)
    if q.size < 1 or not tau_q > 0:
        raise ConfigError("need at least one quality and tau_q > 0")
    return float(tau_q * logsumexp(q / tau_q))


@dataclass(frozen=True)
class PaosStats:
    means: np.ndarray
    precision: np.ndarray
    conf: np.ndarray
    alpha: float = 0.5
    tau_q: float = 1.0
    shrinkage: float = 1e-3
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64, ndmin=2)
        prec = np.array(self.precision, dtype=np.float64)
        conf = np.array(self.conf, dtype=np.float64).reshape(-1)
        if prec.shape != (means.shape[1], means.shape[1]):
            raise ConfigError("precision shape does not match the mean dimension")
        if conf.shape != (means.shape[0],):
            raise ConfigError("need one confidence per class")
        if not np.isfinite(conf).all():
            raise ConfigError("confidences must be finite")
        for a in (means, prec, conf):
            a.flags.writeable = False
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "conf", conf)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def class_count(self) -> int:
        return self.means.shape[0]

    def denominators(self) -> np.ndarray:
        """1 + alpha * Conf(c), clamped below at ``MIN_DENOMINATOR``."""
        return np.maximum(1.0 + self.alpha * self.conf, MIN_DENOMINATOR)

    def with_alpha(self, alpha: float) -> "PaosStats":
        return PaosStats(self.means, self.precision, self.conf, alpha, self.tau_q, self.shrinkage)


def confidences_from_quality(per_class_quality, tau_q: float = 1.0) -> np.ndarray:
    return np.array([class_confidence(q, tau_q) for q in per_class_quality])


def fit_gaussian_stats(
    data: EmbeddingSet,
    conf,
    alpha: float = 0.5,
    tau_q: float = 1.0,
    shrinkage: float = 1e-3,
    floor: float = 1e-8,
) -> PaosStats:
    """Class means and the shared precision of the pooled within-class covariance.

    The covariance is ``S + shrinkage * trace(S) / D * I + floor * I`` with
    ``S`` the pooled (biased, divide-by-N) within-class scatter.
    """
    x = data.features
    n, d = x.shape
    counts = data.class_counts()
    if np.any(counts == 0):
        raise ConfigError(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")
    means = np.vstack([x[data.labels == c].mean(axis=0) for c in range(data.class_count)])
    centered = x - means[data.labels]
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    reg = cov + (shrinkage * np.trace(cov) / d + floor) * np.eye(d)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "pooled covariance is not invertible; increase the shrinkage or floor"
        ) from None
    inv_chol = np.linalg.solve(chol, np.eye(d))
    precision = inv_chol.T @ inv_chol
    precision = 0.5 * (precision + precision.T)
    if not np.isfinite(precision).all():
        raise NumericalError("precision is not finite; increase the shrinkage or floor")

    conf = np.asarray(conf, dtype=np.float64)
    notes = []
    low = 1.0 + alpha * conf < MIN_DENOMINATOR
    if low.any():
        msg = f"calibration denominators clamped to {MIN_DENOMINATOR} for classes {np.flatnonzero(low).tolist()}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return PaosStats(means, precision, conf, alpha, tau_q, shrinkage, tuple(notes))


def mahalanobis(h, mu, precision) -> float:
    diff = np.asarray(h, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return float(max(diff @ np.asarray(precision) @ diff, 0.0))


def class_distances(h: np.ndarray, stats: PaosStats) -> np.ndarray:
    """(N, C) squared Mahalanobis distances to every class mean."""
    h = np.asarray(h, dtype=np.float64).reshape(-1, stats.dim)
    diff = h[:, None, :] - stats.means[None, :, :]
    d = np.einsum("ncd,de,nce->nc", diff, stats.precision, diff)
    return np.maximum(d, 0.0)


def _score_rows(h: np.ndarray, stats: PaosStats):
    calibrated = class_distances(h, stats) / stats.denominators()[None, :]
    arg = np.argmin(calibrated, axis=1)
    return calibrated[np.arange(h.shape[0]), arg], arg


def paos_score(h, stats: PaosStats) -> tuple[float, int]:
    """``(score, argmin class)`` for one feature vector."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (stats.dim,):
        raise ConfigError(f"feature dimension {h.shape} != ({stats.dim},)")
    s, c = _score_rows(h[None, :], stats)
    return float(s[0]), int(c[0])


def score_batch(features, stats: PaosStats) -> tuple[np.ndarray, np.ndarray]:
    """Scores and argmin classes for every row; accepts an array or EmbeddingSet."""
    h = getattr(features, "features", features)
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        return np.empty(0), np.empty(0, dtype=int)
    if h.ndim != 2 or h.shape[1] != stats.dim:
        raise ConfigError(f"feature dimension {h.shape[-1]} != {stats.dim}")
    return _score_rows(h, stats)


def min_mahalanobis(features, stats: PaosStats) -> np.ndarray:
    """Uncalibrated minimum class Mahalanobis distance."""
    h = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if h.size == 0:
        return np.empty(0)
    return class_distances(h, stats).min(axis=1)


# --------------------------------------------------------------------------
# checkpoint: <stem>.json + <stem>.means.bin + <stem>.precision.bin


def save_stats(stats: PaosStats, path, extra: dict | None = None):
    path = Path(path)
    stem = path.with_suffix("")
    means_file = stem.with_name(stem.name + ".means.bin")
    prec_file = stem.with_name(stem.name + ".precision.bin")
    C, d = stats.means.shape
    save_binary(EmbeddingSet(stats.means, np.arange(C), C), means_file)
    save_binary(EmbeddingSet(stats.precision, np.zeros(d, dtype=int), 1), prec_file)
    meta = {
        "alpha": stats.alpha,
        "tau_q": stats.tau_q,
        "shrinkage": stats.shrinkage,
        "conf": [float(v) for v in stats.conf],
        # exact float64 copies; the binary files hold the float32 layout
        "means": stats.means.tolist(),
        "precision": stats.precision.tolist(),
        "dimension": d,
        "class_count": C,
        "means_file": means_file.name,
        "precision_file": prec_file.name,
        "warnings": list(stats.warnings),
        **(extra or {}),
    }
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_stats(path) -> PaosStats:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"stats checkpoint not found: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed stats JSON at line {exc.lineno}") from None
    if "means" in meta and "precision" in meta:
        means = np.asarray(meta["means"], dtype=np.float64)
        prec = np.asarray(meta["precision"], dtype=np.float64)
    else:
        means = load_binary(path.parent / meta["means_file"]).features
        prec = load_binary(path.parent / meta["precision_file"]).features
        prec = 0.5 * (prec + prec.T)
    return PaosStats(means, prec, meta["conf"], meta["alpha"], meta["tau_q"], meta["shrinkage"])
