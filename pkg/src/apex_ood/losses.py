"""vMF-mixture class posterior, training losses, gradients, and a toy trainer.

Weights are passed as one array per class, shaped (N, K_c): row ``i`` holds
sample ``i``'s mixture weights over the prototypes of that class. Rows must
be non-negative and sum to one. For the sample's own class these come from
Sinkhorn; for every other class the trainer uses uniform ``1 / K_c``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._math import logsumexp, softmax
from .assignment import batch_class_weights
from .config import RunConfig
from .embeddings import EmbeddingSet
from .errors import ConfigError, NumericalError
from .manifold import PrototypeManifold, ema_update_prototypes, ema_update_quality, init_prototypes
from .quality import class_cohesion, separation
from .seeding import STAGE_TRAIN, derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    l_mle: float
    l_pc: float
    l_total: float
    lam: float


@dataclass(frozen=True)
class ClassPosterior:
    probs: np.ndarray
    logits: np.ndarray


def uniform_weights(n: int, manifold: PrototypeManifold) -> list[np.ndarray]:
    return [np.full((n, k), 1.0 / k) for k in manifold.k_map]


def posterior_weights(labels, manifold: PrototypeManifold, true_weights: dict) -> list[np.ndarray]:
    """Per-class (N, K_c) weights: uniform, except each sample's own class.

    ``true_weights`` maps class ``c`` to a (K_c, n_c) matrix whose columns
    follow the order of the class-``c`` samples in ``labels``.
    """
    labels = np.asarray(labels)
    out = uniform_weights(labels.size, manifold)
    for c, w in true_weights.items():
        w = np.asarray(getattr(w, "weights", w))
        out[c][labels == c] = w.T
    return out


def _check_weights(weights, manifold, n):
    if len(weights) != manifold.class_count:
        raise ConfigError(f"expected weights for {manifold.class_count} classes, got {len(weights)}")
    for c, (w, k) in enumerate(zip(weights, manifold.k_map)):
        if np.shape(w) != (n, k):
            raise ConfigError(f"class {c}: weight shape {np.shape(w)} != ({n}, {k})")


def _mixture_terms(z, manifold, weights, tau):
    """Per-class log-numerators and within-class responsibilities."""
    logits = np.empty((z.shape[0], manifold.class_count))
    resp = []
    for c, (p, w) in enumerate(zip(manifold.prototypes, weights)):
        with np.errstate(divide="ignore"):
            a = np.log(w) + (z @ p.T) / tau
        lse = logsumexp(a, axis=1)
        logits[:, c] = lse
        resp.append(np.exp(a - lse[:, None]))
    return logits, resp


def posterior_logits(z, manifold: PrototypeManifold, weights, tau: float) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    _check_weights(weights, manifold, z.shape[0])
    return _mixture_terms(z, manifold, weights, tau)[0]


def class_posterior(z, manifold: PrototypeManifold, weights_by_class, tau: float) -> ClassPosterior:
    """P(c | z) for a single embedding; ``weights_by_class[c]`` has length K_c."""
    weights = [np.asarray(w, dtype=np.float64).reshape(1, -1) for w in weights_by_class]
    logits = posterior_logits(z, manifold, weights, tau)[0]
    return ClassPosterior(softmax(logits), logits)


def _per_sample_nll(z, labels, manifold, weights, tau):
    logits = posterior_logits(z, manifold, weights, tau)
    log_post = logits - logsumexp(logits, axis=1)[:, None]
    own = log_post[np.arange(z.shape[0]), labels]
    if not np.isfinite(own).all():
        bad = int(np.flatnonzero(~np.isfinite(own))[0])
        raise NumericalError(f"true-class posterior underflowed to zero for sample {bad}")
    return -own


def mle_loss(batch: EmbeddingSet, manifold: PrototypeManifold, weights, tau: float) -> float:
    """Average negative log posterior of each sample's true class."""
    return float(np.mean(_per_sample_nll(batch.features, batch.labels, manifold, weights, tau)))


def pc_loss(manifold: PrototypeManifold, tau_p: float) -> float:
    """Prototype contrastive loss.

    A class with a single prototype has no intra-class pair; its intra term
    is taken as exp(1 / tau_p), the self-similarity at cosine one.
    """
    if manifold.class_count < 2:
        raise ConfigError("prototype contrastive loss needs at least two classes")
    protos, labels = manifold.stacked()
    sim = (protos @ protos.T) / tau_p
    total = 0.0
    for i in range(protos.shape[0]):
        same = labels == labels[i]
        same[i] = False
        log_d = logsumexp(sim[i, same]) if same.any() else 1.0 / tau_p
        log_z = logsumexp(sim[i, labels != labels[i]])
        total += log_d - log_z
    return -total / protos.shape[0]


def total_loss(batch: EmbeddingSet, manifold: PrototypeManifold, weights, config: RunConfig) -> LossBreakdown:
    l_mle = mle_loss(batch, manifold, weights, config.tau)
    l_pc = pc_loss(manifold, config.tau_p) if manifold.class_count > 1 else 0.0
    return LossBreakdown(l_mle, l_pc, l_mle + config.lambda_pc * l_pc, config.lambda_pc)


def mle_gradient(batch: EmbeddingSet, manifold: PrototypeManifold, weights, tau: float) -> np.ndarray:
    """d L_MLE / d z_i with weights and prototypes held constant.

    With r^c the within-class responsibilities and P the class posterior,
    the gradient is -(g_{y_i} - sum_c P_c g_c) / (N tau) where
    g_c = sum_k r^c_k p^c_k.
    """
    z = batch.features
    n = z.shape[0]
    _check_weights(weights, manifold, n)
    logits, resp = _mixture_terms(z, manifold, weights, tau)
    post = softmax(logits, axis=1)
    pulls = np.stack([r @ p for r, p in zip(resp, manifold.prototypes)], axis=1)  # (N, C, D)
    own = pulls[np.arange(n), batch.labels]
    expected = np.einsum("nc,ncd->nd", post, pulls)
    return -(own - expected) / (n * tau)


# --------------------------------------------------------------------------
# toy trainer


@dataclass
class TrainResult:
    manifold: PrototypeManifold
    trace: list = field(default_factory=list)
    embeddings: EmbeddingSet | None = None


def _batch_step(z, y, manifold, config):
    """One optimization step on a batch. Returns (breakdown, new z, manifold)."""
    true_w = {}
    for c in np.unique(y):
        am = batch_class_weights(
            z[y == c],
            manifold.prototypes[c],
            config.epsilon_ot,
            max_iters=config.sinkhorn_iters,
            tol=config.sinkhorn_tol,
        )
        true_w[int(c)] = am.weights
    weights = posterior_weights(y, manifold, true_w)
    batch = EmbeddingSet(z, y, manifold.class_count)
    breakdown = total_loss(batch, manifold, weights, config)
    if not np.isfinite(breakdown.l_total):
        raise NumericalError("non-finite loss")

    if config.lr > 0:
        g = mle_gradient(batch, manifold, weights, config.tau)
        g -= np.sum(g * z, axis=1, keepdims=True) * z  # tangent-space projection
        z_new = z - config.lr * g
        z_new /= np.linalg.norm(z_new, axis=1, keepdims=True)
    else:
        z_new = z

    for c, w in true_w.items():
        manifold = ema_update_prototypes(manifold, c, z[y == c], w, config.beta_p)
    if manifold.class_count > 1:
        for c in true_w:
            qc = class_cohesion(z[y == c], manifold.prototypes[c])
            qs = separation(manifold, c)
            manifold = ema_update_quality(
                manifold, c, np.nan_to_num(qc, nan=0.0), qs, config.quality_momentum
            )
    return breakdown, z_new, manifold


def toy_train(
    data: EmbeddingSet,
    k_map,
    config: RunConfig,
    manifold: PrototypeManifold | None = None,
) -> TrainResult:
    """Optimize embeddings directly by projected gradient descent on L_Train.

    Each step computes per-class Sinkhorn weights, takes a tangent-space
    gradient step on every embedding followed by renormalization, then EMA
    updates prototypes and quality state. ``k_map`` may be a list or a
    ``KSelectionReport``.
    """
    if not data.normalized:
        raise ConfigError("toy_train needs unit-norm embeddings; normalize first")
    k_map = list(getattr(k_map, "k_map", k_map))
    if manifold is None:
        manifold = init_prototypes(data, k_map, config.init_strategy, config.seed, config.tau)
    z = np.array(data.features)
    y = data.labels
    n = z.shape[0]
    trace = []
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, STAGE_TRAIN, epoch).permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                bd, z_new, manifold = _batch_step(z[idx], y[idx], manifold, config)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {start // config.batch_size}: {exc}") from None
            z[idx] = z_new
            sums += idx.size * np.array([bd.l_mle, bd.l_pc, bd.l_total])
        mle, pc, tot = sums / n
        trace.append(LossBreakdown(float(mle), float(pc), float(tot), config.lambda_pc))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.debug("epoch %d  l_mle=%.5f  l_pc=%.5f  l_total=%.5f", epoch, mle, pc, tot)
    return TrainResult(manifold, trace, data.with_features(z))


def save_trace(trace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "l_mle", "l_pc", "l_total"])
        for e, bd in enumerate(trace):
            writer.writerow([e, repr(bd.l_mle), repr(bd.l_pc), repr(bd.l_total)])
