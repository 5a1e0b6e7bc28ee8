"""Prototype cohesion, separation, and inter-class collision analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ConfigError
from .manifold import PrototypeManifold

DEFAULT_COLLISION_THRESHOLD = 1e-2


def hard_assign(data: EmbeddingSet, manifold: PrototypeManifold) -> list[list[np.ndarray]]:
    """Index lists S_k^c: each sample goes to its own-class prototype of maximal cosine.

    ``np.argmax`` returns the first maximum, so ties go to the smaller index.
    """
    out = []
    for c, p in enumerate(manifold.prototypes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            out.append([np.empty(0, dtype=int) for _ in range(p.shape[0])])
            continue
        best = np.argmax(data.features[idx] @ p.T, axis=1)
        out.append([idx[best == k] for k in range(p.shape[0])])
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return (a @ b.T) / np.outer(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - cos as half the squared distance of the unit rows; no cancellation near 0."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return 0.5 * ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def cohesion(prototype, assigned) -> float | None:
    """Mean cosine between a prototype and its assigned samples; None when empty."""
    z = np.asarray(assigned, dtype=np.float64)
    if z.size == 0:
        return None
    return float(np.mean(_cosine(z, prototype)))


def separation(manifold: PrototypeManifold, c: int, k: int | None = None):
    """1 - max cosine to any other-class prototype.

    Returns a scalar for a single prototype ``k`` or a (K_c,) array when ``k``
    is omitted.
    """
    if manifold.class_count < 2:
        raise ConfigError("separation is undefined for a single-class manifold")
    others = np.vstack([p for j, p in enumerate(manifold.prototypes) if j != c])
    mine = manifold.prototypes[c] if k is None else manifold.prototypes[c][k]
    sep = np.min(_cosine_distance(mine, others), axis=1)
    return sep if k is None else float(sep[0])


def quality(q_c: float, q_s: float) -> float:
    return q_c + q_s


def class_cohesion(features: np.ndarray, prototypes: np.ndarray, soft_weights=None):
    """Cohesion of every prototype of one class.

    Hard mode (default) uses max-cosine sets; empty sets give NaN. With
    ``soft_weights`` (K x B, columns summing to one) the cohesion is the
    weight-averaged cosine instead.
    """
    z = np.atleast_2d(features)
    if z.shape[0] == 0:
        return np.full(prototypes.shape[0], np.nan)
    cos = _cosine(prototypes, z)
    if soft_weights is not None:
        w = np.asarray(soft_weights)
        mass = w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(mass > 0, (w * cos).sum(axis=1) / mass, np.nan)
    best = np.argmax(cos, axis=0)
    out = np.full(prototypes.shape[0], np.nan)
    for k in range(prototypes.shape[0]):
        sel = best == k
        if sel.any():
            out[k] = cos[k, sel].mean()
    return out


@dataclass
class PrototypeQuality:
    cls: int
    index: int
    q_c: float | None
    q_s: float
    q: float


@dataclass
class QualityReport:
    rows: list
    min_q_s: float
    colliding_pairs: list
    collision_threshold: float
    pct_colliding: float
    total_prototypes: int

    @property
    def n_colliding(self) -> int:
        return len(self.colliding_pairs)

    def per_class_quality(self) -> list[np.ndarray]:
        C = 1 + max(r.cls for r in self.rows)
        out = [[] for _ in range(C)]
        for r in self.rows:
            out[r.cls].append(r.q)
        return [np.asarray(v) for v in out]

    def to_dict(self) -> dict:
        return {
            "collision_threshold": self.collision_threshold,
            "colliding_count": self.n_colliding,
            "min_q_s": self.min_q_s,
            "pct_colliding": self.pct_colliding,
            "total_prototypes": self.total_prototypes,
            "colliding_pairs": [
                {"a": [int(a[0]), int(a[1])], "b": [int(b[0]), int(b[1])], "distance": float(dist)}
                for a, b, dist in self.colliding_pairs
            ],
            "prototypes": [
                {"class": r.cls, "index": r.index, "q_c": r.q_c, "q_s": r.q_s, "q": r.q}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self) -> str:
        return (
            f"colliding pairs: {self.n_colliding}  "
            f"min Q_S: {self.min_q_s:.3f}  "
            f"% of total: {self.pct_colliding:.2f}"
        )


def collision_report(
    manifold: PrototypeManifold,
    data: EmbeddingSet,
    threshold: float = DEFAULT_COLLISION_THRESHOLD,
) -> QualityReport:
    """Per-prototype Q_C, Q_S, Q and all cross-class pairs closer than ``threshold``.

    Pairs are reported once, ordered so the lower (class, index) comes first.
    A prototype with an empty assigned set gets ``q_c = None`` and contributes
    zero cohesion to ``q``.
    """
    if manifold.class_count < 2:
        raise ConfigError("separation is undefined for a single-class manifold")
    sets = hard_assign(data, manifold)
    rows = []
    for c, p in enumerate(manifold.prototypes):
        seps = separation(manifold, c)
        for k in range(p.shape[0]):
            qc = cohesion(p[k], data.features[sets[c][k]])
            qs = float(seps[k])
            rows.append(PrototypeQuality(c, k, qc, qs, quality(0.0 if qc is None else qc, qs)))

    protos, labels = manifold.stacked()
    local = np.concatenate([np.arange(k) for k in manifold.k_map])
    dist = _cosine_distance(protos, protos)
    pairs = []
    involved = set()
    ii, jj = np.nonzero(np.triu(dist < threshold, k=1) & (labels[:, None] != labels[None, :]))
    for i, j in zip(ii, jj):
        a = (int(labels[i]), int(local[i]))
        b = (int(labels[j]), int(local[j]))
        pairs.append((a, b, float(dist[i, j])))
        involved.update((a, b))
    m = manifold.total
    return QualityReport(
        rows=rows,
        min_q_s=float(min(r.q_s for r in rows)),
        colliding_pairs=pairs,
        collision_threshold=float(threshold),
        pct_colliding=100.0 * len(involved) / m,
        total_prototypes=m,
    )
