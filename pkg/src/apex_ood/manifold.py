"""The adaptive prototype manifold and its gradient-free EMA updates."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, load_binary, save_binary
from .errors import ConfigError, InfeasibleError, LoadError, NumericalError
from .gmm import kmeans_plusplus
from .seeding import STAGE_INIT, derive_rng

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class PrototypeManifold:
    """Per-class unit-norm prototypes plus EMA cohesion/separation state.

    The vMF density normalizer C_D(kappa) cancels in the class posterior
    and is never evaluated; only ``kappa = 1 / tau`` is kept.
    """

    prototypes: tuple  # tuple[np.ndarray (K_c, D)]
    q_c_ema: tuple  # tuple[np.ndarray (K_c,)]
    q_s_ema: tuple
    tau: float = 0.1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        protos = tuple(np.array(p, dtype=np.float64, ndmin=2) for p in self.prototypes)
        qc = tuple(np.array(q, dtype=np.float64).reshape(-1) for q in self.q_c_ema)
        qs = tuple(np.array(q, dtype=np.float64).reshape(-1) for q in self.q_s_ema)
        if not protos:
            raise ConfigError("a manifold needs at least one class")
        d = protos[0].shape[1]
        for c, (p, a, b) in enumerate(zip(protos, qc, qs, strict=True)):
            if p.shape[1] != d or p.shape[0] < 1:
                raise ConfigError(f"class {c}: bad prototype matrix shape {p.shape}")
            if a.shape != (p.shape[0],) or b.shape != (p.shape[0],):
                raise ConfigError(f"class {c}: quality state does not match K_c")
            for arr in (p, a, b):
                arr.flags.writeable = False
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "q_c_ema", qc)
        object.__setattr__(self, "q_s_ema", qs)

    @property
    def class_count(self) -> int:
        return len(self.prototypes)

    @property
    def dim(self) -> int:
        return self.prototypes[0].shape[1]

    @property
    def k_map(self) -> list[int]:
        return [p.shape[0] for p in self.prototypes]

    @property
    def total(self) -> int:
        """M, the total number of prototypes."""
        return int(sum(self.k_map))

    @property
    def kappa(self) -> float:
        return 1.0 / self.tau

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All prototypes as one (M, D) matrix plus their class labels."""
        labels = np.concatenate([np.full(k, c) for c, k in enumerate(self.k_map)])
        return np.vstack(self.prototypes), labels

    def quality(self) -> tuple:
        """EMA quality Q = Q_C + Q_S per class."""
        return tuple(a + b for a, b in zip(self.q_c_ema, self.q_s_ema))

    def max_norm_error(self) -> float:
        return float(max(np.max(np.abs(np.linalg.norm(p, axis=1) - 1.0)) for p in self.prototypes))

    def _replace_class(self, c, protos=None, qc=None, qs=None) -> "PrototypeManifold":
        P, A, B = list(self.prototypes), list(self.q_c_ema), list(self.q_s_ema)
        if protos is not None:
            P[c] = protos
        if qc is not None:
            A[c] = qc
        if qs is not None:
            B[c] = qs
        return PrototypeManifold(tuple(P), tuple(A), tuple(B), self.tau, dict(self.meta))


def from_prototypes(prototypes, tau: float = 0.1) -> PrototypeManifold:
    """Build a manifold from per-class prototype matrices with zero quality state."""
    protos = [np.array(p, dtype=np.float64, ndmin=2) for p in prototypes]
    zeros = tuple(np.zeros(p.shape[0]) for p in protos)
    return PrototypeManifold(tuple(protos), zeros, zeros, tau)


def init_prototypes(
    data: EmbeddingSet,
    k_map,
    strategy: str = "kmeans++",
    seed: int = 0,
    tau: float = 0.1,
) -> PrototypeManifold:
    k_map = [int(k) for k in k_map]
    if len(k_map) != data.class_count:
        raise ConfigError(f"k_map has {len(k_map)} entries for {data.class_count} classes")
    protos = []
    for c, k in enumerate(k_map):
        rng = derive_rng(seed, STAGE_INIT, c)
        if strategy == "kmeans++":
            x = data.class_features(c)
            if x.shape[0] < k:
                raise InfeasibleError(
                    f"class {c} has {x.shape[0]} samples, fewer than K_c = {k}"
                )
            if not data.normalized:
                x = x / np.linalg.norm(x, axis=1, keepdims=True)
            p = x[kmeans_plusplus(x, k, rng)]
        elif strategy == "random-unit":
            g = rng.standard_normal((k, data.dim))
            p = g / np.linalg.norm(g, axis=1, keepdims=True)
        else:
            raise ConfigError(f"unknown init strategy {strategy!r}")
        protos.append(p)
    return from_prototypes(protos, tau)


def ema_update_prototypes(
    manifold: PrototypeManifold,
    c: int,
    batch: np.ndarray,
    weights,
    beta_p: float,
) -> PrototypeManifold:
    """p_k <- normalize((1 - beta_p) p_k + beta_p * sum_i w_ik z_i).

    ``weights`` is a K_c x B array or an ``AssignmentMatrix``.
    """
    w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    z = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    p = manifold.prototypes[c]
    if w.shape != (p.shape[0], z.shape[0]):
        raise ConfigError(f"weights shape {w.shape} != ({p.shape[0]}, {z.shape[0]})")
    if beta_p == 0.0:
        return manifold
    blended = (1.0 - beta_p) * p + beta_p * (w @ z)
    norms = np.linalg.norm(blended, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericalError(f"class {c}: blended prototype has zero norm")
    return manifold._replace_class(c, protos=blended / norms)


def ema_update_quality(
    manifold: PrototypeManifold,
    c: int,
    fresh_qc,
    fresh_qs,
    beta_q: float,
) -> PrototypeManifold:
    fresh_qc = np.asarray(fresh_qc, dtype=np.float64).reshape(-1)
    fresh_qs = np.asarray(fresh_qs, dtype=np.float64).reshape(-1)
    k = manifold.k_map[c]
    if fresh_qc.shape != (k,) or fresh_qs.shape != (k,):
        raise ConfigError(f"class {c}: fresh quality must have {k} entries")
    if not (np.isfinite(fresh_qc).all() and np.isfinite(fresh_qs).all()):
        raise ConfigError("fresh quality values must be finite")
    qc = (1.0 - beta_q) * manifold.q_c_ema[c] + beta_q * fresh_qc
    qs = (1.0 - beta_q) * manifold.q_s_ema[c] + beta_q * fresh_qs
    return manifold._replace_class(c, qc=qc, qs=qs)


# --------------------------------------------------------------------------
# checkpoint: <stem>.json + <stem>.prototypes.bin + <stem>.quality.bin


def save_manifold(manifold: PrototypeManifold, path, config: dict | None = None, seed: int | None = None):
    path = Path(path)
    stem = path.with_suffix("")
    protos, labels = manifold.stacked()
    quality = np.column_stack([np.concatenate(manifold.q_c_ema), np.concatenate(manifold.q_s_ema)])
    proto_file = stem.with_name(stem.name + ".prototypes.bin")
    quality_file = stem.with_name(stem.name + ".quality.bin")
    C = manifold.class_count
    save_binary(EmbeddingSet(protos, labels, C), proto_file)
    save_binary(EmbeddingSet(quality, labels, C), quality_file)
    meta = {
        **manifold.meta,
        "k_map": manifold.k_map,
        "tau": manifold.tau,
        "dimension": manifold.dim,
        "seed": seed,
        "config": config or {},
        "prototypes_file": proto_file.name,
        "quality_file": quality_file.name,
        # exact float64 copies; the binary files hold the float32 layout
        "prototypes": [p.tolist() for p in manifold.prototypes],
        "q_c_ema": [q.tolist() for q in manifold.q_c_ema],
        "q_s_ema": [q.tolist() for q in manifold.q_s_ema],
    }
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_manifold(path) -> PrototypeManifold:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"manifold checkpoint not found: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed manifold JSON at line {exc.lineno}") from None
    k_map = meta["k_map"]
    exact = ("prototypes", "q_c_ema", "q_s_ema")
    extra = {k: v for k, v in meta.items() if k not in ("prototypes_file", "quality_file") + exact}
    if all(k in meta for k in exact):
        P = [np.asarray(p, dtype=np.float64) for p in meta["prototypes"]]
        if [p.shape[0] for p in P] != list(k_map):
            raise LoadError("checkpoint prototype counts do not match k_map")
        return PrototypeManifold(tuple(P), tuple(meta["q_c_ema"]), tuple(meta["q_s_ema"]),
                                 float(meta["tau"]), extra)
    protos = load_binary(path.parent / meta["prototypes_file"])
    quality = load_binary(path.parent / meta["quality_file"])
    P, A, B = [], [], []
    for c in range(len(k_map)):
        sel = protos.labels == c
        if sel.sum() != k_map[c]:
            raise LoadError(f"class {c}: checkpoint holds {sel.sum()} prototypes, expected {k_map[c]}")
        p = protos.features[sel]
        P.append(p / np.linalg.norm(p, axis=1, keepdims=True))
        A.append(quality.features[sel, 0])
        B.append(quality.features[sel, 1])
    return PrototypeManifold(tuple(P), tuple(A), tuple(B), float(meta["tau"]), extra)
