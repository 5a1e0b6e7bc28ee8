"""Seeded synthetic benchmarks on the unit hypersphere.

ID classes are mixtures of von Mises-Fisher components; OOD sets are vMF
components or uniform-sphere draws (``kappa = 0``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet
from .errors import ConfigError, LoadError
from .seeding import STAGE_SYNTH, derive_rng

TRAIN_FRACTION = 0.8


def sample_vmf(mean, kappa: float, n: int, seed=0) -> np.ndarray:
    """Draw ``n`` samples from vMF(mean, kappa) with Wood's rejection scheme.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    mu = np.asarray(mean, dtype=np.float64)
    if mu.ndim != 1 or mu.size < 2:
        raise ConfigError("mean must be a vector of dimension >= 2")
    if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
        raise ConfigError(f"mean direction must be unit-norm, got norm {np.linalg.norm(mu)}")
    if kappa < 0:
        raise ConfigError("kappa must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = mu.size
    if kappa == 0:
        g = rng.standard_normal((n, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    m = d - 1
    b = m / (2.0 * kappa + math.sqrt(4.0 * kappa**2 + m**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * math.log(1.0 - x0**2)
    w = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        z = rng.beta(m / 2.0, m / 2.0, size=need)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=need)
        ok = kappa * cand + m * np.log(1.0 - x0 * cand) - c >= np.log(u)
        take = cand[ok]
        w[filled:filled + take.size] = take
        filled += take.size

    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = w[:, None] * mu[None, :] + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return out / np.linalg.norm(out, axis=1, keepdims=True)


@dataclass
class Component:
    mean: np.ndarray | None
    kappa: float
    n: int

    def __post_init__(self):
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0")
        if self.n < 1:
            raise ConfigError("component sample count must be >= 1")
        if self.mean is not None:
            self.mean = np.asarray(self.mean, dtype=np.float64)
            if abs(np.linalg.norm(self.mean) - 1.0) > 1e-9:
                raise ConfigError("component mean directions must be unit-norm")
        elif self.kappa != 0:
            raise ConfigError("a component without a mean must have kappa = 0")


@dataclass
class BenchmarkSpec:
    dimension: int
    classes: list  # list[list[Component]]
    ood_specs: dict = field(default_factory=dict)  # name -> list[Component]
    seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.dimension < 2:
            raise ConfigError("dimension must be >= 2")
        if not self.classes:
            raise ConfigError("at least one class is required")
        for comps in list(self.classes) + list(self.ood_specs.values()):
            if not comps:
                raise ConfigError("every class / OOD set needs at least one component")
            for comp in comps:
                if comp.mean is not None and comp.mean.size != self.dimension:
                    raise ConfigError("component mean has the wrong dimension")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchmarkSpec":
        if data.get("preset") == "hetero2":
            return hetero2_spec(seed=int(data.get("seed", 0)))

        def comp(c):
            return Component(c.get("mean"), float(c.get("kappa", 0.0)), int(c["n"]))

        try:
            return cls(
                dimension=int(data["dimension"]),
                classes=[[comp(c) for c in cls_["components"]] for cls_ in data["classes"]],
                ood_specs={
                    name: [comp(c) for c in comps] for name, comps in data.get("ood", {}).items()
                },
                seed=int(data.get("seed", 0)),
                name=str(data.get("name", "custom")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid benchmark spec: missing or bad field {exc}") from None

    def to_dict(self) -> dict:
        def comp(c):
            return {
                "mean": None if c.mean is None else [float(v) for v in c.mean],
                "kappa": c.kappa,
                "n": c.n,
            }

        return {
            "name": self.name,
            "dimension": self.dimension,
            "seed": self.seed,
            "classes": [{"components": [comp(c) for c in comps]} for comps in self.classes],
            "ood": {name: [comp(c) for c in comps] for name, comps in self.ood_specs.items()},
        }


def load_spec(path) -> BenchmarkSpec:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"spec not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed spec JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return BenchmarkSpec.from_dict(data)


def hetero2_spec(seed: int = 0, n_per_component: int = 300, dimension: int = 16) -> BenchmarkSpec:
    """The default two-class heterogeneous benchmark.

    Class 0 is a single vMF component; class 1 has three components whose
    mean directions are mutually orthogonal. All four directions are the
    columns of a seeded random rotation. Near-OOD sits between the two class
    mean directions; far-OOD is uniform on the sphere.
    """
    rng = derive_rng(seed, STAGE_SYNTH, 0)
    q, r = np.linalg.qr(rng.standard_normal((dimension, dimension)))
    q = q * np.sign(np.diag(r))[None, :]
    dirs = q.T[:4]
    class_a = [Component(dirs[0], 50.0, n_per_component)]
    class_b = [Component(dirs[j], 50.0, n_per_component) for j in (1, 2, 3)]
    mean_a = dirs[0]
    mean_b = dirs[1:].sum(axis=0)
    mean_b /= np.linalg.norm(mean_b)
    near = mean_a + mean_b
    near /= np.linalg.norm(near)
    ood_n = n_per_component
    return BenchmarkSpec(
        dimension=dimension,
        classes=[class_a, class_b],
        ood_specs={
            "near": [Component(near, 20.0, ood_n)],
            "far": [Component(None, 0.0, ood_n)],
        },
        seed=seed,
        name="hetero2",
    )


@dataclass
class Benchmark:
    id_train: EmbeddingSet
    id_test: EmbeddingSet
    ood_sets: dict
    truth: dict


def generate(spec: BenchmarkSpec) -> Benchmark:
    """Sample the benchmark; each ID component is split 80/20 into train/test."""
    d = spec.dimension
    tr_x, tr_y, te_x, te_y = [], [], [], []
    stream = 0
    for label, comps in enumerate(spec.classes):
        for comp in comps:
            if comp.n < 2:
                raise ConfigError(f"class {label}: a component with n = {comp.n} cannot be split")
            rng = derive_rng(spec.seed, STAGE_SYNTH, 1, stream)
            stream += 1
            x = _draw(comp, d, rng)
            n_train = min(max(int(math.floor(TRAIN_FRACTION * comp.n + 1e-9)), 1), comp.n - 1)
            tr_x.append(x[:n_train])
            te_x.append(x[n_train:])
            tr_y.append(np.full(n_train, label))
            te_y.append(np.full(comp.n - n_train, label))
    C = len(spec.classes)
    id_train = EmbeddingSet(np.vstack(tr_x), np.concatenate(tr_y), C)
    id_test = EmbeddingSet(np.vstack(te_x), np.concatenate(te_y), C)

    ood_sets = {}
    for name, comps in spec.ood_specs.items():
        xs = []
        for comp in comps:
            rng = derive_rng(spec.seed, STAGE_SYNTH, 2, stream)
            stream += 1
            xs.append(_draw(comp, d, rng))
        x = np.vstack(xs)
        ood_sets[name] = EmbeddingSet(x, np.zeros(x.shape[0], dtype=int), 1)

    truth = {
        "name": spec.name,
        "seed": spec.seed,
        "dimension": d,
        "components_per_class": {str(c): len(comps) for c, comps in enumerate(spec.classes)},
        "train_counts": [int(v) for v in id_train.class_counts()],
        "test_counts": [int(v) for v in id_test.class_counts()],
        "ood_sets": {name: s.n for name, s in ood_sets.items()},
    }
    return Benchmark(id_train, id_test, ood_sets, truth)


def _draw(comp: Component, d: int, rng) -> np.ndarray:
    if comp.mean is None:
        return sample_vmf(np.eye(d)[0], 0.0, comp.n, rng)
    return sample_vmf(comp.mean, comp.kappa, comp.n, rng)


def blobs(
    n_clusters: int = 3,
    n_per_cluster: int = 200,
    dimension: int = 2,
    separation: float = 20.0,
    spread: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Well-separated isotropic Gaussian clusters in Euclidean space.

    Centers sit on a regular simplex-like layout scaled by ``separation``.
    Returns ``(points, cluster_ids)``.
    """
    rng = derive_rng(seed, STAGE_SYNTH, 3)
    centers = np.zeros((n_clusters, dimension))
    for j in range(n_clusters):
        angle = 2.0 * math.pi * j / n_clusters
        centers[j, 0] = separation * math.cos(angle)
        centers[j, 1] = separation * math.sin(angle)
    pts = centers.repeat(n_per_cluster, axis=0) + spread * rng.standard_normal(
        (n_clusters * n_per_cluster, dimension)
    )
    return pts, np.arange(n_clusters).repeat(n_per_cluster)
