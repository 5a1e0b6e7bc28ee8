"""Adaptive prototype manifolds and posterior-aware OOD scoring on embeddings."""

from .assignment import AssignmentMatrix, batch_class_weights, sinkhorn
from .config import RunConfig
from .embeddings import EmbeddingSet, load_embeddings, normalize_rows, save_embeddings
from .errors import ApexError, ConfigError, InfeasibleError, LoadError, NumericalError
from .gmm import GmmModel, KSelectionReport, assign_k_all_classes, bic, fit_gmm, param_count, select_k
from .losses import (
    ClassPosterior,
    LossBreakdown,
    class_posterior,
    mle_gradient,
    mle_loss,
    pc_loss,
    toy_train,
    total_loss,
)
from .manifold import PrototypeManifold, ema_update_prototypes, ema_update_quality, init_prototypes
from .metrics import ScoreReport, aupr, auroc, evaluate, fpr_at_tpr
from .paos import (
    PaosStats,
    class_confidence,
    fit_gaussian_stats,
    gibbs_weights,
    mahalanobis,
    paos_score,
    prototype_energy,
    score_batch,
)
from .quality import QualityReport, cohesion, collision_report, hard_assign, quality, separation
from .synth import BenchmarkSpec, generate, hetero2_spec, sample_vmf

__version__ = "0.1.0"

__all__ = [
    "ApexError", "AssignmentMatrix", "BenchmarkSpec", "ClassPosterior", "ConfigError",
    "EmbeddingSet", "GmmModel", "InfeasibleError", "KSelectionReport", "LoadError",
    "LossBreakdown", "NumericalError", "PaosStats", "PrototypeManifold", "QualityReport",
    "RunConfig", "ScoreReport", "assign_k_all_classes", "aupr", "auroc", "batch_class_weights",
    "bic", "class_confidence", "class_posterior", "cohesion", "collision_report",
    "ema_update_prototypes", "ema_update_quality", "evaluate", "fit_gaussian_stats", "fit_gmm",
    "fpr_at_tpr", "generate", "gibbs_weights", "hard_assign", "hetero2_spec", "init_prototypes",
    "load_embeddings", "mahalanobis", "mle_gradient", "mle_loss", "normalize_rows",
    "paos_score", "param_count", "pc_loss", "prototype_energy", "quality", "sample_vmf",
    "save_embeddings", "score_batch", "select_k", "separation", "sinkhorn", "toy_train",
    "total_loss",
]
