"""End-to-end pipeline: K selection, toy training, quality, PAOS scoring, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .embeddings import EmbeddingSet, normalize_rows
from .gmm import KSelectionReport, assign_k_all_classes
from .losses import TrainResult, toy_train
from .metrics import evaluate
from .paos import PaosStats, confidences_from_quality, fit_gaussian_stats, score_batch
from .quality import QualityReport, collision_report

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    config: RunConfig
    k_report: KSelectionReport
    train: TrainResult
    quality: QualityReport | None
    stats: PaosStats
    id_scores: np.ndarray
    id_argmin: np.ndarray
    ood_scores: dict = field(default_factory=dict)
    ood_argmin: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)  # name -> ScoreReport

    def metrics_dict(self) -> dict:
        return {name: rep.to_dict() for name, rep in sorted(self.metrics.items())}


def class_conf(train: TrainResult, quality: QualityReport | None, config: RunConfig) -> np.ndarray:
    """Conf(c) from EMA quality state (default) or the final quality report."""
    if config.conf_source == "instant" and quality is not None:
        per_class = quality.per_class_quality()
    else:
        per_class = train.manifold.quality()
    return confidences_from_quality(per_class, config.tau_q)


def fit_stats(train_h: EmbeddingSet, conf, config: RunConfig) -> PaosStats:
    return fit_gaussian_stats(
        train_h, conf, config.alpha, config.tau_q, config.shrinkage, config.cov_floor
    )


def run_pipeline(
    train_set: EmbeddingSet,
    id_test: EmbeddingSet,
    ood_sets: dict,
    config: RunConfig,
    strategy: str = "bic",
    k: int | None = None,
    k_range=None,
    k_report: KSelectionReport | None = None,
    score_features: EmbeddingSet | None = None,
) -> PipelineResult:
    """Run both stages on in-memory sets.

    Mixtures for K selection are fitted on ``train_set`` as given; training
    runs on its unit-normalized rows. Scoring statistics are fitted on
    ``score_features`` when given, otherwise on the input training features
    (the untrained embedding space shared with the test sets).
    """
    train_n = train_set if train_set.normalized else normalize_rows(train_set)
    if k_report is None:
        k_report = assign_k_all_classes(train_set, config, strategy, config.seed, k=k, k_range=k_range)
    log.info("K map (%s): %s", k_report.strategy, k_report.k_map)
    train = toy_train(train_n, k_report, config)
    quality = collision_report(train.manifold, train.embeddings) if train.manifold.class_count > 1 else None
    conf = class_conf(train, quality, config)
    stats = fit_stats(train_set if score_features is None else score_features, conf, config)

    id_scores, id_arg = score_batch(id_test, stats)
    result = PipelineResult(config, k_report, train, quality, stats, id_scores, id_arg)
    for name, ood in sorted(ood_sets.items()):
        s, a = score_batch(ood, stats)
        result.ood_scores[name] = s
        result.ood_argmin[name] = a
        result.metrics[name] = evaluate(id_scores, s, "lower-is-id")
    return result


def alpha_sweep(result: PipelineResult, id_test: EmbeddingSet, ood_sets: dict, alphas) -> list[dict]:
    """Re-score with each calibration strength; one row per (alpha, OOD set)."""
    rows = []
    for a in alphas:
        stats = result.stats.with_alpha(float(a))
        id_scores, _ = score_batch(id_test, stats)
        for name, ood in sorted(ood_sets.items()):
            rep = evaluate(id_scores, score_batch(ood, stats)[0], "lower-is-id")
            rows.append({"alpha": float(a), "ood_set": name, **rep.to_dict()})
    return rows
