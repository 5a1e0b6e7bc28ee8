"""FPR@95, AUROC and AUPR for oriented ID/OOD score sets.

Scores are first mapped so that higher means more OOD. ID samples are the
positives for the TPR threshold; OOD samples are the positives for AUPR.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ORIENTATIONS = ("lower-is-id", "higher-is-id")


def _oriented(id_scores, ood_scores, orientation: str):
    if orientation not in ORIENTATIONS:
        raise ConfigError(f"orientation must be one of {ORIENTATIONS}")
    i = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    o = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    if i.size == 0 or o.size == 0:
        raise ConfigError("both ID and OOD score sets must be non-empty")
    if orientation == "higher-is-id":
        i, o = -i, -o
    return i, o


def auroc(id_scores, ood_scores, orientation: str = "lower-is-id") -> float:
    """Mann-Whitney estimate of P(OOD > ID) with half credit for ties."""
    i, o = _oriented(id_scores, ood_scores, orientation)
    srt = np.sort(i)
    below = np.searchsorted(srt, o, side="left")
    at_or_below = np.searchsorted(srt, o, side="right")
    wins = int(below.sum())
    ties = int((at_or_below - below).sum())
    return (wins + 0.5 * ties) / (i.size * o.size)


def fpr_at_tpr(id_scores, ood_scores, orientation: str = "lower-is-id", tpr_target: float = 0.95) -> float:
    """Fraction of OOD on the ID side of the smallest threshold admitting
    at least ``tpr_target`` of the ID samples (ID side: score <= threshold)."""
    if not 0.0 < tpr_target <= 1.0:
        raise ConfigError("tpr_target must lie in (0, 1]")
    i, o = _oriented(id_scores, ood_scores, orientation)
    srt = np.sort(i)
    tpr = np.arange(1, srt.size + 1) / srt.size
    k = int(np.argmax(tpr >= tpr_target))
    threshold = srt[k]
    return int(np.count_nonzero(o <= threshold)) / o.size


def aupr(id_scores, ood_scores, orientation: str = "lower-is-id") -> float:
    """Average precision with OOD as the positive class.

    Step-wise sum over distinct thresholds (descending) of
    ``(recall_t - recall_{t-1}) * precision_t``.
    """
    i, o = _oriented(id_scores, ood_scores, orientation)
    scores = np.concatenate([o, i])
    pos = np.concatenate([np.ones(o.size, dtype=np.int64), np.zeros(i.size, dtype=np.int64)])
    order = np.argsort(-scores, kind="stable")
    scores, pos = scores[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    m = o.size
    prev = np.r_[0, tp[:-1]]
    return math.fsum(((t - p) / m) * (t / (t + f)) for t, p, f in zip(tp.tolist(), prev.tolist(), fp.tolist()))


@dataclass(frozen=True)
class ScoreReport:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    orientation: str
    fpr_at_95: float
    auroc: float
    aupr: float

    def to_dict(self) -> dict:
        return {
            "fpr@95": self.fpr_at_95,
            "auroc": self.auroc,
            "aupr": self.aupr,
            "n_id": int(self.id_scores.size),
            "n_ood": int(self.ood_scores.size),
            "orientation": self.orientation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(id_scores, ood_scores, orientation: str = "lower-is-id") -> ScoreReport:
    i = np.asarray(id_scores, dtype=np.float64).reshape(-1)
    o = np.asarray(ood_scores, dtype=np.float64).reshape(-1)
    return ScoreReport(
        id_scores=i,
        ood_scores=o,
        orientation=orientation,
        fpr_at_95=fpr_at_tpr(i, o, orientation),
        auroc=auroc(i, o, orientation),
        aupr=aupr(i, o, orientation),
    )
