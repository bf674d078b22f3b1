"""Accuracy, non-interpolated average precision, and mAP."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .score_data import SINGLE, ScoreDataError

logger = logging.getLogger(__name__)


def _scores(pred):
    return pred.scores if hasattr(pred, "scores") else np.asarray(pred, dtype=np.float64)


def _labels(labels):
    return labels.labels if hasattr(labels, "labels") else np.asarray(labels, dtype=np.float64)


@dataclass
class EvalReport:
    accuracy: float = None
    per_class_ap: list = field(default_factory=list)
    map: float = None

    def to_dict(self):
        return {"accuracy": self.accuracy, "map": self.map,
                "per_class_ap": [None if np.isnan(a) else a for a in self.per_class_ap]}


def accuracy(pred, labels):
    """Fraction of samples whose argmax (lowest index on ties) hits the true class."""
    if getattr(labels, "mode", SINGLE) != SINGLE:
        raise ScoreDataError("accuracy is defined for single-label data only")
    P, Y = _scores(pred), _labels(labels)
    if P.shape != Y.shape:
        raise ScoreDataError(f"shape mismatch: predictions {P.shape}, labels {Y.shape}")
    if np.any(Y.sum(axis=1) != 1):
        raise ScoreDataError("accuracy needs exactly one positive per sample")
    return float(np.mean(np.argmax(P, axis=1) == np.argmax(Y, axis=1)))


def average_precision(scores, positives):
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score; equal scores keep their original order.
    The precisions are summed with ``math.fsum`` (correctly rounded), so the
    result does not depend on summation order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives) != 0
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ScoreDataError("scores and positives must be equal-length vectors")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ScoreDataError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return math.fsum((np.arange(1, n_pos + 1) / ranks).tolist()) / n_pos


def mean_ap(pred, labels):
    """Per-class AP over score columns; classes with no positives get NaN and are skipped."""
    P, Y = _scores(pred), _labels(labels)
    if P.shape != Y.shape:
        raise ScoreDataError(f"shape mismatch: predictions {P.shape}, labels {Y.shape}")
    aps = []
    for c in range(P.shape[1]):
        if Y[:, c].any():
            aps.append(average_precision(P[:, c], Y[:, c]))
        else:
            aps.append(float("nan"))
    aps = np.array(aps)
    valid = ~np.isnan(aps)
    if not valid.any():
        raise ScoreDataError("no class has a positive sample")
    if not valid.all():
        logger.warning("classes %s have no positives and are excluded from mAP",
                       np.flatnonzero(~valid).tolist())
    report = EvalReport(per_class_ap=aps.tolist(), map=float(np.mean(aps[valid])))
    if getattr(labels, "mode", SINGLE) == SINGLE and np.all(Y.sum(axis=1) == 1):
        report.accuracy = accuracy(P, Y)
    return report
