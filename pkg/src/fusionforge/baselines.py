"""Reference fusers: plain average, CV-weighted linear, plain logistic regression."""

from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from .class_prior import stack_priors
from .fusion_solver import SolverOptions, fit, score_predictions
from .score_data import ScoreDataError, ScoreMatrix, split_folds

MAX_GRID_STREAMS = 4


@dataclass(frozen=True)
class WeightedFusionModel:
    weights: tuple
    cv_score: float = float("nan")

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))


def _combine(weights, streams, name):
    streams = list(streams)
    if not streams:
        raise ScoreDataError("no streams to fuse")
    if len(weights) != len(streams):
        raise ScoreDataError(f"{len(weights)} weights for {len(streams)} streams")
    ref = streams[0]
    for s in streams[1:]:
        if s.scores.shape != ref.scores.shape:
            raise ScoreDataError(f"shape mismatch: {s.stream_id!r} vs {ref.stream_id!r}")
    # Fixed left-to-right accumulation; average_fusion relies on sharing it.
    out = weights[0] * ref.scores
    for w, s in zip(weights[1:], streams[1:]):
        out = out + w * s.scores
    np.clip(out, 0.0, 1.0, out=out)
    return ScoreMatrix(name, out, ref.sample_ids)


def average_fusion(streams):
    streams = list(streams)
    if not streams:
        raise ScoreDataError("no streams to fuse")
    return _combine([1.0 / len(streams)] * len(streams), streams, "average")


def weighted_fusion_apply(model, streams):
    return _combine(model.weights, streams, "weighted")


def simplex_grid(n_streams, grid_step):
    """All weight vectors with entries in multiples of ``grid_step`` summing to 1.

    Returned as integer part counts (out of ``round(1 / grid_step)``) so ties
    can be compared exactly.
    """
    steps = int(round(1.0 / grid_step))
    if steps < 1 or abs(steps * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid_step must divide 1, got {grid_step}")
    if n_streams == 1:
        return [(steps,)], steps
    grid = [
        (*head, steps - sum(head))
        for head in product(range(steps + 1), repeat=n_streams - 1)
        if sum(head) <= steps
    ]
    return grid, steps


def weighted_fusion_fit(train, grid_step=0.1, k=3, seed=0):
    """Exhaustive simplex-grid search for stream weights by k-fold CV.

    Fixed weights need no fitting, so each fold only scores its validation
    part. Ties prefer weights nearer uniform, then the lexicographically
    smallest vector.
    """
    M = len(train.streams)
    if M > MAX_GRID_STREAMS:
        raise ValueError(f"exhaustive weight grid supports at most {MAX_GRID_STREAMS} streams, got {M}")
    grid, steps = simplex_grid(M, grid_step)
    if M == 1:
        return WeightedFusionModel((1.0,))
    folds = split_folds(train, k, seed)
    held = [train.subset(va) for _, va in folds]
    best, best_key = None, None
    for parts in grid:
        weights = [p / steps for p in parts]
        score = float(np.mean([
            score_predictions(_combine(weights, h.streams, "weighted"), h.labels) for h in held
        ]))
        spread = sum((M * p - steps) ** 2 for p in parts)
        key = (-score, spread, parts)
        if best_key is None or key < best_key:
            best, best_key = weights, key
    return WeightedFusionModel(tuple(best), -best_key[0])


def plain_logistic_fusion_fit(S, Y, opts=None):
    """Unregularized logistic-regression fusion: ``fit`` with zero lambdas from zeros."""
    opts = replace(opts or SolverOptions(), init="zeros")
    S_arr = S.matrix if hasattr(S, "matrix") else np.asarray(S, dtype=np.float64)
    C = Y.labels.shape[1] if hasattr(Y, "labels") else np.asarray(Y).shape[1]
    V = np.zeros((S_arr.shape[1], C))
    if hasattr(S, "stream_order"):
        V = stack_priors(np.split(V, len(S.stream_order)), S.stream_order)
    return fit(S, Y, V, 0.0, 0.0, opts)
