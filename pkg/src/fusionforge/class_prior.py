"""Per-stream class-confusion priors and their stacked form.

``V^m[i, j]`` is the fraction of class-``i`` samples that stream ``m`` predicts
(argmax, lowest index on ties) as class ``j``. Stacking the ``V^m`` vertically
gives a ``(C*M) x C`` matrix aligned row-for-row with the fusion weights.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from .score_data import MULTI, SINGLE, ScoreDataError

logger = logging.getLogger(__name__)

DIAGONAL_ACCURACY = "accuracy"
DIAGONAL_ZERO = "zero"


@dataclass(frozen=True)
class PriorMatrix:
    per_stream: tuple
    stacked: np.ndarray
    stream_order: tuple
    diagonal: str = DIAGONAL_ACCURACY

    @property
    def n_classes(self):
        return self.stacked.shape[1]

    def to_dict(self):
        return {
            "stream_order": list(self.stream_order),
            "per_stream": [v.tolist() for v in self.per_stream],
            "prior_diagonal": self.diagonal,
        }

    @classmethod
    def from_dict(cls, data):
        return stack_priors(
            [np.array(v, dtype=np.float64) for v in data["per_stream"]],
            data.get("stream_order"),
            data.get("prior_diagonal", DIAGONAL_ACCURACY),
        )


def confusion_matrix(scores, labels, mode=SINGLE, diagonal=DIAGONAL_ACCURACY):
    """C x C row-normalized confusion frequencies of one stream.

    In multi-label mode a sample counts once for each of its positive classes,
    always with the same argmax prediction. Rows of classes without samples are
    zero. ``diagonal="zero"`` keeps only the off-diagonal confusion rates.
    """
    S = scores.scores if hasattr(scores, "scores") else np.asarray(scores, dtype=np.float64)
    Y = labels.labels if hasattr(labels, "labels") else np.asarray(labels, dtype=np.float64)
    if S.shape != Y.shape:
        raise ScoreDataError(f"shape mismatch: scores {S.shape}, labels {Y.shape}")
    if S.shape[0] == 0:
        raise ScoreDataError("confusion_matrix of an empty dataset")
    if diagonal not in (DIAGONAL_ACCURACY, DIAGONAL_ZERO):
        raise ValueError(f"diagonal must be 'accuracy' or 'zero', got {diagonal!r}")
    C = S.shape[1]
    pred = np.argmax(S, axis=1)
    counts = np.zeros((C, C))
    if mode == SINGLE:
        truth = np.argmax(Y, axis=1)
        np.add.at(counts, (truth, pred), 1.0)
    elif mode == MULTI:
        if np.any(Y.sum(axis=1) == 0):
            raise ScoreDataError("multi-label confusion needs at least one positive per sample")
        rows, cols = np.nonzero(Y)
        np.add.at(counts, (cols, pred[rows]), 1.0)
    else:
        raise ScoreDataError(f"unknown mode {mode!r}")
    totals = counts.sum(axis=1)
    empty = totals == 0
    if np.any(empty):
        logger.warning("classes %s have no samples; their prior rows are zero",
                       np.flatnonzero(empty).tolist())
    V = np.divide(counts, totals[:, None], out=np.zeros_like(counts), where=~empty[:, None])
    if diagonal == DIAGONAL_ZERO:
        np.fill_diagonal(V, 0.0)
    return V


def stack_priors(per_stream, stream_order=None, diagonal=DIAGONAL_ACCURACY):
    mats = [np.array(v, dtype=np.float64) for v in per_stream]
    if not mats:
        raise ScoreDataError("stack_priors needs at least one matrix")
    C = mats[0].shape[0]
    for v in mats:
        if v.shape != (C, C):
            raise ScoreDataError(f"prior blocks must all be {C}x{C}, got {v.shape}")
    for v in mats:
        v.setflags(write=False)
    stacked = np.vstack(mats)
    stacked.setflags(write=False)
    if stream_order is None:
        stream_order = [f"stream{m}" for m in range(len(mats))]
    if len(stream_order) != len(mats):
        raise ScoreDataError("stream_order length does not match the number of blocks")
    return PriorMatrix(tuple(mats), stacked, tuple(stream_order), diagonal)


def estimate_prior(dataset, diagonal=DIAGONAL_ACCURACY):
    """Confusion prior of every stream in ``dataset``, stacked in stream order.

    Estimating on the same scores the fusion weights are trained on makes the
    prior optimistic; prefer held-out predictions when they exist.
    """
    per_stream = [confusion_matrix(s, dataset.labels, dataset.mode, diagonal)
                  for s in dataset.streams]
    return stack_priors(per_stream, dataset.stream_order, diagonal)


def save_prior(prior, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prior.to_dict(), fh, indent=2)
        fh.write("\n")


def load_prior(path):
    with open(path, encoding="utf-8") as fh:
        return PriorMatrix.from_dict(json.load(fh))
