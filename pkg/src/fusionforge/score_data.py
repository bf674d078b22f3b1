"""Multi-stream score datasets: CSV/manifest I/O, stacking, synthesis, folds."""

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

logger = logging.getLogger(__name__)

SINGLE = "single"
MULTI = "multi"
# Calibration draws are independent of the dataset seed, so mixing rates depend
# only on (C, sharpness, sharing, reliability).
CALIBRATION_SEED = 0x5EED
CALIBRATION_DRAWS = 20000


class ScoreDataError(ValueError):
    pass


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScoreMatrix:
    stream_id: str
    scores: np.ndarray
    sample_ids: tuple

    def __post_init__(self):
        scores = _frozen(self.scores)
        if scores.ndim != 2:
            raise ScoreDataError(f"stream {self.stream_id!r}: scores must be 2-D")
        if not np.all(np.isfinite(scores)):
            raise ScoreDataError(f"stream {self.stream_id!r}: non-finite score")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ScoreDataError(f"stream {self.stream_id!r}: score out of range [0, 1]")
        ids = tuple(str(s) for s in self.sample_ids)
        if len(ids) != scores.shape[0]:
            raise ScoreDataError(
                f"stream {self.stream_id!r}: {len(ids)} sample ids for {scores.shape[0]} rows"
            )
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n_samples(self):
        return self.scores.shape[0]

    @property
    def n_classes(self):
        return self.scores.shape[1]


@dataclass(frozen=True)
class LabelMatrix:
    labels: np.ndarray
    class_names: tuple
    mode: str = SINGLE
    sample_ids: tuple = None

    def __post_init__(self):
        labels = _frozen(self.labels)
        if labels.ndim != 2:
            raise ScoreDataError("labels must be 2-D")
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise ScoreDataError("label entries must be exactly 0 or 1")
        if self.mode not in (SINGLE, MULTI):
            raise ScoreDataError(f"unknown label mode {self.mode!r}")
        if self.mode == SINGLE and not np.all(labels.sum(axis=1) == 1.0):
            raise ScoreDataError("single-label rows must contain exactly one positive")
        names = tuple(str(c) for c in self.class_names)
        if len(names) != labels.shape[1]:
            raise ScoreDataError("class_names length does not match label columns")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)
        if self.sample_ids is not None:
            object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))

    @classmethod
    def from_indices(cls, y, n_classes, class_names=None, sample_ids=None):
        y = np.asarray(y, dtype=np.int64)
        onehot = np.zeros((len(y), n_classes))
        onehot[np.arange(len(y)), y] = 1.0
        names = class_names or [f"class_{c}" for c in range(n_classes)]
        return cls(onehot, names, SINGLE, sample_ids)

    @property
    def n_samples(self):
        return self.labels.shape[0]

    @property
    def n_classes(self):
        return self.labels.shape[1]

    def indices(self):
        """True class index per sample (single-label mode only)."""
        if self.mode != SINGLE:
            raise ScoreDataError("class indices are defined for single-label data only")
        return np.argmax(self.labels, axis=1)

    def subset(self, idx):
        ids = None if self.sample_ids is None else [self.sample_ids[i] for i in idx]
        return LabelMatrix(self.labels[idx], self.class_names, self.mode, ids)


@dataclass(frozen=True)
class StackedScores:
    matrix: np.ndarray
    stream_order: tuple
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        object.__setattr__(self, "stream_order", tuple(self.stream_order))

    @property
    def n_streams(self):
        return len(self.stream_order)

    def block(self, m):
        C = self.n_classes
        return self.matrix[:, m * C:(m + 1) * C]


@dataclass(frozen=True)
class Dataset:
    streams: tuple
    labels: LabelMatrix
    mode: str = SINGLE

    def __post_init__(self):
        streams = tuple(self.streams)
        if not streams:
            raise ScoreDataError("a dataset needs at least one stream")
        if self.mode != self.labels.mode:
            raise ScoreDataError("dataset mode disagrees with label mode")
        for s in streams:
            if s.scores.shape != self.labels.labels.shape:
                raise ScoreDataError(
                    f"stream {s.stream_id!r} has shape {s.scores.shape}, "
                    f"labels have {self.labels.labels.shape}"
                )
        _check_sample_order(streams)
        if self.labels.sample_ids is not None and self.labels.sample_ids != streams[0].sample_ids:
            raise ScoreDataError("label sample_id order differs from stream order")
        if len({s.stream_id for s in streams}) != len(streams):
            raise ScoreDataError("duplicate stream ids")
        object.__setattr__(self, "streams", streams)

    @property
    def stream_order(self):
        return tuple(s.stream_id for s in self.streams)

    @property
    def n_samples(self):
        return self.labels.n_samples

    @property
    def n_classes(self):
        return self.labels.n_classes

    def stacked(self):
        return stack_streams(self.streams)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        streams = [
            ScoreMatrix(s.stream_id, s.scores[idx], [s.sample_ids[i] for i in idx])
            for s in self.streams
        ]
        return Dataset(streams, self.labels.subset(idx), self.mode)


@dataclass(frozen=True)
class SynthConfig:
    n_train: int
    n_test: int
    n_classes: int
    n_streams: int
    reliability: np.ndarray
    confusion_sharpness: float = 1.0
    seed: int = 0
    noise_sharing: float = 0.5  # streams share half their noise, like views of one clip

    def __post_init__(self):
        rel = _frozen(self.reliability)
        if rel.shape != (self.n_streams, self.n_classes):
            raise ScoreDataError(
                f"reliability must be {self.n_streams}x{self.n_classes}, got {rel.shape}"
            )
        if self.n_classes < 2 or self.n_streams < 1:
            raise ScoreDataError("need at least 2 classes and 1 stream")
        if self.n_train < 1 or self.n_test < 1:
            raise ScoreDataError("sample counts must be positive")
        if np.any(rel <= 1.0 / self.n_classes) or np.any(rel > 1.0):
            raise ScoreDataError("reliability must lie in (1/C, 1]: streams must beat chance")
        if not self.confusion_sharpness > 0:
            raise ScoreDataError("confusion_sharpness must be positive")
        if not 0.0 <= self.noise_sharing < 1.0:
            raise ScoreDataError("noise_sharing must lie in [0, 1)")
        object.__setattr__(self, "reliability", rel)

    @classmethod
    def patterned(cls, n_train, n_test, n_classes, n_streams, high=0.9, low=0.55, **kw):
        """Stream ``m`` is strong (``high``) on classes with ``c % M == m``, weak elsewhere."""
        rel = np.full((n_streams, n_classes), low)
        for m in range(n_streams):
            rel[m, [c for c in range(n_classes) if c % n_streams == m]] = high
        return cls(n_train, n_test, n_classes, n_streams, rel, **kw)

    def to_dict(self):
        return {
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_classes": self.n_classes,
            "n_streams": self.n_streams,
            "reliability": self.reliability.tolist(),
            "confusion_sharpness": self.confusion_sharpness,
            "noise_sharing": self.noise_sharing,
            "seed": self.seed,
        }


def _check_sample_order(streams):
    ref = streams[0]
    for s in streams[1:]:
        if s.scores.shape != ref.scores.shape:
            raise ScoreDataError(
                f"shape mismatch: {s.stream_id!r} {s.scores.shape} vs {ref.stream_id!r} {ref.scores.shape}"
            )
        if s.sample_ids != ref.sample_ids:
            raise ScoreDataError(f"sample_id order mismatch between {ref.stream_id!r} and {s.stream_id!r}")


# -- CSV I/O -----------------------------------------------------------------

def _read_table(path):
    path = Path(path)
    if not path.is_file():
        raise ScoreDataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ScoreDataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ScoreDataError(f"{path}: header needs sample_id and at least one class")
    ids, values = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ScoreDataError(f"{path}:{lineno}: ragged row ({len(row)} cells, header has {len(header)})")
        ids.append(row[0])
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ScoreDataError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    matrix = np.array(values, dtype=np.float64).reshape(len(body), len(header) - 1)
    return header[1:], ids, matrix


def load_scores(path, expected_classes=None, stream_id=None):
    """Read a score CSV (``sample_id,<class_0>,...``) into a validated ScoreMatrix."""
    classes, ids, matrix = _read_table(path)
    if expected_classes is not None and len(classes) != expected_classes:
        raise ScoreDataError(
            f"{path}: class-count mismatch ({len(classes)} columns, expected {expected_classes})"
        )
    if not np.all(np.isfinite(matrix)):
        raise ScoreDataError(f"{path}: non-finite score")
    if matrix.size and (matrix.min() < 0.0 or matrix.max() > 1.0):
        bad = matrix[(matrix < 0.0) | (matrix > 1.0)][0]
        raise ScoreDataError(f"{path}: score out of range [0, 1]: {bad!r}")
    return ScoreMatrix(stream_id or Path(path).stem, matrix, ids)


def _write_table(path, class_names, ids, matrix, fmt=repr):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *class_names])
        for sid, row in zip(ids, matrix):
            w.writerow([sid, *(fmt(float(v)) for v in row)])


def save_scores(score_matrix, path, class_names=None):
    names = class_names or [f"class_{c}" for c in range(score_matrix.n_classes)]
    _write_table(path, names, score_matrix.sample_ids, score_matrix.scores)


def load_labels(path, mode=SINGLE):
    classes, ids, matrix = _read_table(path)
    return LabelMatrix(matrix, classes, mode, ids)


def save_labels(labels, path):
    _write_table(path, labels.class_names, labels.sample_ids or
                 [str(i) for i in range(labels.n_samples)], labels.labels,
                 fmt=lambda v: str(int(v)))


def softmax_rows(raw):
    """Row-wise softmax; turns raw stream activations into [0, 1] posteriors."""
    z = np.asarray(raw, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def load_manifest(path, softmax=False):
    """Load a dataset manifest ``{"mode", "labels", "streams": [{"id", "path"}]}``.

    Relative paths are resolved against the manifest's directory. With
    ``softmax=True`` stream files may hold raw activations; each row is
    softmax-normalized before validation.
    """
    path = Path(path)
    if not path.is_file():
        raise ScoreDataError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScoreDataError(f"{path}: invalid JSON ({exc})") from None
    for key in ("mode", "labels", "streams"):
        if key not in doc:
            raise ScoreDataError(f"{path}: manifest missing {key!r}")
    if doc["mode"] not in (SINGLE, MULTI):
        raise ScoreDataError(f"{path}: mode must be 'single' or 'multi'")
    base = path.parent
    labels = load_labels(base / doc["labels"], doc["mode"])
    streams = []
    for entry in doc["streams"]:
        spath = base / entry["path"]
        if softmax:
            classes, ids, raw = _read_table(spath)
            if len(classes) != labels.n_classes:
                raise ScoreDataError(f"{spath}: class-count mismatch")
            streams.append(ScoreMatrix(entry["id"], softmax_rows(raw), ids))
        else:
            streams.append(load_scores(spath, labels.n_classes, entry["id"]))
    return Dataset(streams, labels, doc["mode"])


def save_dataset(dataset, directory, prefix, config=None):
    """Write per-stream score CSVs, a label CSV and a manifest; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(dataset.labels.class_names)
    label_file = f"{prefix}_labels.csv"
    save_labels(LabelMatrix(dataset.labels.labels, names, dataset.mode,
                            dataset.streams[0].sample_ids), directory / label_file)
    entries = []
    for s in dataset.streams:
        fname = f"{prefix}_{s.stream_id}.csv"
        save_scores(s, directory / fname, names)
        entries.append({"id": s.stream_id, "path": fname})
    manifest = {"mode": dataset.mode, "labels": label_file, "streams": entries}
    if config is not None:
        manifest["config"] = config
    out = directory / f"{prefix}.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# -- stacking ----------------------------------------------------------------

def stack_streams(streams):
    """Concatenate stream score rows: row n becomes ``[s_n^1, ..., s_n^M]``."""
    streams = list(streams)
    if not streams:
        raise ScoreDataError("stack_streams needs at least one stream")
    _check_sample_order(streams)
    matrix = np.hstack([s.scores for s in streams])
    return StackedScores(matrix, [s.stream_id for s in streams], streams[0].n_classes)


def unstack(stacked, sample_ids):
    return [
        ScoreMatrix(sid, stacked.block(m), sample_ids)
        for m, sid in enumerate(stacked.stream_order)
    ]


# -- synthesis ---------------------------------------------------------------

def _normalized_noise(rng, rows, n_classes, sharpness):
    d = rng.noise(rows * n_classes, sharpness).reshape(rows, n_classes)
    return d / d.sum(axis=1, keepdims=True)


def _stream_noise(rng, n, n_streams, n_classes, sharpness, sharing):
    """Per-(sample, stream) noise rows: ``sharing`` of a per-sample shared draw
    plus ``1 - sharing`` of a private one. Shared draws come first."""
    shared = _normalized_noise(rng, n, n_classes, sharpness)
    private = _normalized_noise(rng, n * n_streams, n_classes, sharpness)
    private = private.reshape(n, n_streams, n_classes)
    if sharing == 0.0:
        return private
    return sharing * shared[:, None, :] + (1.0 - sharing) * private


@lru_cache(maxsize=32)
def _calibration_gaps(n_classes, sharpness, sharing):
    rng = Xoshiro256(CALIBRATION_SEED)
    d = _stream_noise(rng, CALIBRATION_DRAWS, 1, n_classes, sharpness, sharing)[:, 0, :]
    gaps = d[:, 1:].max(axis=1) - d[:, 0]
    gaps.setflags(write=False)
    return gaps


def mixing_rate(target, n_classes, sharpness, sharing=0.0, iters=100):
    """Smallest one-hot mixing weight whose argmax accuracy reaches ``target``.

    A score row ``a * e_y + (1 - a) * d`` is correct exactly when
    ``a / (1 - a)`` exceeds the noise gap ``max_{j != y} d_j - d_y``;
    bisection runs on the empirical accuracy over fixed calibration draws.
    """
    if target >= 1.0:
        return 1.0
    gaps = _calibration_gaps(n_classes, float(sharpness), float(sharing))

    def acc(a):
        return np.mean(a > (1.0 - a) * gaps)

    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if acc(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def _synth_split(rng, cfg, alpha, n, split):
    C, M = cfg.n_classes, cfg.n_streams
    y = rng.below(C, n)
    noise = _stream_noise(rng, n, M, C, cfg.confusion_sharpness, cfg.noise_sharing)
    ids = [f"{split}-{i:06d}" for i in range(n)]
    streams = []
    for m in range(M):
        a = alpha[m, y][:, None]
        scores = (1.0 - a) * noise[:, m, :]
        scores[np.arange(n), y] += a[:, 0]
        # Rounding can push a sum of terms in [0, 1] a hair above 1.
        np.minimum(scores, 1.0, out=scores)
        streams.append(ScoreMatrix(f"stream{m}", scores, ids))
    labels = LabelMatrix.from_indices(y, C, sample_ids=ids)
    return Dataset(streams, labels, SINGLE)


def generate_synthetic(cfg):
    """Draw (train, test) single-label datasets from the calibrated score model.

    Draw order from ``Xoshiro256(cfg.seed)``: train class indices, shared
    train noise in (sample, class) order, private train noise in
    (sample, stream, class) order, then the same for test. Shared noise is
    drawn even when ``noise_sharing`` is 0 so the stream layout never shifts.
    """
    alpha = np.array([
        [mixing_rate(r, cfg.n_classes, cfg.confusion_sharpness, cfg.noise_sharing) for r in row]
        for row in cfg.reliability
    ])
    rng = Xoshiro256(cfg.seed)
    train = _synth_split(rng, cfg, alpha, cfg.n_train, "train")
    test = _synth_split(rng, cfg, alpha, cfg.n_test, "test")
    return train, test


# -- folds -------------------------------------------------------------------

def split_folds(dataset, k, seed=0):
    """Partition sample indices into ``k`` folds; returns (train_idx, val_idx) pairs.

    Single-label data is stratified: each class's shuffled indices are dealt
    round-robin, continuing the deal across classes so fold sizes stay balanced.
    """
    n = dataset.n_samples
    if k < 2:
        raise ScoreDataError("need at least 2 folds")
    if k > n:
        raise ScoreDataError(f"cannot split {n} samples into {k} folds")
    rng = Xoshiro256(seed)
    order = None
    if dataset.mode == SINGLE:
        y = dataset.labels.indices()
        counts = np.bincount(y, minlength=dataset.n_classes)
        present = counts[counts > 0]
        if present.min() < k:
            logger.warning("a class has fewer than %d samples; using unstratified folds", k)
        else:
            order = np.concatenate([
                np.flatnonzero(y == c)[rng.permutation(int(counts[c]))]
                for c in range(dataset.n_classes) if counts[c] > 0
            ])
    if order is None:
        order = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    folds = []
    for f in range(k):
        folds.append((np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)))
    return folds


def reliability_accuracy(dataset):
    """Per-stream argmax accuracy against the true class (single-label)."""
    y = dataset.labels.indices()
    return np.array([np.mean(np.argmax(s.scores, axis=1) == y) for s in dataset.streams])
