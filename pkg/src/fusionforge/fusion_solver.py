"""Class-adaptive fusion weights by proximal gradient descent.

The weight matrix ``W`` has shape ``(C*M, C)``: column ``c`` holds the weights
that map a sample's stacked score vector ``s_n`` (all ``M`` streams, ``C``
scores each) to the fused score of class ``c``. The fitted objective is

    sum_{n,c} log(1 + exp((1 - 2 y_nc) s_n . w_c))
        + lambda1 * ||W - V||_F^2 + lambda2 * ||W||_1

where ``V`` is the stacked class-confusion prior. The first two terms are
smooth and handled by gradient steps; the l1 term by soft-thresholding.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _backend
from .class_prior import DIAGONAL_ACCURACY, PriorMatrix, estimate_prior, stack_priors
from .metrics import accuracy, mean_ap
from .score_data import SINGLE, ScoreDataError, ScoreMatrix, split_folds

logger = logging.getLogger(__name__)

LAMBDA1_GRID = (1e-5, 1e-4, 1e-3, 1e-2)
LAMBDA2_DEFAULT = 1e-3


class FusionError(RuntimeError):
    """Raised when the solver cannot produce a finite solution."""


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 10000
    rel_tol: float = 1e-8
    step0: float = 1.0
    backtrack: float = 0.5
    armijo: float = 1e-4
    init: str = "prior"
    step_rule: str = "bb"
    patience: int = 10

    def __post_init__(self):
        if not self.step0 > 0:
            raise ValueError("initial step size must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.init not in ("prior", "zeros"):
            raise ValueError("init must be 'prior' or 'zeros'")
        if self.step_rule not in ("bb", "carry"):
            raise ValueError("step_rule must be 'bb' or 'carry'")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class FitReport:
    objective_trace: list
    iterations: int
    converged: bool
    final_step_size: float
    sparsity: float


@dataclass
class FusionModel:
    W: np.ndarray
    lambda1: float
    lambda2: float
    prior: PriorMatrix
    stream_order: tuple
    fit_report: FitReport = None
    cv_scores: dict = field(default=None)

    @property
    def n_classes(self):
        return self.W.shape[1]

    @property
    def n_streams(self):
        return self.W.shape[0] // self.W.shape[1]

    @property
    def sparsity(self):
        return float(np.mean(self.W == 0.0))


# -- argument normalization ---------------------------------------------------

def _matrix(x, name):
    for attr in ("matrix", "stacked", "labels"):
        if hasattr(x, attr) and not isinstance(x, np.ndarray):
            x = getattr(x, attr)
            break
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ScoreDataError(f"{name} must be a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ScoreDataError(f"{name} has non-finite entries")
    return a


def _check(W, S, Y, V=None):
    W, S, Y = _matrix(W, "W"), _matrix(S, "S"), _matrix(Y, "Y")
    N, K = S.shape
    C = Y.shape[1]
    if Y.shape[0] != N:
        raise ScoreDataError(f"S has {N} rows but Y has {Y.shape[0]}")
    if W.shape != (K, C):
        raise ScoreDataError(f"W must be {K}x{C} for these scores/labels, got {W.shape}")
    if K % C:
        raise ScoreDataError(f"score width {K} is not a multiple of {C} classes")
    if V is not None:
        V = _matrix(V, "V")
        if V.shape != W.shape:
            raise ScoreDataError(f"prior shape {V.shape} differs from W shape {W.shape}")
    return W, S, Y, V


def _check_lambdas(*lams):
    for lam in lams:
        if not lam >= 0 or not math.isfinite(lam):
            raise ValueError(f"regularization weights must be finite and >= 0, got {lam}")


# -- objective pieces ---------------------------------------------------------

def logistic_loss(W, S, Y):
    """``sum_{n,c} log(1 + exp((1 - 2 y_nc) s_n . w_c))``, overflow-safe."""
    W, S, Y, _ = _check(W, S, Y)
    loss, _ = _backend.logistic_loss_grad(S, Y, W, False)
    return loss


def objective(W, S, Y, V, lambda1, lambda2):
    _check_lambdas(lambda1, lambda2)
    W, S, Y, V = _check(W, S, Y, V)
    loss, _ = _backend.logistic_loss_grad(S, Y, W, False)
    return loss + lambda1 * float(np.sum((W - V) ** 2)) + lambda2 * float(np.sum(np.abs(W)))


def smooth_gradient(W, S, Y, V, lambda1):
    """Gradient in ``W`` of the logistic loss plus ``lambda1 * ||W - V||_F^2``."""
    _check_lambdas(lambda1)
    W, S, Y, V = _check(W, S, Y, V)
    _, grad = _backend.logistic_loss_grad(S, Y, W, True)
    return grad + 2.0 * lambda1 * (W - V)


def soft_threshold(X, tau):
    """Entrywise ``sign(x) * max(|x| - tau, 0)``; the l1 proximal map."""
    if not tau >= 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        return _backend.soft_threshold(X.reshape(1, -1), float(tau)).reshape(X.shape)
    return _backend.soft_threshold(X, float(tau))


# -- solver -------------------------------------------------------------------

class _Smooth:
    """Smooth part value/gradient with shapes checked once."""

    def __init__(self, S, Y, V, lambda1):
        self.S, self.Y, self.V, self.lambda1 = S, Y, V, lambda1

    def value_grad(self, W):
        loss, grad = _backend.logistic_loss_grad(self.S, self.Y, W, True)
        diff = W - self.V
        return (loss + self.lambda1 * float(np.sum(diff * diff)),
                grad + 2.0 * self.lambda1 * diff)


def fit(S, Y, prior, lambda1, lambda2, opts=None):
    """Minimize the regularized fusion objective; returns a FusionModel.

    Each iteration takes ``W <- soft_threshold(W - eta * grad, eta * lambda2)``,
    shrinking ``eta`` by ``backtrack`` until the full objective drops by at
    least ``armijo * ||dW||^2 / eta``. Accepted steps never increase the
    objective. The trial ``eta`` is the Barzilai-Borwein step (``step_rule="bb"``)
    or the last accepted one (``"carry"``).
    """
    opts = opts or SolverOptions()
    _check_lambdas(lambda1, lambda2)
    if isinstance(prior, PriorMatrix):
        V_arr, stream_order = prior.stacked, prior.stream_order
    else:
        V_arr = np.asarray(prior, dtype=np.float64)
        prior = stack_priors(np.split(V_arr, V_arr.shape[0] // V_arr.shape[1]))
        stream_order = prior.stream_order
    if hasattr(S, "stream_order") and tuple(S.stream_order) != tuple(stream_order):
        raise ScoreDataError(
            f"stream order {tuple(S.stream_order)} does not match prior order {tuple(stream_order)}"
        )
    W0 = np.array(V_arr, dtype=np.float64) if opts.init == "prior" else np.zeros_like(V_arr)
    W, S_arr, Y_arr, V = _check(W0, S, Y, V_arr)
    smooth = _Smooth(S_arr, Y_arr, V, lambda1)

    g, grad = smooth.value_grad(W)
    F = g + lambda2 * float(np.sum(np.abs(W)))
    if not math.isfinite(F):
        raise FusionError("objective is not finite at the starting point; check score scaling")
    trace = [F]
    eta = opts.step0
    converged = False
    it = 0
    quiet = 0
    prox = _backend.soft_threshold
    while it < opts.max_iters:
        while True:
            W_new = prox(W - eta * grad, eta * lambda2)
            D = W_new - W
            dd = float(np.sum(D * D))
            if dd == 0.0:
                break
            g_new, grad_new = smooth.value_grad(W_new)
            F_new = g_new + lambda2 * float(np.sum(np.abs(W_new)))
            if math.isfinite(F_new) and F_new <= F - opts.armijo * dd / eta:
                break
            eta *= opts.backtrack
            if eta < 1e-300:
                dd = 0.0
                break
        if dd == 0.0:
            converged = True
            break
        it += 1
        decrease = F - F_new
        W, F = W_new, F_new
        trace.append(F)
        # A single BB step can make little progress; demand a quiet streak.
        quiet = quiet + 1 if decrease <= opts.rel_tol * max(abs(F), 1e-300) else 0
        if quiet >= opts.patience:
            converged = True
            break
        if opts.step_rule == "bb":
            # Barzilai-Borwein trial step, capped at step0; backtracking still
            # enforces descent, so the trace stays monotone.
            dg = float(np.sum(D * (grad_new - grad)))
            eta = min(dd / dg, opts.step0) if dg > 0 else opts.step0
        grad = grad_new
    if not np.all(np.isfinite(W)):
        raise FusionError("weights became non-finite")
    report = FitReport(trace, it, converged, eta, float(np.mean(W == 0.0)))
    W.setflags(write=False)
    return FusionModel(W, float(lambda1), float(lambda2), prior, tuple(stream_order), report)


def predict(model, S, sample_ids=None):
    """Fused posteriors ``sigmoid(s_n . w_c)`` as a ScoreMatrix named ``fused``."""
    S_arr = _matrix(S, "S")
    if S_arr.shape[1] != model.W.shape[0]:
        raise ScoreDataError(
            f"scores have {S_arr.shape[1]} columns, model expects {model.W.shape[0]}"
        )
    z = S_arr @ model.W
    ez = np.exp(-np.abs(z))
    fused = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    if sample_ids is None:
        sample_ids = [str(i) for i in range(S_arr.shape[0])]
    return ScoreMatrix("fused", fused, sample_ids)


# -- model selection ------------------------------------------------------------

def score_predictions(pred, labels):
    """Single-label data is scored by accuracy, multi-label by mAP."""
    if labels.mode == SINGLE:
        return accuracy(pred, labels)
    return mean_ap(pred, labels).map


def _workers():
    try:
        return max(1, int(os.environ.get("FUSIONFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _fold_score(train, tr_idx, va_idx, lambda1, lambda2, opts, diagonal):
    part, held = train.subset(tr_idx), train.subset(va_idx)
    model = fit(part.stacked(), part.labels, estimate_prior(part, diagonal), lambda1, lambda2, opts)
    return score_predictions(predict(model, held.stacked()), held.labels)


def cross_validate(train, lambda1_grid=LAMBDA1_GRID, lambda2=LAMBDA2_DEFAULT, k=3, seed=0,
                   opts=None, diagonal=DIAGONAL_ACCURACY):
    """Pick ``lambda1`` by k-fold CV, then refit on all of ``train``.

    Each fold's prior is estimated from that fold's training part only. Ties go
    to the smaller ``lambda1``. Returns ``(best_lambda1, model)``; the per-value
    mean CV scores are kept on ``model.cv_scores``.
    """
    grid = sorted(float(v) for v in lambda1_grid)
    if not grid:
        raise ValueError("lambda1 grid is empty")
    folds = split_folds(train, k, seed)
    for tr_idx, va_idx in folds:
        if len(tr_idx) == 0 or len(va_idx) == 0:
            raise FusionError("degenerate fold")
    tasks = [(lam, tr, va) for lam in grid for tr, va in folds]

    def run(task):
        lam, tr, va = task
        return _fold_score(train, tr, va, lam, lambda2, opts, diagonal)

    if _workers() > 1:
        with ThreadPoolExecutor(_workers()) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    cv = {}
    for i, lam in enumerate(grid):
        cv[lam] = float(np.mean(results[i * len(folds):(i + 1) * len(folds)]))
    best = grid[0]
    for lam in grid[1:]:
        if cv[lam] > cv[best]:
            best = lam
    model = fit(train.stacked(), train.labels, estimate_prior(train, diagonal), best, lambda2, opts)
    model.cv_scores = cv
    return best, model


# -- persistence -------------------------------------------------------------

def model_to_dict(model):
    C = model.n_classes
    return {
        "stream_order": list(model.stream_order),
        "C": C,
        "M": model.n_streams,
        "lambda1": model.lambda1,
        "lambda2": model.lambda2,
        "W": np.asarray(model.W).tolist(),
        "prior_diagonal": model.prior.diagonal,
        "prior": model.prior.to_dict(),
    }


def model_from_dict(data):
    W = np.array(data["W"], dtype=np.float64)
    C, M = int(data["C"]), int(data["M"])
    if W.shape != (C * M, C):
        raise ScoreDataError(f"model W has shape {W.shape}, expected {(C * M, C)}")
    if "prior" in data:
        prior = PriorMatrix.from_dict(data["prior"])
    else:
        prior = stack_priors(np.zeros((M, C, C)), data["stream_order"],
                             data.get("prior_diagonal", DIAGONAL_ACCURACY))
    W.setflags(write=False)
    return FusionModel(W, float(data["lambda1"]), float(data["lambda2"]), prior,
                       tuple(data["stream_order"]))


def save_model(model, path, extra=None):
    data = model_to_dict(model)
    if model.fit_report is not None:
        data["fit_report"] = asdict(model.fit_report)
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
