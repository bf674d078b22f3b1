"""Stacked peephole LSTM with a softmax head, exact BPTT, and a toy trainer.

Each layer computes, at step t,

    i = sigmoid(W_xi x + W_hi h' + w_ci * c' + b_i)
    f = sigmoid(W_xf x + W_hf h' + w_cf * c' + b_f)
    c = f * c' + i * tanh(W_xc x + W_hc h' + b_c)
    o = sigmoid(W_xo x + W_ho h' + w_co * c + b_o)
    h = o * tanh(c)

with ``h'``, ``c'`` the previous step's state and peephole weights ``w_c*``
acting elementwise. Layer ``l`` reads layer ``l-1``'s hidden states; the
class posterior comes from a softmax over the last layer's final ``h``.

Gate weights are stored stacked in the order (i, f, c, o): ``Wx`` is
``(4H, D)``, ``Wh`` is ``(4H, H)``, ``b`` is ``(4H,)`` and the peepholes ``P``
are ``(3, H)`` for (ci, cf, co). Named views such as ``W_xf`` are provided.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .rng import Xoshiro256

logger = logging.getLogger(__name__)

_GATES = ("i", "f", "c", "o")
_PEEPS = ("ci", "cf", "co")


class DivergenceError(RuntimeError):
    pass


@dataclass
class LstmLayerParams:
    Wx: np.ndarray
    Wh: np.ndarray
    P: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = self.Wh.shape[1]
        if self.Wh.shape != (4 * H, H):
            raise ValueError(f"Wh must be (4H, H), got {self.Wh.shape}")
        if self.Wx.ndim != 2 or self.Wx.shape[0] != 4 * H:
            raise ValueError(f"Wx must be (4H, D) with H={H}, got {self.Wx.shape}")
        if self.P.shape != (3, H) or self.b.shape != (4 * H,):
            raise ValueError("peephole or bias shape inconsistent with hidden size")

    @property
    def input_dim(self):
        return self.Wx.shape[1]

    @property
    def hidden_dim(self):
        return self.Wh.shape[1]

    def _gate(self, mat, name):
        k = _GATES.index(name)
        H = self.hidden_dim
        return mat[k * H:(k + 1) * H]

    def __getattr__(self, name):
        # W_xi, W_hc, b_o, w_cf, ... as views into the stacked storage
        if name.startswith("W_x") and name[3:] in _GATES:
            return self._gate(self.Wx, name[3:])
        if name.startswith("W_h") and name[3:] in _GATES:
            return self._gate(self.Wh, name[3:])
        if name.startswith("b_") and name[2:] in _GATES:
            return self._gate(self.b, name[2:])
        if name.startswith("w_") and name[2:] in _PEEPS:
            return self.P[_PEEPS.index(name[2:])]
        raise AttributeError(name)

    def arrays(self):
        return [self.Wx, self.Wh, self.P, self.b]


@dataclass
class LstmNetwork:
    layers: list
    head_U: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_dim != lower.hidden_dim:
                raise ValueError("layer dimensions do not chain")
        if self.head_U.shape[1] != self.layers[-1].hidden_dim:
            raise ValueError("head does not match the last layer's hidden size")
        if self.head_b.shape != (self.head_U.shape[0],):
            raise ValueError("head bias length must equal the class count")

    @property
    def n_classes(self):
        return self.head_U.shape[0]

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    def arrays(self):
        """Every parameter array, in a fixed order shared with gradients."""
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        return out + [self.head_U, self.head_b]

    def zeros_like(self):
        return LstmNetwork(
            [LstmLayerParams(*(np.zeros_like(a) for a in layer.arrays())) for layer in self.layers],
            np.zeros_like(self.head_U), np.zeros_like(self.head_b),
        )

    def copy(self):
        return LstmNetwork(
            [LstmLayerParams(*(a.copy() for a in layer.arrays())) for layer in self.layers],
            self.head_U.copy(), self.head_b.copy(),
        )

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": [layer.hidden_dim for layer in self.layers],
            "n_classes": self.n_classes,
            "layers": [
                {"Wx": l.Wx.tolist(), "Wh": l.Wh.tolist(), "P": l.P.tolist(), "b": l.b.tolist()}
                for l in self.layers
            ],
            "head_U": self.head_U.tolist(),
            "head_b": self.head_b.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        layers = [
            LstmLayerParams(*(np.array(l[k], dtype=np.float64) for k in ("Wx", "Wh", "P", "b")))
            for l in data["layers"]
        ]
        return cls(layers, np.array(data["head_U"], dtype=np.float64),
                   np.array(data["head_b"], dtype=np.float64))


@dataclass
class SequenceSample:
    inputs: np.ndarray
    label: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("a sequence needs T >= 1 input vectors")


def init_network(input_dim, hidden, n_classes, seed=0, scale=0.08, forget_bias=1.0):
    """Uniform(-scale, scale) weights, zero biases except the forget gate."""
    rng = np.random.default_rng(seed)
    layers = []
    d = input_dim
    for H in hidden:
        b = np.zeros(4 * H)
        b[H:2 * H] = forget_bias
        layers.append(LstmLayerParams(
            rng.uniform(-scale, scale, (4 * H, d)),
            rng.uniform(-scale, scale, (4 * H, H)),
            rng.uniform(-scale, scale, (3, H)),
            b,
        ))
        d = H
    return LstmNetwork(layers, rng.uniform(-scale, scale, (n_classes, d)), np.zeros(n_classes))


# -- single-step and head ---------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def lstm_step(params, x_t, prev):
    """One time step of one layer; ``prev`` is ``(h, c)``. Returns ``(h_t, c_t)``."""
    h_prev, c_prev = (np.asarray(v, dtype=np.float64) for v in prev)
    x_t = np.asarray(x_t, dtype=np.float64)
    H = params.hidden_dim
    if x_t.shape != (params.input_dim,) or h_prev.shape != (H,) or c_prev.shape != (H,):
        raise ValueError("lstm_step: dimension mismatch")
    a = params.Wx @ x_t + params.Wh @ h_prev + params.b
    i = sigmoid(a[:H] + params.P[0] * c_prev)
    f = sigmoid(a[H:2 * H] + params.P[1] * c_prev)
    c = f * c_prev + i * np.tanh(a[2 * H:3 * H])
    o = sigmoid(a[3 * H:] + params.P[2] * c)
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise DivergenceError("non-finite LSTM activation")
    return h, c


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax of non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- batched forward/backward -----------------------------------------------------

def _batch(seqs):
    if isinstance(seqs, SequenceSample):
        seqs = [seqs]
    T = seqs[0].inputs.shape[0]
    if any(s.inputs.shape != seqs[0].inputs.shape for s in seqs):
        raise ValueError("sequences in a batch must share length and input size")
    X = np.ascontiguousarray(np.stack([s.inputs for s in seqs], axis=1))  # (T, B, D)
    y = np.array([s.label for s in seqs], dtype=np.int64)
    return X, y, T


def _forward_batch(net, X):
    if X.shape[2] != net.input_dim:
        raise ValueError(f"input size {X.shape[2]} does not match network input {net.input_dim}")
    caches = []
    inp = X
    for layer in net.layers:
        hs, cs, gates = _backend.lstm_layer_forward(inp, layer.Wx, layer.Wh, layer.P, layer.b)
        caches.append((inp, hs, cs, gates))
        inp = np.ascontiguousarray(hs[1:])
    logits = inp[-1] @ net.head_U.T + net.head_b
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits (parameters or inputs hold inf/nan)")
    return caches, softmax(logits)


def forward(net, seq):
    """Run one sequence; returns (per-layer (hs, cs) state histories, final probs)."""
    X, _, _ = _batch(seq)
    caches, probs = _forward_batch(net, X)
    states = [(hs[:, 0], cs[:, 0]) for _, hs, cs, _ in caches]
    return states, probs[0]


def predict_proba(net, seqs):
    X, _, _ = _batch(list(seqs))
    return _forward_batch(net, X)[1]


def loss(net, seq):
    """Cross-entropy of the final-step posterior for the sequence's label."""
    _, probs = forward(net, seq)
    return float(-math.log(probs[seq.label])) if probs[seq.label] > 0 else math.inf


def _loss_and_grads(net, seqs):
    """Mean cross-entropy over ``seqs`` and its gradient (an LstmNetwork)."""
    X, y, T = _batch(seqs)
    B = len(y)
    caches, probs = _forward_batch(net, X)
    p_true = probs[np.arange(B), y]
    value = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    h_last = caches[-1][1][-1]
    grads = net.zeros_like()
    grads.head_U[...] = dlogits.T @ h_last
    grads.head_b[...] = dlogits.sum(axis=0)
    dH = np.zeros((T, B, net.layers[-1].hidden_dim))
    dH[-1] = dlogits @ net.head_U
    for layer, g, (inp, hs, cs, gates) in zip(net.layers[::-1], grads.layers[::-1], caches[::-1]):
        dX, dWx, dWh, dP, db = _backend.lstm_layer_backward(
            inp, layer.Wx, layer.Wh, layer.P, hs, cs, gates, dH)
        g.Wx[...], g.Wh[...], g.P[...], g.b[...] = dWx, dWh, dP, db
        dH = dX
    for a in grads.arrays():
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite gradient (exploding activations?)")
    return value, grads


def bptt_gradients(net, seq):
    """Exact gradient of ``loss(net, seq)`` for every parameter."""
    return _loss_and_grads(net, [seq])[1]


def numeric_gradients(net, seq, step=1e-5):
    """Central finite differences of ``loss`` for every parameter entry."""
    grads = net.zeros_like()
    probe = net.copy()
    for p, g in zip(probe.arrays(), grads.arrays()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss(probe, seq)
            flat[k] = orig - step
            down = loss(probe, seq)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
    return grads


def gradient_check(net, seq, step=1e-5, floor=1e-8):
    """Max relative error ``|a - n| / max(|a| + |n|, floor)`` over all entries."""
    exact = bptt_gradients(net, seq)
    approx = numeric_gradients(net, seq, step)
    worst = 0.0
    for a, n in zip(exact.arrays(), approx.arrays()):
        err = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


# -- toy task and training --------------------------------------------------------

def majority_task(n, seq_len=20, n_classes=4, seed=0):
    """Sequences of one-hot symbols labeled by their strictly most frequent symbol.

    Sequences whose top count is tied are redrawn.
    """
    rng = Xoshiro256(seed)
    eye = np.eye(n_classes)
    out = []
    while len(out) < n:
        sym = rng.below(n_classes, seq_len)
        counts = np.bincount(sym, minlength=n_classes)
        top = counts.max()
        if np.sum(counts == top) > 1:
            continue
        out.append(SequenceSample(eye[sym], int(np.argmax(counts))))
    return out


@dataclass
class TrainOptions:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    clip_norm: float = 5.0
    max_iters: int = 5000
    batch_size: int = 16
    seed: int = 0
    # stop once training accuracy reaches this; checked every check_every iterations
    target_accuracy: float = None
    check_every: int = 250


@dataclass
class TrainResult:
    net: LstmNetwork
    loss_trace: list = field(default_factory=list)
    stopped_early: bool = False


def train(net, samples, opts=None):
    """Mini-batch momentum SGD on the mean cross-entropy; returns a new network.

    Batches come from seeded epoch-wise shuffles; gradients are clipped to
    ``clip_norm`` in global norm. A non-finite loss aborts with DivergenceError.
    """
    opts = opts or TrainOptions()
    samples = list(samples)
    if not samples:
        raise ValueError("train needs at least one sample")
    net = net.copy()
    params = net.arrays()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(opts.seed)
    B = min(opts.batch_size, len(samples))
    order, pos = rng.permutation(len(samples)), 0
    trace = []
    for it in range(opts.max_iters):
        if pos + B > len(order):
            order, pos = rng.permutation(len(samples)), 0
        batch = [samples[k] for k in order[pos:pos + B]]
        pos += B
        value, grads = _loss_and_grads(net, batch)
        if not math.isfinite(value):
            raise DivergenceError(f"loss became non-finite at iteration {it}")
        trace.append(value)
        garrs = grads.arrays()
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in garrs))
        scale = opts.clip_norm / norm if opts.clip_norm and norm > opts.clip_norm else 1.0
        for p, v, g in zip(params, velocity, garrs):
            v *= opts.momentum
            v -= (opts.learning_rate * scale) * g
            p += v
        if (opts.target_accuracy is not None and (it + 1) % opts.check_every == 0
                and accuracy(net, samples) >= opts.target_accuracy):
            return TrainResult(net, trace, True)
    return TrainResult(net, trace)


def accuracy(net, samples):
    samples = list(samples)
    probs = predict_proba(net, samples)
    return float(np.mean(np.argmax(probs, axis=1) == np.array([s.label for s in samples])))


def save_network(net, path, extra=None):
    data = net.to_dict()
    if extra:
        data.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_network(path):
    with open(path, encoding="utf-8") as fh:
        return LstmNetwork.from_dict(json.load(fh))
