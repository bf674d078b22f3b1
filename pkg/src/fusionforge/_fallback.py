"""Pure-Python/numpy twins of the routines in ``_kernels.pyx``."""

import math

import numpy as np

_MASK = (1 << 64) - 1
_TWO_M53 = 1.0 / 9007199254740992.0


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def _draws(state):
    s0, s1, s2, s3 = (int(v) for v in state)
    while True:
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        yield result, (s0, s1, s2, s3)


def xoshiro_uniform(state, out):
    gen = _draws(state)
    s = tuple(int(v) for v in state)
    for k in range(out.shape[0]):
        r, s = next(gen)
        out[k] = (r >> 11) * _TWO_M53
    state[:] = np.array(s, dtype=np.uint64)


def xoshiro_noise(state, out, power):
    gen = _draws(state)
    s = tuple(int(v) for v in state)
    for k in range(out.shape[0]):
        r, s = next(gen)
        u = (r >> 11) * _TWO_M53
        out[k] = math.pow(-math.log1p(-u), power)
    state[:] = np.array(s, dtype=np.uint64)


def logistic_loss_grad(S, Y, W, with_grad=True):
    sign = 1.0 - 2.0 * Y
    z = sign * (S @ W)
    loss = float(np.sum(np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))))
    if not with_grad:
        return loss, None
    ez = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return loss, S.T @ (sign * sig)


def soft_threshold(X, tau):
    shrunk = np.abs(X) - tau
    return np.where(shrunk > 0, np.copysign(shrunk, X), 0.0)


def _sigmoid(z):
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def lstm_layer_forward(X, Wx, Wh, P, b):
    """One LSTM layer over a (T, B, D) batch; gate blocks ordered i, f, c, o.

    Returns (hs, cs, gates): hs/cs are (T+1, B, H) with zero initial states,
    gates is (T, 4, B, H) holding activated i, f, g=tanh(.), o.
    """
    T, B, _ = X.shape
    H = Wh.shape[1]
    xproj = X @ Wx.T + b
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    gates = np.empty((T, 4, B, H))
    for t in range(T):
        a = xproj[t] + hs[t] @ Wh.T
        i = _sigmoid(a[:, :H] + P[0] * cs[t])
        f = _sigmoid(a[:, H:2 * H] + P[1] * cs[t])
        g = np.tanh(a[:, 2 * H:3 * H])
        c = f * cs[t] + i * g
        o = _sigmoid(a[:, 3 * H:] + P[2] * c)
        cs[t + 1] = c
        hs[t + 1] = o * np.tanh(c)
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3] = i, f, g, o
    return hs, cs, gates


def lstm_layer_backward(X, Wx, Wh, P, hs, cs, gates, dH):
    """Reverse pass of ``lstm_layer_forward``; ``dH`` is dLoss/dh_t, (T, B, H).

    Returns (dX, dWx, dWh, dP, db).
    """
    T, B, _ = X.shape
    H = Wh.shape[1]
    dA = np.empty((T, B, 4 * H))
    dP = np.zeros_like(P)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o = gates[t]
        c_prev, c = cs[t], cs[t + 1]
        tc = np.tanh(c)
        dh = dH[t] + dh_next
        dao = dh * tc * o * (1.0 - o)
        dc = dh * o * (1.0 - tc * tc) + dc_next + dao * P[2]
        dai = dc * g * i * (1.0 - i)
        daf = dc * c_prev * f * (1.0 - f)
        dag = dc * i * (1.0 - g * g)
        dc_next = dc * f + dai * P[0] + daf * P[1]
        da = dA[t]
        da[:, :H], da[:, H:2 * H], da[:, 2 * H:3 * H], da[:, 3 * H:] = dai, daf, dag, dao
        dh_next = da @ Wh
        dP[0] += np.sum(dai * c_prev, axis=0)
        dP[1] += np.sum(daf * c_prev, axis=0)
        dP[2] += np.sum(dao * c, axis=0)
    flat = dA.reshape(T * B, 4 * H)
    dX = (flat @ Wx).reshape(T, B, -1)
    dWx = flat.T @ X.reshape(T * B, -1)
    dWh = flat.T @ hs[:-1].reshape(T * B, H)
    db = flat.sum(axis=0)
    return dX, dWx, dWh, dP, db
