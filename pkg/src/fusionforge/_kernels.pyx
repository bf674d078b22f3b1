# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: xoshiro256** draws and the fused logistic loss/gradient.

Every routine here has a drop-in twin in ``_fallback.py``. The PRNG routines
must stay bit-identical to the fallback; the loss routines agree to rounding.
"""

from libc.math cimport exp, log1p, pow, fabs
from libc.stdint cimport uint64_t

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t next_u64(uint64_t* s) nogil:
    cdef uint64_t result = rotl(s[1] * 5, 7) * 9
    cdef uint64_t t = s[1] << 17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = rotl(s[3], 45)
    return result


def xoshiro_uniform(cnp.uint64_t[::1] state, double[::1] out):
    """Fill ``out`` with doubles in [0, 1) and advance ``state`` in place."""
    cdef uint64_t s[4]
    cdef Py_ssize_t k
    for k in range(4):
        s[k] = state[k]
    with nogil:
        for k in range(out.shape[0]):
            out[k] = <double>(next_u64(s) >> 11) * TWO_M53
    for k in range(4):
        state[k] = s[k]


def xoshiro_noise(cnp.uint64_t[::1] state, double[::1] out, double power):
    """Fill ``out`` with ``E ** power`` for unit exponential draws ``E``."""
    cdef uint64_t s[4]
    cdef Py_ssize_t k
    cdef double u
    for k in range(4):
        s[k] = state[k]
    with nogil:
        for k in range(out.shape[0]):
            u = <double>(next_u64(s) >> 11) * TWO_M53
            out[k] = pow(-log1p(-u), power)
    for k in range(4):
        state[k] = s[k]


def logistic_loss_grad(const double[:, ::1] S, const double[:, ::1] Y,
                       const double[:, ::1] W, bint with_grad=True):
    """Sum of per-(n, c) logistic terms and, optionally, its gradient in W.

    Samples are reduced strictly left to right so results are reproducible.
    """
    cdef Py_ssize_t N = S.shape[0], K = S.shape[1], C = W.shape[1]
    cdef Py_ssize_t n, k, c
    cdef double z, sgn, e, s, loss = 0.0
    cdef double[::1] zrow = np.empty(C)
    grad_arr = np.zeros((K, C)) if with_grad else None
    cdef double[:, ::1] G
    if with_grad:
        G = grad_arr
    with nogil:
        for n in range(N):
            for c in range(C):
                zrow[c] = 0.0
            for k in range(K):
                s = S[n, k]
                for c in range(C):
                    zrow[c] += s * W[k, c]
            for c in range(C):
                sgn = 1.0 - 2.0 * Y[n, c]
                z = sgn * zrow[c]
                # softplus(z) = max(z, 0) + log1p(exp(-|z|)); one exp serves both
                e = exp(-fabs(z))
                if z > 0:
                    loss += z + log1p(e)
                    zrow[c] = sgn / (1.0 + e)
                else:
                    loss += log1p(e)
                    zrow[c] = sgn * e / (1.0 + e)
            if with_grad:
                for k in range(K):
                    s = S[n, k]
                    for c in range(C):
                        G[k, c] += zrow[c] * s
    return loss, grad_arr


def soft_threshold(const double[:, ::1] X, double tau):
    """Entrywise ``sign(x) * max(|x| - tau, 0)``."""
    cdef Py_ssize_t i, j
    cdef double x, a
    out_arr = np.empty((X.shape[0], X.shape[1]))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(X.shape[0]):
            for j in range(X.shape[1]):
                x = X[i, j]
                a = fabs(x) - tau
                if a > 0:
                    out[i, j] = a if x > 0 else -a
                else:
                    out[i, j] = 0.0
    return out_arr


from libc.math cimport expm1


cdef inline double sigm(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


cdef inline double ftanh(double z) nogil:
    # expm1 form keeps relative accuracy near 0 at half the cost of libm tanh
    cdef double e = expm1(-2.0 * fabs(z))
    cdef double r = -e / (2.0 + e)
    return r if z >= 0 else -r


def lstm_layer_forward(const double[:, :, ::1] X, const double[:, ::1] Wx,
                       const double[:, ::1] Wh, const double[:, ::1] P,
                       const double[::1] b):
    """One peephole LSTM layer over a (T, B, D) batch; see ``_fallback``."""
    cdef Py_ssize_t T = X.shape[0], B = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t G = Wx.shape[0], H = G // 4
    cdef Py_ssize_t t, n, j, r, k
    cdef double xj, cp, c, ig, fg, gg, og
    cdef double[:, ::1] WxT = np.ascontiguousarray(np.asarray(Wx).T)
    cdef double[:, ::1] WhT = np.ascontiguousarray(np.asarray(Wh).T)
    hs_arr = np.zeros((T + 1, B, H))
    cs_arr = np.zeros((T + 1, B, H))
    gates_arr = np.empty((T, 4, B, H))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef double[:, :, :, ::1] gates = gates_arr
    cdef double[::1] a_buf = np.empty(G)
    cdef double* a = &a_buf[0]
    cdef const double* w
    with nogil:
        for t in range(T):
            for n in range(B):
                for r in range(G):
                    a[r] = b[r]
                for j in range(D):
                    xj = X[t, n, j]
                    if xj != 0.0:
                        w = &WxT[j, 0]
                        for r in range(G):
                            a[r] += xj * w[r]
                for j in range(H):
                    xj = hs[t, n, j]
                    if xj != 0.0:
                        w = &WhT[j, 0]
                        for r in range(G):
                            a[r] += xj * w[r]
                for k in range(H):
                    cp = cs[t, n, k]
                    ig = sigm(a[k] + P[0, k] * cp)
                    fg = sigm(a[H + k] + P[1, k] * cp)
                    gg = ftanh(a[2 * H + k])
                    c = fg * cp + ig * gg
                    og = sigm(a[3 * H + k] + P[2, k] * c)
                    cs[t + 1, n, k] = c
                    hs[t + 1, n, k] = og * ftanh(c)
                    gates[t, 0, n, k] = ig
                    gates[t, 1, n, k] = fg
                    gates[t, 2, n, k] = gg
                    gates[t, 3, n, k] = og
    return hs_arr, cs_arr, gates_arr


def lstm_layer_backward(const double[:, :, ::1] X, const double[:, ::1] Wx,
                        const double[:, ::1] Wh, const double[:, ::1] P,
                        const double[:, :, ::1] hs, const double[:, :, ::1] cs,
                        const double[:, :, :, ::1] gates, const double[:, :, ::1] dH):
    """Reverse pass of ``lstm_layer_forward``; returns (dX, dWx, dWh, dP, db)."""
    cdef Py_ssize_t T = X.shape[0], B = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t G = Wx.shape[0], H = G // 4
    cdef Py_ssize_t t, n, j, r, k
    cdef double ig, fg, gg, og, cp, c, tc, dh, dc, dao, dai, daf, dag, dr
    dX_arr = np.zeros((T, B, D))
    dWx_arr = np.zeros((G, D))
    dWh_arr = np.zeros((G, H))
    dP_arr = np.zeros((3, H))
    db_arr = np.zeros(G)
    cdef double[:, :, ::1] dX = dX_arr
    cdef double[:, ::1] dWx = dWx_arr
    cdef double[:, ::1] dWh = dWh_arr
    cdef double[:, ::1] dP = dP_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dh_next = np.zeros((B, H))
    cdef double[:, ::1] dc_next = np.zeros((B, H))
    cdef double[::1] da_buf = np.empty(G)
    cdef double* da = &da_buf[0]
    cdef double* dhn
    cdef double* dwh
    cdef double* dwx
    cdef double* dxp
    cdef const double* w
    cdef const double* hp
    cdef const double* xp
    with nogil:
        for t in range(T - 1, -1, -1):
            for n in range(B):
                for k in range(H):
                    ig = gates[t, 0, n, k]
                    fg = gates[t, 1, n, k]
                    gg = gates[t, 2, n, k]
                    og = gates[t, 3, n, k]
                    cp = cs[t, n, k]
                    c = cs[t + 1, n, k]
                    tc = ftanh(c)
                    dh = dH[t, n, k] + dh_next[n, k]
                    dao = dh * tc * og * (1.0 - og)
                    dc = dh * og * (1.0 - tc * tc) + dc_next[n, k] + dao * P[2, k]
                    dai = dc * gg * ig * (1.0 - ig)
                    daf = dc * cp * fg * (1.0 - fg)
                    dag = dc * ig * (1.0 - gg * gg)
                    dc_next[n, k] = dc * fg + dai * P[0, k] + daf * P[1, k]
                    da[k] = dai
                    da[H + k] = daf
                    da[2 * H + k] = dag
                    da[3 * H + k] = dao
                    dP[0, k] += dai * cp
                    dP[1, k] += daf * cp
                    dP[2, k] += dao * c
                dhn = &dh_next[n, 0]
                hp = &hs[t, n, 0]
                xp = &X[t, n, 0]
                dxp = &dX[t, n, 0]
                for j in range(H):
                    dhn[j] = 0.0
                for r in range(G):
                    dr = da[r]
                    db[r] += dr
                    w = &Wh[r, 0]
                    dwh = &dWh[r, 0]
                    for j in range(H):
                        dhn[j] += dr * w[j]
                        dwh[j] += dr * hp[j]
                    w = &Wx[r, 0]
                    dwx = &dWx[r, 0]
                    for j in range(D):
                        dxp[j] += dr * w[j]
                        dwx[j] += dr * xp[j]
    return dX_arr, dWx_arr, dWh_arr, dP_arr, db_arr
