"""Compiled inner loops: the stacked GRU sequence op and wide elementwise maps.

Work splits over independent elements/cells, and every output element is
computed in a fixed sequential order: results are bit-identical across
thread counts (fastmath stays off for IEEE ordering).
"""

import math

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(fn):
            return fn

        return deco

    prange = range


@njit(parallel=True, fastmath=False, cache=True)
def tanh_forward(x, out):
    for i in prange(x.size):
        out[i] = math.tanh(x[i])


@njit(parallel=True, fastmath=False, cache=True)
def sigmoid_forward(x, out):
    for i in prange(x.size):
        out[i] = 1.0 / (1.0 + math.exp(-x[i]))


@njit(parallel=True, fastmath=False, cache=True)
def saturating_backward(g, out, sign, out_grad):
    """d(tanh)=1-y^2 (sign=1) and d(sigmoid)=y(1-y) (sign=0) in one pass."""
    for i in prange(g.size):
        y = out[i]
        if sign == 1:
            out_grad[i] = g[i] * (1.0 - y * y)
        else:
            out_grad[i] = g[i] * (y * (1.0 - y))


@njit(parallel=True, fastmath=False, cache=True)
def gru_seq_forward(X, H0, Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh, Hs, Zs, Rs, Cs):
    # inner loops run over the contiguous output axis so they vectorize;
    # accumulation order per output element is fixed (k ascending)
    T, B, d = X.shape
    H = H0.shape[1]
    for b in prange(B):
        h = np.empty(H)
        az = np.empty(H)
        ar = np.empty(H)
        ac = np.empty(H)
        for o in range(H):
            h[o] = H0[b, o]
        for t in range(T):
            for o in range(H):
                az[o] = bz[b, o]
                ar[o] = br[b, o]
                ac[o] = bh[b, o]
            for k in range(d):
                xk = X[t, b, k]
                for o in range(H):
                    az[o] += xk * Wz[b, k, o]
                    ar[o] += xk * Wr[b, k, o]
                    ac[o] += xk * Wh[b, k, o]
            for k in range(H):
                hk = h[k]
                for o in range(H):
                    az[o] += hk * Uz[b, k, o]
                    ar[o] += hk * Ur[b, k, o]
            for o in range(H):
                Zs[t, b, o] = 1.0 / (1.0 + math.exp(-az[o]))
                Rs[t, b, o] = 1.0 / (1.0 + math.exp(-ar[o]))
            for k in range(H):
                rh = Rs[t, b, k] * h[k]
                for o in range(H):
                    ac[o] += rh * Uh[b, k, o]
            for o in range(H):
                c = math.tanh(ac[o])
                Cs[t, b, o] = c
                hn = Zs[t, b, o] * h[o] + (1.0 - Zs[t, b, o]) * c
                Hs[t, b, o] = hn
                h[o] = hn


@njit(parallel=True, fastmath=False, cache=True)
def gru_seq_backward(X, H0, Wz, Uz, Wr, Ur, Wh, Uh, Zs, Rs, Cs, Hs, G,
                     dX, dH0, dWz, dUz, dbz, dWr, dUr, dbr, dWh, dUh, dbh):
    T, B, d = X.shape
    H = H0.shape[1]
    for b in prange(B):
        dh = np.zeros(H)
        hp = np.empty(H)
        dz = np.empty(H)
        d_ac = np.empty(H)
        d_az = np.empty(H)
        d_ar = np.empty(H)
        for t in range(T - 1, -1, -1):
            for o in range(H):
                hp[o] = Hs[t - 1, b, o] if t > 0 else H0[b, o]
            for o in range(H):
                gt = G[t, b, o] + dh[o]
                z = Zs[t, b, o]
                c = Cs[t, b, o]
                dz[o] = gt * (hp[o] - c)
                d_ac[o] = (gt * (1.0 - z)) * (1.0 - c * c)
                dh[o] = gt * z
            for k in range(H):
                drh = 0.0
                for o in range(H):
                    drh += d_ac[o] * Uh[b, k, o]
                r = Rs[t, b, k]
                dh[k] += drh * r
                d_ar[k] = (drh * hp[k]) * r * (1.0 - r)
            for o in range(H):
                z = Zs[t, b, o]
                d_az[o] = dz[o] * z * (1.0 - z)
            for k in range(H):
                acc = 0.0
                for o in range(H):
                    acc += d_az[o] * Uz[b, k, o] + d_ar[o] * Ur[b, k, o]
                dh[k] += acc
            for k in range(d):
                xk = X[t, b, k]
                accx = 0.0
                for o in range(H):
                    dWz[b, k, o] += xk * d_az[o]
                    dWr[b, k, o] += xk * d_ar[o]
                    dWh[b, k, o] += xk * d_ac[o]
                    accx += (d_az[o] * Wz[b, k, o] + d_ar[o] * Wr[b, k, o]
                             + d_ac[o] * Wh[b, k, o])
                dX[t, b, k] = accx
            for k in range(H):
                hk = hp[k]
                rh = Rs[t, b, k] * hk
                for o in range(H):
                    dUz[b, k, o] += hk * d_az[o]
                    dUr[b, k, o] += hk * d_ar[o]
                    dUh[b, k, o] += rh * d_ac[o]
            for o in range(H):
                dbz[b, o] += d_az[o]
                dbr[b, o] += d_ar[o]
                dbh[b, o] += d_ac[o]
        for o in range(H):
            dH0[b, o] = dh[o]
