# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: layer norm, tanh-GELU and causal masked softmax.

Semantics must match tinyvlm.kernels.pyk exactly (up to floating-point
summation order); the backend is chosen once at import in
tinyvlm.kernels.__init__.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, tanh, exp

cnp.import_array()

cdef double GELU_K = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_C = 0.044715


def layernorm_fwd(double[:, ::1] x, double[::1] g, double[::1] b, double eps):
    """Row-wise layer norm. Returns (y, mean, rstd); mean/rstd feed the backward."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty((n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mean = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rstd = np.empty(n)
    cdef double[:, ::1] yv = y
    cdef double[::1] mv = mean, rv = rstd
    cdef double s, mu, var, t, r
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        var = 0.0
        for j in range(d):
            t = x[i, j] - mu
            var += t * t
        r = 1.0 / sqrt(var / d + eps)
        mv[i] = mu
        rv[i] = r
        for j in range(d):
            yv[i, j] = (x[i, j] - mu) * r * g[j] + b[j]
    return y, mean, rstd


def layernorm_bwd(double[:, ::1] x, double[::1] g, double[::1] mean,
                  double[::1] rstd, double[:, ::1] dy):
    """Backward of layernorm_fwd. Returns (dx, dg, db)."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dg = np.zeros(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db = np.zeros(d)
    cdef double[:, ::1] dxv = dx
    cdef double[::1] dgv = dg, dbv = db
    cdef double mu, r, xh, dxh, c1, c2
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        c1 = 0.0
        c2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxh = dy[i, j] * g[j]
            c1 += dxh
            c2 += dxh * xh
            dgv[j] += dy[i, j] * xh
            dbv[j] += dy[i, j]
        c1 /= d
        c2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxv[i, j] = r * (dy[i, j] * g[j] - c1 - xh * c2)
    return dx, dg, db


def gelu_fwd(double[::1] x):
    """Elementwise tanh-approximation GELU on a flat array."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y = np.empty(n)
    cdef double[::1] yv = y
    cdef double v
    for i in range(n):
        v = x[i]
        yv[i] = 0.5 * v * (1.0 + tanh(GELU_K * (v + GELU_C * v * v * v)))
    return y


def gelu_bwd(double[::1] x, double[::1] dy):
    """dx for y = gelu(x) given upstream dy (flat arrays)."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dx = np.empty(n)
    cdef double[::1] dxv = dx
    cdef double v, u, th, sech2, du
    for i in range(n):
        v = x[i]
        u = GELU_K * (v + GELU_C * v * v * v)
        th = tanh(u)
        sech2 = 1.0 - th * th
        du = GELU_K * (1.0 + 3.0 * GELU_C * v * v)
        dxv[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du)
    return dx


def softmax_causal_fwd(double[:, :, :, ::1] scores, cnp.uint8_t[:, ::1] key_ok):
    """Softmax over the last axis restricted to keys j <= t with key_ok[b, j].

    Disallowed entries of the result are exactly 0. Every row must have at
    least one allowed key (position 0 is never padding in practice).
    """
    cdef Py_ssize_t B = scores.shape[0], H = scores.shape[1], T = scores.shape[2]
    cdef Py_ssize_t b, h, t, j
    cdef cnp.ndarray[cnp.float64_t, ndim=4] probs = np.zeros((B, H, T, T))
    cdef double[:, :, :, ::1] pv = probs
    cdef double m, s, e
    for b in range(B):
        for h in range(H):
            for t in range(T):
                m = -1e300
                for j in range(t + 1):
                    if key_ok[b, j] and scores[b, h, t, j] > m:
                        m = scores[b, h, t, j]
                s = 0.0
                for j in range(t + 1):
                    if key_ok[b, j]:
                        e = exp(scores[b, h, t, j] - m)
                        pv[b, h, t, j] = e
                        s += e
                for j in range(t + 1):
                    if key_ok[b, j]:
                        pv[b, h, t, j] /= s
    return probs


def softmax_bwd(double[:, :, :, ::1] probs, double[:, :, :, ::1] dprobs):
    """dscores for the masked softmax; masked entries stay exactly 0."""
    cdef Py_ssize_t B = probs.shape[0], H = probs.shape[1], T = probs.shape[2]
    cdef Py_ssize_t b, h, t, j
    cdef cnp.ndarray[cnp.float64_t, ndim=4] ds = np.empty((B, H, T, T))
    cdef double[:, :, :, ::1] dv = ds
    cdef double dot
    for b in range(B):
        for h in range(H):
            for t in range(T):
                dot = 0.0
                for j in range(T):
                    dot += probs[b, h, t, j] * dprobs[b, h, t, j]
                for j in range(T):
                    dv[b, h, t, j] = probs[b, h, t, j] * (dprobs[b, h, t, j] - dot)
    return ds
