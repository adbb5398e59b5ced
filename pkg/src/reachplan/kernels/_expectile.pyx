# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled expectile kernels; same contracts as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport NAN, INFINITY

cnp.import_array()


def expectile_weights(u, double tau):
    cdef double[::1] uv = np.ascontiguousarray(u, dtype=np.float64).ravel()
    out = np.empty(uv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    for i in range(uv.shape[0]):
        ov[i] = (1.0 - tau) if uv[i] < 0.0 else tau
    return out.reshape(np.shape(u))


cdef double _expectile_sorted(double[::1] y, double[::1] w, Py_ssize_t s, Py_ssize_t e, double tau):
    cdef Py_ssize_t i, j, n = e - s
    cdef double tot_w = 0.0, tot_wy = 0.0
    for i in range(s, e):
        tot_w += w[i]
        tot_wy += w[i] * y[i]
    cdef double cum_w = 0.0, cum_wy = 0.0, den, m, left, right, last = NAN
    for j in range(n + 1):
        den = (1.0 - tau) * cum_w + tau * (tot_w - cum_w)
        if den > 0.0:
            m = ((1.0 - tau) * cum_wy + tau * (tot_wy - cum_wy)) / den
            left = y[s + j - 1] if j > 0 else -INFINITY
            right = y[s + j] if j < n else INFINITY
            if left <= m <= right:
                return m
            last = y[e - 1]
        if j < n:
            cum_w += w[s + j]
            cum_wy += w[s + j] * y[s + j]
    return last


def grouped_expectile(values, weights, group_ids, Py_ssize_t n_groups, double tau):
    y_all = np.asarray(values, dtype=np.float64)
    w_all = np.asarray(weights, dtype=np.float64)
    g_all = np.asarray(group_ids, dtype=np.int64)
    order = np.lexsort((y_all, g_all))
    cdef double[::1] y = np.ascontiguousarray(y_all[order])
    cdef double[::1] w = np.ascontiguousarray(w_all[order])
    cdef long long[::1] g = np.ascontiguousarray(g_all[order], dtype=np.int64)
    out = np.full(n_groups, np.nan)
    cdef double[::1] ov = out
    cdef Py_ssize_t n = y.shape[0], s = 0, e
    while s < n:
        e = s + 1
        while e < n and g[e] == g[s]:
            e += 1
        ov[g[s]] = _expectile_sorted(y, w, s, e, tau)
        s = e
    return out


def expectile_loss_grad(X, y, w, double tau, sample_weight=None):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], d = Xv.shape[1], i, k
    sw_arr = np.ones(n) if sample_weight is None else np.ascontiguousarray(sample_weight, dtype=np.float64)
    cdef double[::1] sw = sw_arr
    grad = np.zeros(d, dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double loss = 0.0, total = 0.0, pred, u, a, c
    for i in range(n):
        pred = 0.0
        for k in range(d):
            pred += Xv[i, k] * wv[k]
        u = yv[i] - pred
        a = (1.0 - tau) if u < 0.0 else tau
        loss += sw[i] * a * u * u
        total += sw[i]
        c = -2.0 * sw[i] * a * u
        for k in range(d):
            gv[k] += c * Xv[i, k]
    for k in range(d):
        gv[k] /= total
    return loss / total, grad
