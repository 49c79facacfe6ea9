# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled training hot kernels.

Same interface as ``sst._kernels_py``: forward, softmax_xent, backward,
sgd_update.  The loops are fused per batch, which beats the numpy backend at
the small layer widths and batch sizes this package trains at.  Accumulation
order is plain row-major, so results differ from the BLAS-backed numpy
backend in the last bits; elementwise operations match it exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND = "cython"


cdef void _affine(const double[:, ::1] a, const double[:, ::1] w, const double[::1] b,
                  double[:, ::1] out, bint relu) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = w.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double coef
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j]
        for p in range(k):
            coef = a[i, p]
            if coef != 0.0:
                for j in range(m):
                    out[i, j] += coef * w[p, j]
        if relu:
            for j in range(m):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0


def forward(x, weights, biases, keep_hidden):
    """Forward pass; returns (logits, hidden activations if requested)."""
    cdef Py_ssize_t last = len(weights) - 1
    cdef Py_ssize_t i
    hidden = []
    a = np.ascontiguousarray(x, dtype=np.float64)
    for i in range(len(weights)):
        out = np.empty((a.shape[0], weights[i].shape[1]), dtype=np.float64)
        _affine(a, weights[i], biases[i], out, i < last)
        a = out
        if i < last and keep_hidden:
            hidden.append(a)
    return a, hidden


def softmax_xent(logits, labels):
    """Summed cross-entropy and unscaled gradient (softmax - onehot)."""
    cdef const double[:, ::1] lg = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const long[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = lg.shape[0], c = lg.shape[1]
    grad_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t i, j
    cdef double m, se, loss = 0.0
    with nogil:
        for i in range(n):
            m = lg[i, 0]
            for j in range(1, c):
                if lg[i, j] > m:
                    m = lg[i, j]
            se = 0.0
            for j in range(c):
                grad[i, j] = exp(lg[i, j] - m)
                se += grad[i, j]
            loss += m + log(se) - lg[i, y[i]]
            for j in range(c):
                grad[i, j] /= se
            grad[i, y[i]] -= 1.0
    return loss, grad_arr


def backward(x, weights, hidden, dlogits):
    """Backpropagation; returns per-layer (dws, dbs) lists."""
    cdef Py_ssize_t nlayers = len(weights)
    cdef Py_ssize_t l
    dws = [None] * nlayers
    dbs = [None] * nlayers
    x = np.ascontiguousarray(x, dtype=np.float64)
    delta = np.ascontiguousarray(dlogits, dtype=np.float64)
    for l in range(nlayers - 1, -1, -1):
        a_prev = x if l == 0 else hidden[l - 1]
        dw = np.zeros((weights[l].shape[0], weights[l].shape[1]), dtype=np.float64)
        db = np.zeros(weights[l].shape[1], dtype=np.float64)
        if l > 0:
            nxt = np.empty((delta.shape[0], weights[l].shape[0]), dtype=np.float64)
            _backward_layer(a_prev, weights[l], delta, dw, db, nxt, 1)
            delta = nxt
        else:
            _backward_layer(a_prev, weights[l], delta, dw, db, None, 0)
        dws[l] = dw
        dbs[l] = db
    return dws, dbs


cdef void _backward_layer(const double[:, ::1] a_prev, const double[:, ::1] w,
                          const double[:, ::1] delta, double[:, ::1] dw,
                          double[::1] db, double[:, ::1] dprev,
                          bint want_prev) noexcept nogil:
    cdef Py_ssize_t n = delta.shape[0], m = delta.shape[1], k = w.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double coef, acc
    for i in range(n):
        for p in range(k):
            coef = a_prev[i, p]
            if coef != 0.0:
                for j in range(m):
                    dw[p, j] += coef * delta[i, j]
        for j in range(m):
            db[j] += delta[i, j]
        if want_prev:
            for p in range(k):
                if a_prev[i, p] > 0.0:
                    acc = 0.0
                    for j in range(m):
                        acc += delta[i, j] * w[p, j]
                    dprev[i, p] = acc
                else:
                    dprev[i, p] = 0.0


def sgd_update(weights, biases, vel_w, vel_b, dws, dbs, lr, momentum, weight_decay):
    """v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v (in place)."""
    cdef double clr = lr, mu = momentum, wd = weight_decay
    for w, v, g in zip(weights, vel_w, dws):
        _update(w, v, g, clr, mu, wd)
    for b, v, g in zip(biases, vel_b, dbs):
        _update_vec(b, v, g, clr, mu, wd)


cdef void _update(double[:, ::1] w, double[:, ::1] v, const double[:, ::1] g,
                  double lr, double mu, double wd) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            v[i, j] = mu * v[i, j] + (g[i, j] + wd * w[i, j])
            w[i, j] -= lr * v[i, j]


cdef void _update_vec(double[::1] w, double[::1] v, const double[::1] g,
                      double lr, double mu, double wd) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(w.shape[0]):
        v[i] = mu * v[i] + (g[i] + wd * w[i])
        w[i] -= lr * v[i]
