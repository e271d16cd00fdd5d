# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled transducer lattice forward-backward kernels (blank = 0)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lse2(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def forward_backward(const double[:, :, ::1] log_probs, const long[::1] labels):
    """Return (alpha, beta, log_likelihood) log-space tables of shape (T, U+1)."""
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t U1 = log_probs.shape[1]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u
    alpha_np = np.empty((T, U1), dtype=np.float64)
    beta_np = np.empty((T, U1), dtype=np.float64)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef double no_blank, no_emit
    with nogil:
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    alpha[0, 0] = 0.0
                    continue
                no_blank = -INFINITY
                no_emit = -INFINITY
                if t > 0:
                    no_blank = alpha[t - 1, u] + log_probs[t - 1, u, 0]
                if u > 0:
                    no_emit = alpha[t, u - 1] + log_probs[t, u - 1, labels[u - 1]]
                alpha[t, u] = _lse2(no_blank, no_emit)
        for t in range(T - 1, -1, -1):
            for u in range(U, -1, -1):
                if t == T - 1 and u == U:
                    beta[t, u] = log_probs[t, u, 0]
                    continue
                no_blank = -INFINITY
                no_emit = -INFINITY
                if t < T - 1:
                    no_blank = beta[t + 1, u] + log_probs[t, u, 0]
                if u < U:
                    no_emit = beta[t, u + 1] + log_probs[t, u, labels[u]]
                beta[t, u] = _lse2(no_blank, no_emit)
    return alpha_np, beta_np, beta[0, 0]


def logit_gradient(const double[:, :, ::1] log_probs, const long[::1] labels,
                   const double[:, ::1] alpha, const double[:, ::1] beta, double loglik):
    """d(-log P)/d(logits) where log_probs = log_softmax(logits)."""
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t U1 = log_probs.shape[1]
    cdef Py_ssize_t V = log_probs.shape[2]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u, k
    grad_np = np.empty((T, U1, V), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_np
    cdef double occ, base
    with nogil:
        for t in range(T):
            for u in range(U1):
                base = alpha[t, u] - loglik
                occ = exp(base + beta[t, u])
                for k in range(V):
                    grad[t, u, k] = occ * exp(log_probs[t, u, k])
                if t < T - 1:
                    grad[t, u, 0] -= exp(base + log_probs[t, u, 0] + beta[t + 1, u])
                elif u == U:
                    grad[t, u, 0] -= exp(base + log_probs[t, u, 0])
                if u < U:
                    grad[t, u, labels[u]] -= exp(base + log_probs[t, u, labels[u]] + beta[t, u + 1])
    return grad_np
