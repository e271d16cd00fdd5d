"""Pure numpy fallback for the transducer lattice kernels.

Same contract as the compiled extension.  The recursions are evaluated along
anti-diagonals ``t + u = n`` so each step is one vectorised update.
"""

import numpy as np


def _diagonal(n: int, T: int, U1: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(max(0, n - U1 + 1), min(n, T - 1) + 1)
    return t, n - t


def forward_backward(log_probs: np.ndarray, labels: np.ndarray):
    T, U1, _ = log_probs.shape
    U = U1 - 1
    labels = np.asarray(labels, dtype=np.intp)
    blank = log_probs[:, :, 0]
    emit = np.full((T, U1), -np.inf)
    if U:
        emit[:, :U] = np.take_along_axis(log_probs[:, :U, :], labels[None, :, None], axis=2)[:, :, 0]

    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for n in range(1, T + U):
        t, u = _diagonal(n, T, U1)
        from_t = np.where(t > 0, alpha[t - 1, u] + blank[t - 1, u], -np.inf)
        from_u = np.where(u > 0, alpha[t, u - 1] + emit[t, u - 1], -np.inf)
        alpha[t, u] = np.logaddexp(from_t, from_u)

    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U] = blank[T - 1, U]
    for n in range(T + U - 2, -1, -1):
        t, u = _diagonal(n, T, U1)
        tn = np.minimum(t + 1, T - 1)
        un = np.minimum(u + 1, U)
        to_t = np.where(t < T - 1, beta[tn, u] + blank[t, u], -np.inf)
        to_u = np.where(u < U, beta[t, un] + emit[t, u], -np.inf)
        beta[t, u] = np.logaddexp(to_t, to_u)
    return alpha, beta, float(beta[0, 0])


def logit_gradient(log_probs, labels, alpha, beta, loglik):
    T, U1, _ = log_probs.shape
    U = U1 - 1
    labels = np.asarray(labels, dtype=np.intp)
    base = alpha - loglik
    grad = np.exp(base + beta)[:, :, None] * np.exp(log_probs)
    grad[:-1, :, 0] -= np.exp(base[:-1] + log_probs[:-1, :, 0] + beta[1:])
    grad[T - 1, U, 0] -= np.exp(base[T - 1, U] + log_probs[T - 1, U, 0])
    if U:
        rows = np.arange(U)
        emit = log_probs[:, rows, labels]
        grad[:, rows, labels] -= np.exp(base[:, :U] + emit + beta[:, 1:])
    return grad
