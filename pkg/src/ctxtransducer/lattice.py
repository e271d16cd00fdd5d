"""Transducer output-lattice math: loss, gradient, brute-force oracle, distillation.

A lattice holds log-probabilities of shape ``(T, U + 1, V)`` for one segment.
Node ``(t, u)`` means ``t`` frames consumed and ``u`` labels emitted; blank
(index 0) moves to ``(t + 1, u)`` and label ``y[u]`` moves to ``(t, u + 1)``.
A path ends with a blank from ``(T - 1, U)``.

The forward-backward kernels come from the compiled extension when it is
importable and from a numpy implementation otherwise; ``BACKEND`` names the
active one and :func:`use_backend` switches explicitly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _lattice_py
from .autodiff import Tensor, log_softmax, make_op

try:
    from . import _lattice_ext
except ImportError:  # pragma: no cover - depends on the build
    _lattice_ext = None

BLANK = 0
PATH_LIMIT = 1_000_000
DISTILL_FLOOR = 1e-12
NORMALISATION_TOL = 1e-10
DISTILL_MODES = ("collapsed3", "full")

_KERNELS = {"python": _lattice_py}
if _lattice_ext is not None:
    _KERNELS["cython"] = _lattice_ext
BACKEND = "cython" if _lattice_ext is not None else "python"


def available_backends() -> list[str]:
    return list(_KERNELS)


def use_backend(name: str) -> None:
    global BACKEND
    if name not in _KERNELS:
        raise ValueError(f"lattice backend {name!r} unavailable; have {available_backends()}")
    BACKEND = name


def _kernel():
    return _KERNELS[BACKEND]


class LatticeError(ValueError):
    pass


class PathLimitError(LatticeError):
    pass


@dataclass(frozen=True)
class LatticeTensor:
    log_probs: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        lp = np.ascontiguousarray(self.log_probs, dtype=np.float64)
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if lp.ndim != 3:
            raise LatticeError(f"log_probs must be (T, U+1, V), got shape {lp.shape}")
        T, U1, V = lp.shape
        if T < 1:
            raise LatticeError("lattice needs T >= 1")
        if U1 != len(self.labels) + 1:
            raise LatticeError(f"lattice has {U1} label rows for {len(self.labels)} labels")
        bad = [y for y in self.labels if not 1 <= y < V]
        if bad:
            raise LatticeError(f"label ids {bad} outside vocabulary [1, {V - 1}]")
        err = self.max_normalisation_error()
        if not err <= NORMALISATION_TOL:
            raise LatticeError(f"node distributions are not normalised (max |logsumexp| = {err:.3e})")

    @classmethod
    def from_logits(cls, logits, labels: Sequence[int]) -> "LatticeTensor":
        return cls(log_softmax(np.asarray(logits, dtype=np.float64)), tuple(labels))

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return len(self.labels)

    @property
    def V(self) -> int:
        return self.log_probs.shape[2]

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def max_normalisation_error(self) -> float:
        lp = self.log_probs
        peak = lp.max(axis=2, keepdims=True)
        lse = peak[..., 0] + np.log(np.exp(lp - peak).sum(axis=2))
        return float(np.max(np.abs(lse)))


@dataclass(frozen=True)
class AlphaBetaTables:
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float


def forward_backward(lattice: LatticeTensor) -> AlphaBetaTables:
    alpha, beta, loglik = _kernel().forward_backward(lattice.log_probs, lattice.label_array())
    return AlphaBetaTables(alpha, beta, float(loglik))


def rnnt_loss(lattice: LatticeTensor) -> tuple[float, AlphaBetaTables]:
    """Negative log-likelihood of the label sequence over all alignments."""
    tables = forward_backward(lattice)
    return -tables.log_likelihood, tables


def rnnt_grad(lattice: LatticeTensor, tables: AlphaBetaTables | None = None) -> np.ndarray:
    """Gradient of :func:`rnnt_loss` w.r.t. the pre-softmax logits."""
    if tables is None:
        tables = forward_backward(lattice)
    return _kernel().logit_gradient(lattice.log_probs, lattice.label_array(), tables.alpha, tables.beta, tables.log_likelihood)


def path_count(T: int, U: int) -> int:
    return math.comb(T - 1 + U, U)


def rnnt_loss_bruteforce(lattice: LatticeTensor, return_count: bool = False):
    """Enumerate every monotonic alignment path and sum their probabilities.

    Independent of the forward-backward kernels; refuses lattices with more
    than ``PATH_LIMIT`` paths.
    """
    T, U = lattice.T, lattice.U
    n_paths = path_count(T, U)
    if n_paths > PATH_LIMIT:
        raise PathLimitError(f"{n_paths} alignment paths exceed the brute-force bound of {PATH_LIMIT}")
    lp = lattice.log_probs
    labels = lattice.labels
    moves = T - 1 + U
    path_scores = []
    for emit_at in itertools.combinations(range(moves), U):
        emit_steps = set(emit_at)
        t = u = 0
        score = 0.0
        for step in range(moves):
            if step in emit_steps:
                score += lp[t, u, labels[u]]
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        score += lp[T - 1, U, BLANK]
        path_scores.append(score)
    peak = max(path_scores)
    loss = -(peak + math.log(math.fsum(math.exp(s - peak) for s in path_scores)))
    return (loss, len(path_scores)) if return_count else loss


# ---------------------------------------------------------------------------
# distillation


def _collapsed(log_probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Collapse each node to log-masses of (next label, blank, remainder).

    The last row has no next label; its first column is -inf.
    """
    T, U1, V = log_probs.shape
    U = U1 - 1
    rows = np.arange(U)
    out = np.full((T, U1, 3), -np.inf)
    out[:, :, 1] = log_probs[:, :, BLANK]
    rest = log_probs.copy()
    rest[:, :, BLANK] = -np.inf
    if U:
        out[:, :U, 0] = log_probs[:, rows, labels]
        rest[:, rows, labels] = -np.inf
    peak = np.max(rest, axis=2, keepdims=True)
    finite = np.isfinite(peak)
    shift = np.where(finite, peak, 0.0)
    with np.errstate(divide="ignore"):
        out[:, :, 2] = np.where(finite[:, :, 0], shift[:, :, 0] + np.log(np.sum(np.exp(rest - shift), axis=2)), -np.inf)
    return out


def _check_pair(teacher_lp: np.ndarray, student_lp: np.ndarray, t_labels, s_labels) -> None:
    if teacher_lp.shape != student_lp.shape:
        raise LatticeError(f"teacher/student lattice shapes differ: {teacher_lp.shape} vs {student_lp.shape}")
    if tuple(t_labels) != tuple(s_labels):
        raise LatticeError("teacher/student label sequences differ")


def _distill_terms(teacher_lp: np.ndarray, student_lp: np.ndarray, labels: np.ndarray, mode: str):
    """Return (loss, d loss / d student logits)."""
    student_p = np.exp(student_lp)
    if mode == "full":
        teacher_p = np.exp(teacher_lp)
        loss = float(np.sum(teacher_p * (teacher_lp - student_lp)))
        grad = student_p * teacher_p.sum(axis=2, keepdims=True) - teacher_p
        return loss, grad
    if mode != "collapsed3":
        raise LatticeError(f"unknown distillation mode {mode!r}; expected one of {DISTILL_MODES}")
    t_c = _collapsed(teacher_lp, labels)
    s_c = _collapsed(student_lp, labels)
    t_p = np.exp(t_c)
    live = t_p > 0
    floored = s_c < math.log(DISTILL_FLOOR)
    s_log = np.maximum(s_c, math.log(DISTILL_FLOOR))
    with np.errstate(invalid="ignore"):
        loss = float(np.sum(np.where(live, t_p * (t_c - s_log), 0.0)))

    # d/dz_k = s_k * sum_{c active} pT_c - pT_{c(k)} s_k / pS_{c(k)}
    active = live & ~floored
    weight = np.where(active, t_p, 0.0)
    ratio = np.where(active, t_p * np.exp(-np.where(active, s_c, 0.0)), 0.0)
    T, U1, V = student_lp.shape
    U = U1 - 1
    per_symbol = np.broadcast_to(ratio[:, :, 2:3], (T, U1, V)).copy()
    per_symbol[:, :, BLANK] = ratio[:, :, 1]
    if U:
        rows = np.arange(U)
        per_symbol[:, rows, labels] = ratio[:, :U, 0]
    grad = student_p * (weight.sum(axis=2, keepdims=True) - per_symbol)
    return loss, grad


def lattice_distillation(teacher: LatticeTensor, student: LatticeTensor, mode: str = "collapsed3") -> float:
    """Sum over lattice nodes of KL(teacher || student) node distributions."""
    _check_pair(teacher.log_probs, student.log_probs, teacher.labels, student.labels)
    loss, _ = _distill_terms(teacher.log_probs, student.log_probs, teacher.label_array(), mode)
    return loss


def lattice_distillation_grad(teacher: LatticeTensor, student: LatticeTensor, mode: str = "collapsed3") -> np.ndarray:
    """Gradient of :func:`lattice_distillation` w.r.t. the student logits."""
    _check_pair(teacher.log_probs, student.log_probs, teacher.labels, student.labels)
    return _distill_terms(teacher.log_probs, student.log_probs, teacher.label_array(), mode)[1]


# ---------------------------------------------------------------------------
# autodiff ops


def transducer_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Differentiable RNN-T loss of a ``(T, U + 1, V)`` logit tensor."""
    lattice = LatticeTensor(log_softmax(logits.data), tuple(labels))
    loss, tables = rnnt_loss(lattice)
    grad = rnnt_grad(lattice, tables) if logits.requires_grad else None
    return make_op(np.asarray(loss), (logits,), lambda g: (g * grad,), "rnnt_loss")


def distillation_loss(teacher_logits, student_logits: Tensor, labels: Sequence[int], mode: str = "collapsed3") -> Tensor:
    """Differentiable lattice distillation; the teacher side is a constant."""
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    teacher_lp = log_softmax(t_data)
    student_lp = log_softmax(student_logits.data)
    _check_pair(teacher_lp, student_lp, labels, labels)
    loss, grad = _distill_terms(teacher_lp, student_lp, np.asarray(labels, dtype=np.int64), mode)
    return make_op(np.asarray(loss), (student_logits,), lambda g: (g * grad,), "lattice_distillation")
