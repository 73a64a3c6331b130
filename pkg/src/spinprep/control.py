"""Losses, exact schedule gradients and the Adam update.

Gradients come from one forward sweep (states and slice eigendecompositions
are stored) and one backward sweep that propagates the target through the
adjoint slice unitaries. The derivative of each slice exponential is taken in
the eigenbasis of the slice Hamiltonian with the divided-difference kernel of
exp(-i tau lambda).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .dynamics import ControlSchedule, EigenData, propagate, slice_eigens
from .hilbert import ModelSpec, site_tables

FIDELITY_CLAMP = 1e-12
FIDELITY_SLACK = 1e-9


class LossKind(str, Enum):
    NLF = "nlf"
    ONE_MINUS_F = "one_minus_f"
    GATE_FROBENIUS = "gate_frobenius"

    @property
    def is_gate(self) -> bool:
        return self is LossKind.GATE_FROBENIUS


class NumericalError(ArithmeticError):
    def __init__(self, message: str, slice_index: int | None = None):
        super().__init__(message if slice_index is None else f"{message} (slice {slice_index})")
        self.slice_index = slice_index


def phase_aligned_distance(g: np.ndarray, target: np.ndarray) -> float:
    """min over phi of ||exp(i phi) G - G_tar||_F for unitary G and G_tar."""
    z = np.trace(target.conj().T @ g)
    return float(np.sqrt(max(2.0 * g.shape[0] - 2.0 * abs(z), 0.0)))


def loss_value(kind, f_or_g, target_g=None, phase_invariant: bool = False) -> float:
    kind = LossKind(kind)
    if kind.is_gate:
        g = np.asarray(f_or_g)
        target_g = np.asarray(target_g)
        if g.shape != target_g.shape:
            raise ValueError(f"gate shape mismatch {g.shape} vs {target_g.shape}")
        if phase_invariant:
            return phase_aligned_distance(g, target_g)
        return float(np.linalg.norm(g - target_g))
    f = float(f_or_g)
    if not -FIDELITY_SLACK <= f <= 1 + FIDELITY_SLACK:
        raise ValueError(f"fidelity {f} outside [0, 1]")
    if kind is LossKind.NLF:
        return float(-np.log(max(f, FIDELITY_CLAMP)))
    return 1.0 - f


def divided_differences(eigenvalues: np.ndarray, tau: float) -> np.ndarray:
    """Gamma[a, b] = (e^{-i tau l_a} - e^{-i tau l_b}) / (l_a - l_b), with the
    diagonal limit -i tau e^{-i tau l_a}.

    Written as -i tau e^{-i tau (l_a + l_b)/2} sinc(tau (l_a - l_b)/2), which is
    free of cancellation for close eigenvalues and continuous through degeneracy.
    """
    lam = np.asarray(eigenvalues)
    half = np.exp(-0.5j * tau * lam)
    diff = lam[:, None] - lam[None, :]
    return (-1j * tau) * np.outer(half, half) * np.sinc(tau * diff / (2 * np.pi))


def expm_directional_derivative(eig: EigenData, direction: np.ndarray, tau: float) -> np.ndarray:
    """d/dtheta exp(-i tau (H + theta D)) at theta = 0, with H given by ``eig``."""
    v, vh = eig.eigenvectors, eig.adjoint_vectors
    gamma = divided_differences(eig.eigenvalues, tau)
    return v @ (gamma * (vh @ direction @ v)) @ vh


def _slice_sensitivity(eig: EigenData, tau: float, y: np.ndarray, b: np.ndarray, n_sites: int) -> np.ndarray:
    """s[n, a] = Tr(B^dag dU Y) where dU is the derivative of the slice unitary
    along S^a_n, for every site and axis; Y and B are vectors or matrices."""
    v, vh = eig.eigenvectors, eig.adjoint_vectors
    gamma = divided_differences(eig.eigenvalues, tau)
    yv = vh @ y
    bv = vh @ b
    if yv.ndim == 1:
        m = gamma * np.outer(bv.conj(), yv)
    else:
        m = gamma * (bv.conj() @ yv.T)
    # s = sum_ij D_ij X_ij with X = conj(V) M V^T; only the entries where a
    # local spin operator is nonzero are formed.
    c = vh.T @ m
    flip, sign = site_tables(n_sites)
    x_diag = np.einsum("ib,ib->i", c, v)
    out = np.empty((n_sites, 3), dtype=complex)
    for n in range(n_sites):
        x_flip = np.einsum("ib,ib->i", c, v[flip[n]])
        out[n, 0] = 0.5 * x_flip.sum()
        out[n, 1] = -0.5j * (sign[n] * x_flip).sum()
        out[n, 2] = 0.5 * (sign[n] * x_diag).sum()
    return out


def _check_target(kind: LossKind, target: np.ndarray, dim: int) -> None:
    if kind.is_gate:
        if target.shape != (dim, dim):
            raise ValueError(f"gate target has shape {target.shape}, expected ({dim}, {dim})")
    elif target.shape != (dim,):
        raise ValueError(f"target state has shape {target.shape}, expected ({dim},)")


def _forward(schedule, spec, psi0, kind):
    eigs = slice_eigens(schedule, spec)
    y = np.eye(spec.dim, dtype=complex) if kind.is_gate else np.asarray(psi0, dtype=complex)
    if not kind.is_gate and y.shape != (spec.dim,):
        raise ValueError(f"initial state has shape {y.shape}, expected ({spec.dim},)")
    ys = [y]
    for k, eig in enumerate(eigs):
        y = propagate(eig, schedule.tau, y)
        if not np.all(np.isfinite(y)):
            raise NumericalError("non-finite state during forward evolution", k)
        ys.append(y)
    return eigs, ys


def _loss_and_seed(kind, final, target, phase_invariant):
    """Loss, the adjoint seed B and weight w such that dLoss = Re(w Tr(B^dag dY_K))."""
    if kind.is_gate:
        if phase_invariant:
            z = np.trace(target.conj().T @ final)
            loss = phase_aligned_distance(final, target)
            w = -np.conj(z) / (max(abs(z), FIDELITY_CLAMP) * max(loss, FIDELITY_CLAMP))
            return loss, target, w
        diff = final - target
        loss = float(np.linalg.norm(diff))
        return loss, diff, 1.0 / max(loss, FIDELITY_CLAMP)
    c = np.vdot(target, final)
    f = min(abs(c), 1.0)
    clamped = max(abs(c), FIDELITY_CLAMP)
    if kind is LossKind.NLF:
        return loss_value(kind, f), target, -np.conj(c) / clamped**2
    return loss_value(kind, f), target, -np.conj(c) / clamped


def evaluate_loss(schedule: ControlSchedule, spec: ModelSpec, psi0, target, kind, phase_invariant=False) -> float:
    kind = LossKind(kind)
    target = np.asarray(target, dtype=complex)
    _check_target(kind, target, spec.dim)
    _, ys = _forward(schedule, spec, psi0, kind)
    return _loss_and_seed(kind, ys[-1], target, phase_invariant)[0]


def schedule_gradient(
    schedule: ControlSchedule,
    spec: ModelSpec,
    psi0,
    target,
    kind,
    phase_invariant: bool = False,
) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to every field h[k, n, axis].

    For state losses ``target`` is the target vector and ``psi0`` the initial
    state; for the gate loss ``target`` is the target unitary and ``psi0`` is
    ignored (pass None).
    """
    kind = LossKind(kind)
    target = np.asarray(target, dtype=complex)
    _check_target(kind, target, spec.dim)
    eigs, ys = _forward(schedule, spec, psi0, kind)
    loss, b, w = _loss_and_seed(kind, ys[-1], target, phase_invariant)

    tau = schedule.tau
    grad = np.empty(schedule.fields.shape)
    for k in range(schedule.n_slices - 1, -1, -1):
        s = _slice_sensitivity(eigs[k], tau, ys[k], b, spec.n_sites)
        grad[k] = np.real(w * s)
        if not np.all(np.isfinite(grad[k])):
            raise NumericalError("non-finite gradient", k)
        b = propagate(eigs[k], tau, b, adjoint=True)
    return loss, grad


def central_difference(fn, x: np.ndarray, step: float) -> np.ndarray:
    """Componentwise (fn(x + step e_i) - fn(x - step e_i)) / (2 step)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    grad = np.empty(x.shape)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += step
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2 * step)
    return grad


def finite_difference_gradient(
    schedule: ControlSchedule,
    spec: ModelSpec,
    psi0,
    target,
    kind,
    step: float = 1e-5,
    phase_invariant: bool = False,
) -> np.ndarray:
    """Central-difference gradient; a test oracle, O(K N) loss evaluations."""

    def loss(fields):
        return evaluate_loss(schedule.with_fields(fields), spec, psi0, target, kind, phase_invariant)

    return central_difference(loss, schedule.fields, step)


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, **hyper) -> "OptimizerState":
        return cls(m=np.zeros(shape), v=np.zeros(shape), **hyper)


def adam_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update; inputs are not modified."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("params, grad and optimizer state must share a shape")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, t=t)
