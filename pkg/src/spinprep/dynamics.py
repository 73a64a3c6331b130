"""Piecewise-constant evolution of states and unitaries."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .hilbert import ModelSpec, build_hamiltonian

HERMITIAN_TOL = 1e-10


@dataclass(frozen=True)
class ControlSchedule:
    """Fields held constant on each of ``n_slices`` equal time slices.

    ``fields[k]`` (0-based) is the (n_sites, 3) field slice active on
    ``[k*tau, (k+1)*tau)``.
    """

    total_time: float
    fields: np.ndarray

    def __post_init__(self):
        fields = np.array(self.fields, dtype=float)
        if fields.ndim != 3 or fields.shape[2] != 3 or fields.shape[0] < 1:
            raise ValueError(f"fields must have shape (K, N, 3), got {fields.shape}")
        if not np.all(np.isfinite(fields)):
            raise ValueError("schedule contains non-finite fields")
        if not (np.isfinite(self.total_time) and self.total_time > 0):
            raise ValueError(f"total_time must be positive, got {self.total_time}")
        fields.setflags(write=False)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "total_time", float(self.total_time))

    @property
    def n_slices(self) -> int:
        return self.fields.shape[0]

    @property
    def n_sites(self) -> int:
        return self.fields.shape[1]

    @property
    def tau(self) -> float:
        return self.total_time / self.n_slices

    def with_fields(self, fields: np.ndarray) -> "ControlSchedule":
        return ControlSchedule(self.total_time, fields)


@dataclass(frozen=True)
class EigenData:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @cached_property
    def adjoint_vectors(self) -> np.ndarray:
        return self.eigenvectors.conj().T

    def phases(self, tau: float) -> np.ndarray:
        return np.exp(-1j * tau * self.eigenvalues)


@dataclass
class Trajectory:
    states: list
    tau: float
    fidelities: np.ndarray | None = None

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def records(self) -> list[tuple[int, float, float]]:
        """Ordered (k, t = k*tau, f(t)) rows for export."""
        if self.fidelities is None:
            raise ValueError("trajectory has no fidelities attached")
        return [(k, k * self.tau, float(f)) for k, f in enumerate(self.fidelities)]


def check_hermitian(h: np.ndarray, tol: float = HERMITIAN_TOL) -> None:
    dev = np.max(np.abs(h - h.conj().T)) if h.size else 0.0
    if dev > tol:
        raise ValueError(f"operator is not Hermitian (max deviation {dev:.3e})")


def eigen(h: np.ndarray) -> EigenData:
    check_hermitian(h)
    lam, v = np.linalg.eigh(h)
    return EigenData(lam, v)


def propagate(eig: EigenData, tau: float, y: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Apply exp(-i tau H) (or its adjoint) to a vector or matrix without forming it."""
    v = eig.eigenvectors
    ph = eig.phases(tau)
    if adjoint:
        ph = ph.conj()
    coeff = eig.adjoint_vectors @ y
    coeff = ph[:, None] * coeff if coeff.ndim == 2 else ph * coeff
    return v @ coeff


def step_unitary(h: np.ndarray, tau: float) -> tuple[np.ndarray, EigenData]:
    eig = eigen(h)
    v = eig.eigenvectors
    u = (v * eig.phases(tau)) @ v.conj().T
    return u, eig


def slice_eigens(schedule: ControlSchedule, spec: ModelSpec) -> list[EigenData]:
    if schedule.n_sites != spec.n_sites:
        raise ValueError(f"schedule has {schedule.n_sites} sites, model has {spec.n_sites}")
    return [eigen(build_hamiltonian(spec, f)) for f in schedule.fields]


def evolve(schedule: ControlSchedule, spec: ModelSpec, psi0: np.ndarray) -> Trajectory:
    """Evolve ``psi0`` slice by slice, keeping all K+1 intermediate states."""
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (spec.dim,):
        raise ValueError(f"initial state has shape {psi0.shape}, expected ({spec.dim},)")
    states = [psi0]
    for eig in slice_eigens(schedule, spec):
        states.append(propagate(eig, schedule.tau, states[-1]))
    return Trajectory(states=states, tau=schedule.tau)


def fidelity(a: np.ndarray, b: np.ndarray) -> float:
    """|<a|b>|, clipped into [0, 1] against rounding."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(min(abs(np.vdot(a, b)), 1.0))


def fidelity_trajectory(
    schedule: ControlSchedule, spec: ModelSpec, psi0: np.ndarray, target: np.ndarray
) -> Trajectory:
    traj = evolve(schedule, spec, psi0)
    traj.fidelities = np.array([fidelity(target, psi) for psi in traj.states])
    return traj


def evolve_unitary(schedule: ControlSchedule, spec: ModelSpec) -> np.ndarray:
    """G(T) = U_K ... U_1."""
    g = np.eye(spec.dim, dtype=complex)
    for eig in slice_eigens(schedule, spec):
        g = propagate(eig, schedule.tau, g)
    return g
