from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hilbert import ModelSpec, build_hamiltonian, total_sz

DEGENERACY_TOL = 1e-10


class DegenerateGroundStateError(ValueError):
    pass


@dataclass(frozen=True)
class GroundStateResult:
    energy: float
    state: np.ndarray
    gap: float


def fix_phase(psi: np.ndarray) -> np.ndarray:
    """Rotate the global phase so the largest-magnitude amplitude is real positive."""
    k = int(np.argmax(np.abs(psi)))
    out = psi * (np.abs(psi[k]) / psi[k])
    out[k] = abs(psi[k])
    return out


def ground_state(h: np.ndarray, require_unique: bool = True) -> GroundStateResult:
    """Lowest eigenpair of a dense Hermitian matrix by full diagonalization.

    Raises DegenerateGroundStateError when the gap to the first excited level is
    below ``DEGENERACY_TOL``, since the target state would then be ambiguous.
    With ``require_unique=False`` an arbitrary vector of the lowest level is
    returned instead (useful when only the energy matters).
    """
    h = np.asarray(h)
    if h.shape[0] < 2:
        raise ValueError("need at least a 2x2 Hamiltonian")
    evals, evecs = np.linalg.eigh(h)
    gap = float(evals[1] - evals[0])
    if require_unique and gap < DEGENERACY_TOL:
        raise DegenerateGroundStateError(f"ground state degenerate (gap {gap:.3e})")
    psi = evecs[:, 0] / np.linalg.norm(evecs[:, 0])
    psi = fix_phase(psi)
    return GroundStateResult(energy=float(evals[0]), state=psi, gap=gap)


def target_state(spec: ModelSpec) -> np.ndarray:
    """Zero-field ground state of ``spec``.

    A degenerate ground level is split by total S^z when the couplings conserve
    it, and the member with the largest S^z is returned. For odd Heisenberg and
    XY chains this is the S^z = +1/2 state of the doublet. Degeneracies that
    S^z does not lift still raise DegenerateGroundStateError.
    """
    h = build_hamiltonian(spec, np.zeros((spec.n_sites, 3)))
    try:
        return ground_state(h).state
    except DegenerateGroundStateError:
        pass
    sz = total_sz(spec.n_sites)
    if np.max(np.abs(h @ sz - sz @ h)) > DEGENERACY_TOL:
        raise DegenerateGroundStateError("degenerate ground state and S^z is not conserved")
    evals, evecs = np.linalg.eigh(h)
    level = evecs[:, evals - evals[0] < DEGENERACY_TOL]
    m, rot = np.linalg.eigh(level.conj().T @ sz @ level)
    if m[-1] - m[-2] < DEGENERACY_TOL:
        raise DegenerateGroundStateError(f"ground level stays degenerate at S^z = {m[-1]:g}")
    psi = level @ rot[:, -1]
    return fix_phase(psi / np.linalg.norm(psi))
