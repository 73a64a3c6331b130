"""Spin-1/2 operators and chain Hamiltonians with open boundaries.

Basis convention: site 1 is the leftmost Kronecker factor (most significant
bit of the basis index) and bit value 0 is spin up.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

MAX_SITES = 14
AXES = ("x", "y", "z")

SX = np.array([[0, 1], [1, 0]], dtype=complex) / 2
SY = np.array([[0, -1j], [1j, 0]], dtype=complex) / 2
SZ = np.array([[1, 0], [0, -1]], dtype=complex) / 2
SPIN = {"x": SX, "y": SY, "z": SZ}


class Model(str, Enum):
    HEISENBERG = "heisenberg"
    XY = "xy"
    ISING = "ising"


_DEFAULT_COUPLINGS = {
    Model.HEISENBERG: (1.0, 1.0, 1.0),
    Model.XY: (1.0, 1.0, 0.0),
    Model.ISING: (0.0, 0.0, 1.0),
}


@dataclass(frozen=True)
class ModelSpec:
    """Nearest-neighbour spin chain: which interaction, how many sites, J per axis."""

    model: Model
    n_sites: int
    couplings: tuple[float, float, float] | None = None

    def __post_init__(self):
        model = Model(self.model)
        object.__setattr__(self, "model", model)
        if self.couplings is None:
            object.__setattr__(self, "couplings", _DEFAULT_COUPLINGS[model])
        else:
            object.__setattr__(self, "couplings", tuple(float(j) for j in self.couplings))
        if not 2 <= int(self.n_sites) <= MAX_SITES:
            raise ValueError(f"n_sites must be in [2, {MAX_SITES}], got {self.n_sites}")
        object.__setattr__(self, "n_sites", int(self.n_sites))

        jx, jy, jz = self.couplings
        if model is Model.HEISENBERG:
            ok = jx == jy == jz != 0
        elif model is Model.XY:
            ok = jz == 0 and jx == jy != 0
        else:
            ok = jx == jy == 0 and jz != 0
        if not ok:
            raise ValueError(f"couplings {self.couplings} inconsistent with {model.value} model")

    @property
    def dim(self) -> int:
        return 2**self.n_sites

    def to_dict(self) -> dict:
        return {"model": self.model.value, "n_sites": self.n_sites, "couplings": list(self.couplings)}


def _axis(axis) -> str:
    if isinstance(axis, (int, np.integer)):
        return AXES[axis]
    if axis not in SPIN:
        raise ValueError(f"unknown axis {axis!r}")
    return axis


def site_operator(n: int, axis, n_sites: int) -> np.ndarray:
    """Dense S^axis acting on site ``n`` (1-based) of an ``n_sites`` chain."""
    if not 1 <= n <= n_sites:
        raise IndexError(f"site {n} out of range for chain of length {n_sites}")
    left = np.eye(2 ** (n - 1))
    right = np.eye(2 ** (n_sites - n))
    return np.kron(np.kron(left, SPIN[_axis(axis)]), right)


def all_up_state(n_sites: int) -> np.ndarray:
    psi = np.zeros(2**n_sites, dtype=complex)
    psi[0] = 1.0
    return psi


@lru_cache(maxsize=None)
def site_tables(n_sites: int) -> tuple[np.ndarray, np.ndarray]:
    """Index tables for local spin operators.

    Returns ``(flip, sign)``, both shaped ``(n_sites, 2**n_sites)``: ``flip[n-1, i]``
    is ``i`` with site n's spin flipped and ``sign[n-1, i]`` is +1 for spin up,
    -1 for spin down. In this basis ``S^x[i, flip] = 1/2``,
    ``S^y[i, flip] = -i sign/2`` and ``S^z[i, i] = sign/2``.
    """
    idx = np.arange(2**n_sites)
    shifts = n_sites - np.arange(1, n_sites + 1)
    flip = idx[None, :] ^ (1 << shifts)[:, None]
    sign = 1 - 2 * ((idx[None, :] >> shifts[:, None]) & 1)
    flip.setflags(write=False)
    sign.setflags(write=False)
    return flip, sign


@lru_cache(maxsize=32)
def coupling_hamiltonian(spec: ModelSpec) -> np.ndarray:
    """Field-free part: sum over bonds (n, n+1) and axes of J^a S^a_n S^a_{n+1}."""
    n_sites = spec.n_sites
    h = np.zeros((spec.dim, spec.dim), dtype=complex)
    for j, axis in zip(spec.couplings, AXES):
        if j == 0:
            continue
        for n in range(1, n_sites):
            left = np.eye(2 ** (n - 1))
            right = np.eye(2 ** (n_sites - n - 1))
            bond = np.kron(SPIN[axis], SPIN[axis])
            h += j * np.kron(np.kron(left, bond), right)
    h.setflags(write=False)
    return h


def field_hamiltonian(fields: np.ndarray, n_sites: int) -> np.ndarray:
    """sum_n sum_a h[n, a] S^a_n for a field slice of shape (n_sites, 3)."""
    fields = np.asarray(fields, dtype=float)
    if fields.shape != (n_sites, 3):
        raise ValueError(f"field slice must have shape ({n_sites}, 3), got {fields.shape}")
    if not np.all(np.isfinite(fields)):
        raise ValueError("field slice contains non-finite entries")
    flip, sign = site_tables(n_sites)
    dim = 2**n_sites
    idx = np.arange(dim)
    h = np.zeros((dim, dim), dtype=complex)
    diag = 0.5 * (fields[:, 2, None] * sign).sum(axis=0)
    h[idx, idx] = diag
    for n in range(n_sites):
        hx, hy = fields[n, 0], fields[n, 1]
        h[idx, flip[n]] += 0.5 * hx - 0.5j * hy * sign[n]
    return h


def build_hamiltonian(spec: ModelSpec, fields: np.ndarray) -> np.ndarray:
    return coupling_hamiltonian(spec) + field_hamiltonian(fields, spec.n_sites)


def total_sz(n_sites: int) -> np.ndarray:
    _, sign = site_tables(n_sites)
    return np.diag(0.5 * sign.sum(axis=0)).astype(complex)
