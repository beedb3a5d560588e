"""Target states and operators: AKLT chain states (valence-bond form),
the four-state AKLT manifold, GHZ states, and the spin-1 AKLT Hamiltonian
mapped onto qubits.

Spin-1 sites are encoded on qubit pairs (2i, 2i+1) as
|+> -> |10>, |0> -> |00>, |-> -> |01| (first qubit of the pair written
first); |11> is the forbidden subspace.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import torch

from .qsim import CDTYPE, QubitLayout, StateVector, apply_unitary_raw

# spin-1 operators, basis order (+1, 0, -1)
SZ1 = np.diag([1.0, 0.0, -1.0])
SP1 = np.sqrt(2.0) * np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
SX1 = (SP1 + SP1.T) / 2.0
SY1 = (SP1 - SP1.T) / 2.0j

# valence-bond MPS tensors of the AKLT state
_A = {
    0: np.sqrt(2.0 / 3.0) * np.array([[0, 1], [0, 0]]),        # |+>
    1: -np.sqrt(1.0 / 3.0) * np.array([[1, 0], [0, -1]]),      # |0>
    2: -np.sqrt(2.0 / 3.0) * np.array([[0, 0], [1, 0]]),       # |->
}

# spin-1 -> two-qubit isometry; local pair index = 2*q_first + q_second
ENCODING = np.zeros((4, 3))
ENCODING[2, 0] = 1.0   # |+> -> |10>
ENCODING[0, 1] = 1.0   # |0> -> |00>
ENCODING[1, 2] = 1.0   # |-> -> |01>

_BOUNDARY = {"up": np.array([1.0, 0.0]), "down": np.array([0.0, 1.0])}
BOUNDARIES = (("up", "up"), ("up", "down"), ("down", "up"), ("down", "down"))


def spin2_projector() -> np.ndarray:
    """Projector onto total spin 2 of two spin-1 sites (9x9)."""
    ss = sum(np.kron(s, s) for s in (SX1, SY1, SZ1))
    return (np.eye(9) / 3.0 + ss / 2.0 + ss @ ss / 6.0).real


@dataclass
class TargetManifold:
    basis: list                     # StateVector over system-only register
    orthonormalized: bool = True

    def matrix(self) -> np.ndarray:
        return np.stack([s.numpy() for s in self.basis], axis=1)


@dataclass
class QubitOperator:
    """Sum of local terms (coefficient, dense matrix, target qubits)."""

    terms: list
    n_qubits: int

    def expectation_raw(self, amps: torch.Tensor) -> torch.Tensor:
        val = torch.zeros((), dtype=torch.float64)
        for coeff, mat, targets in self.terms:
            m = torch.as_tensor(mat, dtype=CDTYPE)
            applied = apply_unitary_raw(amps, m, targets, self.n_qubits)
            val = val + coeff * torch.real(torch.sum(amps.conj() * applied))
        return val

    def expectation(self, state: StateVector) -> float:
        return float(self.expectation_raw(state.amps.detach()))

    def dense(self) -> np.ndarray:
        """Full matrix; only for small registers (tests, exact spectra)."""
        dim = 2**self.n_qubits
        h = np.zeros((dim, dim), dtype=complex)
        eye = np.eye(dim)
        for col in range(dim):
            amps = torch.as_tensor(eye[:, col], dtype=CDTYPE)
            acc = torch.zeros(dim, dtype=CDTYPE)
            for coeff, mat, targets in self.terms:
                m = torch.as_tensor(mat, dtype=CDTYPE)
                acc = acc + coeff * apply_unitary_raw(amps, m, targets, self.n_qubits)
            h[:, col] = acc.numpy()
        return h


def _spin_config_index(config) -> int:
    """Little-endian amplitude index of an encoded spin configuration."""
    idx = 0
    for i, m in enumerate(config):
        if m == 0:
            idx |= 1 << (2 * i)        # |+> -> first qubit of the pair
        elif m == 2:
            idx |= 1 << (2 * i + 1)    # |-> -> second qubit of the pair
    return idx


def build_aklt(n_spin1: int, boundary=("up", "up")) -> StateVector:
    """Open-chain AKLT state with explicit spin-1/2 edge vectors, encoded
    onto 2*n_spin1 qubits."""
    if n_spin1 < 2:
        raise ValueError("need at least two spin-1 sites")
    left = _BOUNDARY[boundary[0]]
    right = _BOUNDARY[boundary[1]]
    amps = np.zeros(2 ** (2 * n_spin1), dtype=complex)
    for config in product(range(3), repeat=n_spin1):
        mat = np.eye(2)
        for m in config:
            mat = mat @ _A[m]
        coeff = left @ mat @ right
        if coeff != 0.0:
            amps[_spin_config_index(config)] = coeff
    amps /= np.linalg.norm(amps)
    return StateVector(torch.as_tensor(amps, dtype=CDTYPE),
                       QubitLayout.all_system(2 * n_spin1))


def lowdin_orthonormalize(vectors: np.ndarray) -> np.ndarray:
    """Symmetric orthonormalization of the columns of `vectors`."""
    gram = vectors.conj().T @ vectors
    evals, evecs = np.linalg.eigh(gram)
    if np.min(evals) < 1e-12:
        raise ValueError("vectors are linearly dependent")
    inv_sqrt = evecs @ np.diag(evals**-0.5) @ evecs.conj().T
    return vectors @ inv_sqrt


def aklt_manifold(n_spin1: int) -> TargetManifold:
    """The four boundary AKLT states, Loewdin-orthonormalized."""
    raw = np.stack(
        [build_aklt(n_spin1, b).numpy() for b in BOUNDARIES], axis=1
    )
    ortho = lowdin_orthonormalize(raw)
    layout = QubitLayout.all_system(2 * n_spin1)
    basis = [
        StateVector(torch.as_tensor(ortho[:, i], dtype=CDTYPE), layout)
        for i in range(4)
    ]
    return TargetManifold(basis)


def build_ghz(n_qubits: int) -> StateVector:
    if n_qubits < 2:
        raise ValueError("GHZ needs at least two qubits")
    amps = np.zeros(2**n_qubits, dtype=complex)
    amps[0] = amps[-1] = 1.0 / np.sqrt(2.0)
    return StateVector(torch.as_tensor(amps, dtype=CDTYPE),
                       QubitLayout.all_system(n_qubits))


def aklt_hamiltonian_qubit(n_spin1: int) -> QubitOperator:
    """Spin-1 AKLT projector Hamiltonian conjugated into the qubit encoding,
    plus a per-site projector onto the forbidden |11> pair state.

    Ground energy is exactly 0 with the four AKLT boundary states as zero
    modes; any forbidden-subspace component costs at least 1.
    """
    if n_spin1 < 2:
        raise ValueError("need at least two spin-1 sites")
    p2 = spin2_projector()
    mm = np.kron(ENCODING, ENCODING)
    bond = mm @ p2 @ mm.conj().T
    penalty = np.diag([0.0, 0.0, 0.0, 1.0])
    terms = []
    for i in range(n_spin1 - 1):
        terms.append((1.0, bond, (2 * i, 2 * i + 1, 2 * i + 2, 2 * i + 3)))
    for i in range(n_spin1):
        terms.append((1.0, penalty, (2 * i, 2 * i + 1)))
    return QubitOperator(terms, 2 * n_spin1)
