"""Dense statevector engine.

Conventions fixed here and used everywhere else in the package:

* Qubit ordering is little-endian: qubit 0 is the least significant bit of
  the amplitude index.
* Ancilla outcome bitstrings are read left-to-right in increasing ancilla
  qubit order; the integer form of an outcome is that string parsed as
  binary (first ancilla = most significant bit).
* All entropies are in bits (base-2 logarithms).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

ATOL_NORM = 1e-10
P_FLOOR = 1e-12
REDUCED_DENSITY_CAP = 12
STATEVECTOR_CAP = 24

CDTYPE = torch.complex128


class LayoutError(ValueError):
    pass


class GateError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class ZeroProbabilityBranch(Exception):
    """Raised when a projected branch falls below the probability floor."""

    def __init__(self, outcome, prob):
        super().__init__(f"branch {outcome} has probability {prob} < {P_FLOOR}")
        self.outcome = outcome
        self.prob = prob


@dataclass(frozen=True)
class QubitLayout:
    """Role assignment (system 'S' / ancilla 'A') for every qubit."""

    roles: str

    def __post_init__(self):
        if len(self.roles) == 0:
            raise LayoutError("layout must contain at least one qubit")
        if any(r not in "SA" for r in self.roles):
            raise LayoutError(f"roles must be 'S' or 'A', got {self.roles!r}")
        if len(self.roles) > STATEVECTOR_CAP:
            raise CapacityError(
                f"{len(self.roles)} qubits exceeds dense cap of {STATEVECTOR_CAP}"
            )

    @classmethod
    def from_blocks(cls, n_blocks: int) -> "QubitLayout":
        """Repeating ASSSSA blocks: 4 system + 2 ancilla qubits per block."""
        if n_blocks < 1:
            raise LayoutError("need at least one block")
        return cls("ASSSSA" * n_blocks)

    @classmethod
    def all_system(cls, n_qubits: int) -> "QubitLayout":
        return cls("S" * n_qubits)

    @classmethod
    def interleaved(cls, n_system: int, every: int) -> "QubitLayout":
        """One ancilla after every `every` system qubits (no trailing ancilla)."""
        roles = []
        for i in range(n_system):
            roles.append("S")
            if (i + 1) % every == 0 and i + 1 < n_system:
                roles.append("A")
        return cls("".join(roles))

    @property
    def n_qubits(self) -> int:
        return len(self.roles)

    @property
    def n_system(self) -> int:
        return self.roles.count("S")

    @property
    def n_ancilla(self) -> int:
        return self.roles.count("A")

    @property
    def system_indices(self) -> tuple:
        return tuple(i for i, r in enumerate(self.roles) if r == "S")

    @property
    def ancilla_indices(self) -> tuple:
        return tuple(i for i, r in enumerate(self.roles) if r == "A")


@dataclass
class StateVector:
    """Complex amplitudes over the layout's full register.

    `normalized=False` marks an unnormalized branch whose squared norm is a
    branch probability rather than 1.
    """

    amps: torch.Tensor
    layout: QubitLayout
    normalized: bool = True

    def __post_init__(self):
        if not isinstance(self.amps, torch.Tensor):
            self.amps = torch.as_tensor(np.asarray(self.amps), dtype=CDTYPE)
        if self.amps.dtype != CDTYPE:
            self.amps = self.amps.to(CDTYPE)
        n = self.layout.n_qubits
        if self.amps.numel() != 2**n:
            raise ValueError(
                f"amplitude length {self.amps.numel()} != 2^{n}"
            )
        if self.normalized:
            nrm = float(torch.linalg.vector_norm(self.amps.detach()))
            if abs(nrm - 1.0) > 1e-8:
                raise ValueError(f"state marked normalized has norm {nrm}")

    @property
    def n_qubits(self) -> int:
        return self.layout.n_qubits

    def numpy(self) -> np.ndarray:
        return self.amps.detach().numpy().copy()

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.amps.detach()))


@dataclass
class ProbTable:
    """Distribution over the 2^{N_a} ancilla outcomes, indexed by outcome int."""

    probs: np.ndarray
    n_ancilla: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (2**self.n_ancilla,):
            raise ValueError("probability table has wrong length")
        if np.any(self.probs < -ATOL_NORM):
            raise ValueError("negative probability entry")
        if abs(self.probs.sum() - 1.0) > ATOL_NORM:
            raise ValueError(f"table sums to {self.probs.sum()}, not 1")

    def __getitem__(self, outcome: int) -> float:
        return float(self.probs[outcome])

    def bitstring(self, outcome: int) -> str:
        return format(outcome, f"0{self.n_ancilla}b")


@dataclass
class DensityMatrix:
    matrix: np.ndarray
    subset: tuple

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=complex)
        d = 2 ** len(self.subset)
        if self.matrix.shape != (d, d):
            raise ValueError("density matrix shape mismatch")
        if np.max(np.abs(self.matrix - self.matrix.conj().T)) > 1e-8:
            raise ValueError("density matrix not Hermitian")
        if abs(np.trace(self.matrix).real - 1.0) > 1e-8:
            raise ValueError("density matrix trace != 1")


def _axis(q: int, n: int) -> int:
    # little-endian: qubit 0 lives on the last tensor axis
    return n - 1 - q


def apply_unitary_raw(amps: torch.Tensor, mat: torch.Tensor, targets, n: int) -> torch.Tensor:
    """Apply a 2^k x 2^k matrix to `targets` of an n-qubit amplitude tensor.

    The first listed target is the most significant bit of the matrix's
    local index. Does not check unitarity (also used for Hamiltonian terms).
    """
    k = len(targets)
    axes = [_axis(q, n) for q in targets]
    rest = [a for a in range(n) if a not in axes]
    perm = axes + rest
    t = amps.reshape([2] * n).permute(perm).reshape(2**k, -1)
    t = (mat.to(amps.dtype) @ t).reshape([2] * (n))
    inv = [0] * n
    for i, p in enumerate(perm):
        inv[p] = i
    return t.permute(inv).reshape(-1)


def zero_state(layout: QubitLayout) -> StateVector:
    """|0...0> on the full register."""
    amps = torch.zeros(2**layout.n_qubits, dtype=CDTYPE)
    amps[0] = 1.0
    return StateVector(amps, layout)


def apply_gate(state: StateVector, gate, targets) -> StateVector:
    """Apply a 2x2 or 4x4 unitary to the given target qubits."""
    gate = torch.as_tensor(np.asarray(gate), dtype=CDTYPE) if not isinstance(gate, torch.Tensor) else gate.to(CDTYPE)
    targets = tuple(int(t) for t in targets)
    k = len(targets)
    if gate.shape != (2**k, 2**k) or k not in (1, 2):
        raise GateError(f"gate shape {tuple(gate.shape)} does not match {k} targets")
    if len(set(targets)) != k:
        raise GateError("targets must be distinct")
    n = state.n_qubits
    if any(t < 0 or t >= n for t in targets):
        raise IndexError(f"target out of range for {n} qubits")
    g = gate.detach()
    eye = torch.eye(2**k, dtype=CDTYPE)
    if float(torch.max(torch.abs(g.conj().T @ g - eye))) > 1e-10:
        raise GateError("gate is not unitary")
    amps = apply_unitary_raw(state.amps, gate, targets, n)
    return StateVector(amps, state.layout, normalized=state.normalized)


def _outcome_bits(outcome, n_ancilla: int):
    """Accept int or bit sequence; return tuple of bits in ancilla order."""
    if isinstance(outcome, (int, np.integer)):
        if outcome < 0 or outcome >= 2**n_ancilla:
            raise ValueError(f"outcome {outcome} out of range")
        return tuple((outcome >> (n_ancilla - 1 - k)) & 1 for k in range(n_ancilla))
    bits = tuple(int(b) for b in outcome)
    if len(bits) != n_ancilla or any(b not in (0, 1) for b in bits):
        raise ValueError("outcome bitstring has wrong length or values")
    return bits


def outcome_int(bits) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


def project_ancillas_raw(amps: torch.Tensor, layout: QubitLayout, outcome) -> torch.Tensor:
    """Unnormalized branch: ancillas projected to `outcome` then reset to |0>.

    Returns amplitudes on the full register (graph-preserving).
    """
    n = layout.n_qubits
    bits = _outcome_bits(outcome, layout.n_ancilla)
    idx = [slice(None)] * n
    for k, q in enumerate(layout.ancilla_indices):
        idx[_axis(q, n)] = bits[k]
    sub = amps.reshape([2] * n)[tuple(idx)]
    out = torch.zeros([2] * n, dtype=CDTYPE)
    reset_idx = [slice(None)] * n
    for q in layout.ancilla_indices:
        reset_idx[_axis(q, n)] = 0
    out[tuple(reset_idx)] = sub
    return out.reshape(-1)


def project_ancillas(state: StateVector, outcome):
    """Project ancillas onto `outcome`, reset them to |0>, renormalize.

    Returns (StateVector, probability). Raises ZeroProbabilityBranch below
    the probability floor.
    """
    branch = project_ancillas_raw(state.amps, state.layout, outcome)
    prob = float(torch.sum(torch.abs(branch.detach()) ** 2))
    if prob < P_FLOOR:
        raise ZeroProbabilityBranch(outcome, prob)
    normalized = branch / np.sqrt(prob)
    return StateVector(normalized, state.layout), prob


def outcome_distribution_raw(amps: torch.Tensor, layout: QubitLayout) -> torch.Tensor:
    """Tensor of branch probabilities indexed by outcome int (graph-preserving)."""
    n = layout.n_qubits
    na = layout.n_ancilla
    anc_axes = [_axis(q, n) for q in layout.ancilla_indices]
    rest = [a for a in range(n) if a not in anc_axes]
    t = amps.reshape([2] * n).permute(anc_axes + rest).reshape(2**na, -1)
    probs = torch.sum(torch.abs(t) ** 2, dim=1)
    # permute ordering puts ancilla k at axis k, i.e. first ancilla is the
    # most significant bit -- exactly the outcome-int convention.
    return probs


def outcome_distribution(state: StateVector) -> ProbTable:
    probs = outcome_distribution_raw(state.amps, state.layout).detach().numpy()
    return ProbTable(probs, state.layout.n_ancilla)


def reduced_density(state: StateVector, subset) -> DensityMatrix:
    subset = tuple(int(q) for q in subset)
    n = state.n_qubits
    if len(set(subset)) != len(subset):
        raise ValueError("subset indices must be distinct")
    if any(q < 0 or q >= n for q in subset):
        raise IndexError("subset index out of range")
    if len(subset) > REDUCED_DENSITY_CAP:
        raise CapacityError(
            f"subset of {len(subset)} qubits exceeds cap {REDUCED_DENSITY_CAP}"
        )
    amps = state.amps.detach().numpy()
    keep_axes = [_axis(q, n) for q in subset]
    rest = [a for a in range(n) if a not in keep_axes]
    psi = amps.reshape([2] * n).transpose(keep_axes + rest).reshape(2 ** len(subset), -1)
    rho = psi @ psi.conj().T
    nrm = np.trace(rho).real
    return DensityMatrix(rho / nrm, subset)


def von_neumann_entropy(rho: np.ndarray) -> float:
    """Entropy of a density matrix in bits."""
    evals = np.linalg.eigvalsh(np.asarray(rho))
    evals = evals[evals > P_FLOOR]
    return float(-np.sum(evals * np.log2(evals)))


def entanglement_entropy(state: StateVector, part) -> float:
    """Bipartite entanglement entropy (bits) of `part` vs the rest."""
    part = tuple(part)
    n = state.n_qubits
    if len(part) > n // 2:
        part = tuple(q for q in range(n) if q not in part)
    return von_neumann_entropy(reduced_density(state, part).matrix)


def shannon_entropy(table: ProbTable) -> float:
    p = table.probs[table.probs > P_FLOOR]
    return float(-np.sum(p * np.log2(p)))


# -- amplitude dump format: 8-byte header (uint32 n_qubits, uint32 flag=1 for
#    little-endian qubit order), then 2^n interleaved (real, imag) float64.

def save_amplitudes(state: StateVector, path) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", state.n_qubits, 1))
        arr = state.numpy()
        inter = np.empty(2 * arr.size, dtype="<f8")
        inter[0::2] = arr.real
        inter[1::2] = arr.imag
        f.write(inter.tobytes())


def load_amplitudes(path, layout: QubitLayout | None = None) -> StateVector:
    with open(path, "rb") as f:
        n, flag = struct.unpack("<II", f.read(8))
        if flag != 1:
            raise ValueError("unsupported qubit-order flag")
        inter = np.frombuffer(f.read(), dtype="<f8")
    if inter.size != 2 ** (n + 1):
        raise ValueError("amplitude payload has wrong length")
    amps = inter[0::2] + 1j * inter[1::2]
    if layout is None:
        layout = QubitLayout.all_system(n)
    if layout.n_qubits != n:
        raise ValueError("layout does not match dumped register size")
    nrm = np.linalg.norm(amps)
    return StateVector(torch.as_tensor(amps, dtype=CDTYPE), layout,
                       normalized=abs(nrm - 1.0) < 1e-8)
