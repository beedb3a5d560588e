"""Parameterized ansatz construction and application.

Gate set: Ry rotations, CNOT, and CiRX (a controlled-X rotation that
interpolates between identity at angle 0 and CNOT-up-to-phase at angle pi).
Brickwork CNOT layers use control on the lower qubit index, alternating
even/odd bonds per layer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .qsim import CDTYPE, QubitLayout, StateVector, apply_unitary_raw


class ArityError(ValueError):
    pass


class PeriodError(ValueError):
    pass


@dataclass(frozen=True)
class GateSlot:
    kind: str               # "ry" | "cnot" | "cirx"
    targets: tuple          # 1 or 2 qubit indices; 2-qubit: (control, target)
    param: int | None       # parameter-slot index, None for fixed gates
    layer: int = -1         # layer tag used by parameter tying


@dataclass
class ParamCircuit:
    """Ordered gate program over a fixed register size.

    `sharing` maps each parameter slot to an equivalence class; when absent
    every slot is free. `blocks` is optional metadata set by the feedback
    ansatz builder: (slice of param slots, qubit pair) per two-qubit block.
    """

    n_qubits: int
    slots: list
    n_params: int
    sharing: list | None = None
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        for s in self.slots:
            if s.kind in ("ry", "cirx") and s.param is None:
                raise ValueError(f"{s.kind} slot must carry a parameter")
            if s.kind == "cnot" and s.param is not None:
                raise ValueError("cnot slot carries no parameter")
        if self.sharing is not None and len(self.sharing) != self.n_params:
            raise ValueError("sharing map length mismatch")

    @property
    def n_free(self) -> int:
        if self.sharing is None:
            return self.n_params
        return max(self.sharing) + 1

    def expand(self, angles: torch.Tensor) -> torch.Tensor:
        """Free angles -> per-slot angles (differentiable through tying)."""
        if angles.numel() != self.n_free:
            raise ArityError(
                f"expected {self.n_free} angles, got {angles.numel()}"
            )
        if self.sharing is None:
            return angles
        return angles[torch.as_tensor(self.sharing, dtype=torch.long)]

    def depth(self) -> int:
        """Max number of gates stacked on any single qubit."""
        load = [0] * self.n_qubits
        for s in self.slots:
            top = max(load[q] for q in s.targets) + 1
            for q in s.targets:
                load[q] = top
        return max(load) if load else 0

    def to_json(self) -> str:
        d = {
            "n_qubits": self.n_qubits,
            "n_params": self.n_params,
            "sharing": self.sharing,
            "blocks": [[b[0].start, b[0].stop, list(b[1])] for b in self.blocks],
            "slots": [
                {"kind": s.kind, "targets": list(s.targets),
                 "param": s.param, "layer": s.layer}
                for s in self.slots
            ],
        }
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ParamCircuit":
        d = json.loads(text)
        slots = [
            GateSlot(s["kind"], tuple(s["targets"]), s["param"], s.get("layer", -1))
            for s in d["slots"]
        ]
        blocks = [(slice(b[0], b[1]), tuple(b[2])) for b in d.get("blocks", [])]
        return cls(d["n_qubits"], slots, d["n_params"], d.get("sharing"), blocks)


def ry_gate(theta) -> torch.Tensor:
    theta = theta if isinstance(theta, torch.Tensor) else torch.tensor(float(theta), dtype=torch.float64)
    c = torch.cos(theta / 2).to(CDTYPE)
    s = torch.sin(theta / 2).to(CDTYPE)
    return torch.stack([torch.stack([c, -s]), torch.stack([s, c])])


CNOT = torch.tensor(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=CDTYPE
)


def cirx_gate(theta) -> torch.Tensor:
    """Controlled-RX: identity on the control-0 block, exp(-i theta X / 2)
    on the control-1 block. Identity at 0; controlled-X up to a -i phase
    at pi."""
    theta = theta if isinstance(theta, torch.Tensor) else torch.tensor(float(theta), dtype=torch.float64)
    c = torch.cos(theta / 2).to(CDTYPE)
    s = (-1j * torch.sin(theta / 2)).to(CDTYPE)
    one = torch.ones((), dtype=CDTYPE)
    zero = torch.zeros((), dtype=CDTYPE)
    return torch.stack([
        torch.stack([one, zero, zero, zero]),
        torch.stack([zero, one, zero, zero]),
        torch.stack([zero, zero, c, s]),
        torch.stack([zero, zero, s, c]),
    ])


def build_hardware_efficient(layout: QubitLayout, depth: int) -> ParamCircuit:
    """Alternating Ry / brickwork-CNOT ansatz over the full register.

    Each depth unit: one Ry on every qubit, then one brickwork CNOT layer
    (even bonds on even units, odd bonds on odd units); a closing Ry layer
    follows. Parameter count = (depth + 1) * n_qubits.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    n = layout.n_qubits
    slots = []
    p = 0
    for d in range(depth):
        for q in range(n):
            slots.append(GateSlot("ry", (q,), p, layer=d))
            p += 1
        start = 0 if d % 2 == 0 else 1
        for q in range(start, n - 1, 2):
            slots.append(GateSlot("cnot", (q, q + 1), None, layer=d))
    for q in range(n):
        slots.append(GateSlot("ry", (q,), p, layer=depth))
        p += 1
    return ParamCircuit(n, slots, p)


def build_feedback_ansatz(layout: QubitLayout, block_depth: int = 5) -> ParamCircuit:
    """Sparse correction ansatz on system qubits only.

    One two-qubit block per adjacent pair of the system chain (ancillas
    skipped). A block is block_depth repetitions of (Ry on both qubits,
    CiRX with alternating control) plus a closing Ry pair:
    3 * block_depth + 2 parameters per block.
    """
    if block_depth < 1:
        raise ValueError("block_depth must be >= 1")
    sys_q = layout.system_indices
    slots = []
    blocks = []
    p = 0
    for i in range(len(sys_q) - 1):
        a, b = sys_q[i], sys_q[i + 1]
        start = p
        for r in range(block_depth):
            slots.append(GateSlot("ry", (a,), p, layer=r)); p += 1
            slots.append(GateSlot("ry", (b,), p, layer=r)); p += 1
            ctrl = (a, b) if r % 2 == 0 else (b, a)
            slots.append(GateSlot("cirx", ctrl, p, layer=r)); p += 1
        slots.append(GateSlot("ry", (a,), p, layer=block_depth)); p += 1
        slots.append(GateSlot("ry", (b,), p, layer=block_depth)); p += 1
        blocks.append((slice(start, p), (a, b)))
    return ParamCircuit(layout.n_qubits, slots, p, blocks=blocks)


def tie_parameters(circuit: ParamCircuit, period: int) -> ParamCircuit:
    """Share parameters across qubits with the given spatial periodicity.

    Slots with equal (layer, leftmost-target mod period) fall into one
    class. Requires the register size to be a multiple of the period.
    """
    if circuit.n_qubits % period != 0:
        raise PeriodError(
            f"period {period} does not divide register size {circuit.n_qubits}"
        )
    if circuit.sharing is not None:
        raise PeriodError("circuit already tied")
    classes = {}
    sharing = [None] * circuit.n_params
    for s in circuit.slots:
        if s.param is None:
            continue
        if s.layer < 0:
            raise PeriodError("slot lacks layer tag; cannot tie")
        key = (s.layer, s.targets[0] % period)
        if key not in classes:
            classes[key] = len(classes)
        sharing[s.param] = classes[key]
    return ParamCircuit(circuit.n_qubits, circuit.slots, circuit.n_params,
                        sharing=sharing, blocks=circuit.blocks)


def apply_circuit_raw(amps: torch.Tensor, circuit: ParamCircuit,
                      angles: torch.Tensor) -> torch.Tensor:
    """Graph-preserving circuit application on raw amplitudes."""
    full = circuit.expand(angles)
    n = circuit.n_qubits
    for s in circuit.slots:
        if s.kind == "ry":
            g = ry_gate(full[s.param])
        elif s.kind == "cnot":
            g = CNOT
        else:
            g = cirx_gate(full[s.param])
        amps = apply_unitary_raw(amps, g, s.targets, n)
    return amps


def _ry_batched(thetas: torch.Tensor) -> torch.Tensor:
    c = torch.cos(thetas / 2).to(CDTYPE)
    s = torch.sin(thetas / 2).to(CDTYPE)
    return torch.stack([torch.stack([c, -s], dim=-1),
                        torch.stack([s, c], dim=-1)], dim=-2)


def _cirx_batched(thetas: torch.Tensor) -> torch.Tensor:
    b = thetas.shape[0]
    c = torch.cos(thetas / 2).to(CDTYPE)
    s = (-1j * torch.sin(thetas / 2)).to(CDTYPE)
    one = torch.ones(b, dtype=CDTYPE)
    zero = torch.zeros(b, dtype=CDTYPE)
    rows = [
        torch.stack([one, zero, zero, zero], dim=-1),
        torch.stack([zero, one, zero, zero], dim=-1),
        torch.stack([zero, zero, c, s], dim=-1),
        torch.stack([zero, zero, s, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def apply_unitary_batched_raw(amps_b: torch.Tensor, mats: torch.Tensor,
                              targets, n: int) -> torch.Tensor:
    """Batched gate application: amps_b (B, 2^n), mats (B, 2^k, 2^k)."""
    b = amps_b.shape[0]
    k = len(targets)
    axes = [n - 1 - q for q in targets]
    rest = [a for a in range(n) if a not in axes]
    perm = [0] + [a + 1 for a in axes] + [a + 1 for a in rest]
    t = amps_b.reshape([b] + [2] * n).permute(perm).reshape(b, 2**k, -1)
    t = torch.bmm(mats.to(amps_b.dtype), t).reshape([b] + [2] * n)
    inv = [0] * (n + 1)
    for i, p in enumerate(perm):
        inv[p] = i
    return t.permute(inv).reshape(b, -1)


_ID2 = torch.eye(2, dtype=CDTYPE)
_SWAP4 = torch.tensor(
    [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=CDTYPE)


def _block_slot_map(circuit: ParamCircuit):
    """Slots grouped per block; None if some slot falls outside all blocks."""
    groups = [[] for _ in circuit.blocks]
    for s in circuit.slots:
        placed = False
        for i, (sl, _) in enumerate(circuit.blocks):
            if s.param is not None and sl.start <= s.param < sl.stop:
                groups[i].append(s)
                placed = True
                break
        if not placed:
            return None
    return groups


def _block_unitary_batched(slots, pair, angles_b: torch.Tensor) -> torch.Tensor:
    """(B, 4, 4) product of a block's gates in the pair's local basis
    (first qubit of the pair = most significant local bit)."""
    a, b_q = pair
    bsz = angles_b.shape[0]
    u = torch.eye(4, dtype=CDTYPE).expand(bsz, 4, 4)
    for s in slots:
        if s.kind == "ry":
            g2 = _ry_batched(angles_b[:, s.param])
            eye = _ID2.expand(bsz, 2, 2)
            if s.targets[0] == a:
                g = torch.einsum("bij,bkl->bikjl", g2, eye).reshape(bsz, 4, 4)
            else:
                g = torch.einsum("bij,bkl->bikjl", eye, g2).reshape(bsz, 4, 4)
        else:
            g = _cirx_batched(angles_b[:, s.param]) if s.kind == "cirx" \
                else CNOT.expand(bsz, 4, 4)
            if s.targets == (b_q, a):
                g = _SWAP4 @ g @ _SWAP4
        u = torch.bmm(g, u)
    return u


def _blocks_uniform(circuit: ParamCircuit, groups) -> bool:
    """True when every block repeats the first block's gate template."""
    ref = None
    for (sl, pair), slots in zip(circuit.blocks, groups):
        if any(q not in pair for s in slots for q in s.targets):
            return False
        sig = tuple((s.kind,
                     tuple(pair.index(q) for q in s.targets),
                     None if s.param is None else s.param - sl.start)
                    for s in slots)
        if ref is None:
            ref = sig
        elif sig != ref:
            return False
    return True


def _block_unitary_all(circuit: ParamCircuit, groups,
                       angles_b: torch.Tensor) -> torch.Tensor:
    """(n_blocks, B, 4, 4) composed unitaries for template-uniform blocks,
    built in one pass with the blocks folded into the batch dimension."""
    nb = len(circuit.blocks)
    bsz = angles_b.shape[0]
    ang = torch.stack([angles_b[:, sl] for sl, _ in circuit.blocks])
    ang = ang.reshape(nb * bsz, -1)
    sl0, pair0 = circuit.blocks[0]
    rel = [GateSlot(s.kind, s.targets, None if s.param is None
                    else s.param - sl0.start, s.layer) for s in groups[0]]
    u = _block_unitary_batched(rel, pair0, ang)
    return u.reshape(nb, bsz, 4, 4)


def apply_circuit_batched_raw(amps_b: torch.Tensor, circuit: ParamCircuit,
                              angles_b: torch.Tensor) -> torch.Tensor:
    """Apply the circuit with per-batch-row angles; angles_b (B, n_free).

    Circuits whose gates all sit inside two-qubit blocks are applied via
    one composed 4x4 unitary per block (much cheaper per gate); identical
    block templates are composed in a single pass over the gate sequence."""
    b = amps_b.shape[0]
    if circuit.sharing is not None:
        angles_b = angles_b[:, torch.as_tensor(circuit.sharing, dtype=torch.long)]
    n = circuit.n_qubits
    if circuit.blocks:
        groups = _block_slot_map(circuit)
        if groups is not None:
            if _blocks_uniform(circuit, groups):
                u_all = _block_unitary_all(circuit, groups, angles_b)
                for u, (sl, pair) in zip(u_all, circuit.blocks):
                    amps_b = apply_unitary_batched_raw(amps_b, u, pair, n)
                return amps_b
            for (sl, pair), slots in zip(circuit.blocks, groups):
                u = _block_unitary_batched(slots, pair, angles_b)
                amps_b = apply_unitary_batched_raw(amps_b, u, pair, n)
            return amps_b
    cnot_b = CNOT.expand(b, 4, 4)
    for s in circuit.slots:
        if s.kind == "ry":
            mats = _ry_batched(angles_b[:, s.param])
        elif s.kind == "cnot":
            mats = cnot_b
        else:
            mats = _cirx_batched(angles_b[:, s.param])
        amps_b = apply_unitary_batched_raw(amps_b, mats, s.targets, n)
    return amps_b


def apply_circuit(state: StateVector, circuit: ParamCircuit, angles) -> StateVector:
    if circuit.n_qubits != state.n_qubits:
        raise ArityError("circuit register size does not match state")
    angles = torch.as_tensor(np.asarray(angles, dtype=float))
    if angles.numel() != circuit.n_free:
        raise ArityError(f"expected {circuit.n_free} angles, got {angles.numel()}")
    amps = apply_circuit_raw(state.amps, circuit, angles)
    return StateVector(amps, state.layout, normalized=state.normalized)
