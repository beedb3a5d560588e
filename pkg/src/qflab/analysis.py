"""Post-hoc protocol characterization.

Mutual-information matrices and distance profiles, the feedback
correctability check (flip one measured bit, re-optimize under a quadratic
leash, read locality off the per-site angle deviation), and the
teacher-student expressivity harness with entropy-controlled initial states.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .circuits import (ParamCircuit, apply_circuit_raw,
                       build_feedback_ansatz, build_hardware_efficient,
                       _block_slot_map, _block_unitary_batched)
from .feedback import MeasurementRecord
from .optim import AdamState, adam_step
from .protocol import (LossSpec, ProtocolSpec, SpecError, _eval_policy,
                       _ghz_terms_raw, _policies_for, _target_matrix,
                       system_amplitudes_raw)
from .qsim import (P_FLOOR, QubitLayout, StateVector, entanglement_entropy,
                   outcome_distribution_raw, project_ancillas_raw,
                   reduced_density, von_neumann_entropy, zero_state)


class AnalysisError(ValueError):
    pass


STAGES = ("post-U1", "post-measurement", "post-feedback")


@dataclass
class MiMatrix:
    """Pairwise quantum mutual information in bits; diagonal fixed at 0."""

    values: np.ndarray
    stage: str = "post-U1"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise AnalysisError("MI matrix must be square")
        if not np.allclose(v, v.T, atol=1e-9):
            raise AnalysisError("MI matrix must be symmetric")
        if v.min() < -1e-9:
            raise AnalysisError("MI entries must be nonnegative")
        if self.stage not in STAGES:
            raise AnalysisError(f"unknown stage {self.stage!r}")
        self.values = v

    @property
    def n_qubits(self) -> int:
        return self.values.shape[0]


def mutual_information_matrix(state: StateVector,
                              stage: str = "post-U1") -> MiMatrix:
    """I(j,j') = S(rho_j) + S(rho_j') - S(rho_jj') over all qubit pairs."""
    n = state.n_qubits
    single = [von_neumann_entropy(reduced_density(state, (j,)).matrix)
              for j in range(n)]
    values = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            pair = von_neumann_entropy(reduced_density(state, (j, k)).matrix)
            mi = max(single[j] + single[k] - pair, 0.0)
            values[j, k] = values[k, j] = mi
    return MiMatrix(values, stage)


def averaged_mi(mi: MiMatrix, d: int) -> float:
    """Mean of I(j, j') over all pairs at separation d (all valid pairs
    counted, including chain edges)."""
    n = mi.n_qubits
    if not 1 <= d < n:
        raise AnalysisError(f"distance must lie in [1, {n - 1}]")
    vals = [mi.values[j, j + d] for j in range(n - d)]
    return float(np.mean(vals))


def mi_profile(mi: MiMatrix) -> list:
    """(d, averaged MI) rows for every distance."""
    return [(d, averaged_mi(mi, d)) for d in range(1, mi.n_qubits)]


def protocol_mi_stages(spec: ProtocolSpec, theta1, policy, m: int = None):
    """MI matrices after each of the three protocol operations.

    The measured branch is the given outcome m, or the most probable one.
    Returns {stage: MiMatrix} plus the outcome used, keyed "outcome".
    """
    policies = _policies_for(spec, policy)
    if spec.rounds != 1:
        raise SpecError("stage analysis supports single-round protocols")
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1, theta1_t)
    probs = outcome_distribution_raw(psi1, spec.layout).numpy()
    if m is None:
        m = int(np.argmax(probs))
    if probs[m] < P_FLOOR:
        raise AnalysisError(f"outcome {m} is below the probability floor")
    branch = project_ancillas_raw(psi1, spec.layout, m)
    branch = branch / np.sqrt(float(probs[m]))
    record = MeasurementRecord.from_int(m, spec.layout)
    assignment = spec.assignment() if spec.u2.blocks else None
    theta2 = _eval_policy(policies[0],
                          torch.as_tensor(policies[0].param_vector),
                          record, assignment)
    phi = apply_circuit_raw(branch, spec.u2, theta2)
    out = {
        "post-U1": mutual_information_matrix(
            StateVector(psi1, spec.layout), "post-U1"),
        "post-measurement": mutual_information_matrix(
            StateVector(branch, spec.layout), "post-measurement"),
        "post-feedback": mutual_information_matrix(
            StateVector(phi, spec.layout), "post-feedback"),
        "outcome": m,
    }
    return out


# -- correctability ---------------------------------------------------------

@dataclass
class CorrectabilityReport:
    flipped_index: int
    delta_theta: np.ndarray          # per site (qubit index), radians
    lam_pen: float
    baseline_loss: float
    perturbed_loss: float
    outcome: int
    outcome_flipped: int
    non_identifiable: bool = False


def _branch_loss_raw(sys_amps: torch.Tensor, lossspec: LossSpec):
    """Loss of one normalized post-feedback system state."""
    if lossspec.objective in ("manifold_fidelity", "single_fidelity"):
        tm = _target_matrix(lossspec.target)
        return 1.0 - torch.sum(torch.abs(tm.conj().T @ sys_amps) ** 2)
    if lossspec.objective == "ghz_lambda":
        return _ghz_terms_raw(sys_amps, lossspec.lam,
                              torch.ones((), dtype=torch.float64))
    raise SpecError(
        f"objective {lossspec.objective!r} has no per-branch form")


def _optimize_branch(spec, lossspec, branch, theta_init, anchor=None,
                     lam_pen=0.0, steps=2000, lr=0.05, tol=1e-12):
    """ADAM on the correction angles for one fixed measured branch."""
    theta = np.asarray(theta_init, dtype=float).copy()
    opt = AdamState.fresh(theta.size, lr=lr)
    anchor_t = None if anchor is None else torch.as_tensor(
        np.asarray(anchor, dtype=float))
    last = np.inf
    for _ in range(steps):
        t = torch.as_tensor(theta).clone().requires_grad_(True)
        phi = apply_circuit_raw(branch, spec.u2, t)
        loss = _branch_loss_raw(system_amplitudes_raw(phi, spec.layout),
                                lossspec)
        if anchor_t is not None and lam_pen > 0.0:
            loss = loss + lam_pen * torch.sum((t - anchor_t) ** 2)
        loss.backward()
        val = float(loss.detach())
        opt, theta = adam_step(opt, theta, t.grad.numpy())
        if abs(last - val) < tol:
            break
        last = val
    t = torch.as_tensor(theta)
    phi = apply_circuit_raw(branch, spec.u2, t)
    final = float(_branch_loss_raw(
        system_amplitudes_raw(phi, spec.layout), lossspec))
    return theta, final


def _angle_sites(circuit: ParamCircuit) -> np.ndarray:
    """Site (leftmost target qubit) of each free angle of the circuit."""
    sites = np.zeros(circuit.n_free, dtype=int)
    for s in circuit.slots:
        if s.param is None:
            continue
        p = s.param if circuit.sharing is None else circuit.sharing[s.param]
        sites[p] = s.targets[0]
    return sites


def correctability_check(spec: ProtocolSpec, lossspec: LossSpec, theta1,
                         policy, index: int, lam_pen: float, seed: int,
                         steps: int = 2000, lr: float = 0.05,
                         max_resamples: int = 100) -> CorrectabilityReport:
    """Flip one measured bit and re-optimize the correction under a
    quadratic leash; report the per-site angle deviation profile."""
    policies = _policies_for(spec, policy)
    na = spec.layout.n_ancilla
    if not 0 <= index < na:
        raise AnalysisError(f"ancilla index must lie in [0, {na - 1}]")
    if lam_pen < 0:
        raise AnalysisError("penalty weight must be >= 0")
    rng = np.random.default_rng(seed)
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1,
                             theta1_t).detach()
    probs = outcome_distribution_raw(psi1, spec.layout).numpy()
    probs = np.clip(probs, 0, None)
    flip_bit = 1 << (na - 1 - index)     # first ancilla is the MSB of M
    for _ in range(max_resamples):
        m = int(rng.choice(len(probs), p=probs / probs.sum()))
        m_flipped = m ^ flip_bit
        if probs[m_flipped] >= P_FLOOR:
            break
    else:
        raise AnalysisError("flipped branch stayed below the probability "
                            "floor for every sampled outcome")

    assignment = spec.assignment() if spec.u2.blocks else None
    record = MeasurementRecord.from_int(m, spec.layout)
    theta_init = _eval_policy(policies[0],
                              torch.as_tensor(policies[0].param_vector),
                              record, assignment).detach().numpy()
    branch = project_ancillas_raw(psi1, spec.layout, m)
    branch = branch / np.sqrt(float(probs[m]))
    theta_base, base_loss = _optimize_branch(
        spec, lossspec, branch, theta_init, steps=steps, lr=lr)

    branch_f = project_ancillas_raw(psi1, spec.layout, m_flipped)
    branch_f = branch_f / np.sqrt(float(probs[m_flipped]))
    theta_pert, pert_loss = _optimize_branch(
        spec, lossspec, branch_f, theta_base, anchor=theta_base,
        lam_pen=lam_pen, steps=steps, lr=lr)

    dev = np.abs(theta_pert - theta_base)
    sites = _angle_sites(spec.u2)
    delta = np.zeros(spec.layout.n_qubits)
    for p, s in enumerate(sites):
        delta[s] = max(delta[s], dev[p])
    return CorrectabilityReport(index, delta, lam_pen, base_loss, pert_loss,
                                m, m_flipped,
                                non_identifiable=(lam_pen == 0.0))


# -- entropy-controlled random states and teacher-student -------------------

def random_entropy_state(n_qubits: int, s0: float, seed: int) -> StateVector:
    """Random pure state whose half-chain entanglement entropy is s0 bits.

    Haar-random orthonormal Schmidt bases on each half of the middle cut,
    mixed with a geometric Schmidt spectrum whose decay rate is solved by
    bisection to land on s0 (within 1e-3)."""
    if n_qubits < 1:
        raise AnalysisError("need at least one qubit")
    lo = n_qubits // 2
    hi = n_qubits - lo
    k = 2 ** min(lo, hi)
    if not 0.0 <= s0 <= np.log2(k) + 1e-12:
        raise AnalysisError(
            f"entropy {s0} infeasible on {n_qubits} qubits (max {np.log2(k)})")
    rng = np.random.default_rng(seed)

    def haar_basis(dim, cols):
        g = rng.standard_normal((dim, cols)) + 1j * rng.standard_normal((dim, cols))
        q, r = np.linalg.qr(g)
        return q * (np.diag(r) / np.abs(np.diag(r)))

    def entropy_of(beta):
        p = np.exp(-beta * np.arange(k))
        p /= p.sum()
        p = p[p > P_FLOOR]
        return -np.sum(p * np.log2(p))

    if s0 == 0.0 or k == 1:
        spectrum = np.zeros(k)
        spectrum[0] = 1.0
    else:
        beta_lo, beta_hi = 0.0, 1.0
        while entropy_of(beta_hi) > s0:
            beta_hi *= 2
        for _ in range(200):
            mid = 0.5 * (beta_lo + beta_hi)
            if entropy_of(mid) > s0:
                beta_lo = mid
            else:
                beta_hi = mid
        beta = 0.5 * (beta_lo + beta_hi)
        spectrum = np.exp(-beta * np.arange(k))
        spectrum /= spectrum.sum()

    left = haar_basis(2 ** hi, k)      # high-index qubits (row block)
    right = haar_basis(2 ** lo, k)
    mat = (left * np.sqrt(spectrum)) @ right.T
    amps = torch.as_tensor(mat.reshape(-1))
    return StateVector(amps, QubitLayout.all_system(n_qubits))


@dataclass
class ExpressivityPoint:
    d_teacher: int
    d_student: int
    s0: float
    infidelity: float
    restarts: int

    def __post_init__(self):
        if not -1e-9 <= self.infidelity <= 1.0 + 1e-9:
            raise AnalysisError("infidelity must lie in [0, 1]")


def _optimize_overlap(psi0, target, circuit, theta_init, steps, lr, tol=1e-14):
    """Minimize 1 - |<target|U(theta)|psi0>|^2 with ADAM."""
    theta = np.asarray(theta_init, dtype=float).copy()
    opt = AdamState.fresh(theta.size, lr=lr)
    best = np.inf
    last = np.inf
    for _ in range(steps):
        t = torch.as_tensor(theta).clone().requires_grad_(True)
        out = apply_circuit_raw(psi0, circuit, t)
        loss = 1.0 - torch.abs(torch.sum(target.conj() * out)) ** 2
        loss.backward()
        val = float(loss.detach())
        best = min(best, val)
        opt, theta = adam_step(opt, theta, t.grad.numpy())
        if abs(last - val) < tol:
            break
        last = val
    t = torch.as_tensor(theta)
    out = apply_circuit_raw(psi0, circuit, t)
    final = float(1.0 - torch.abs(torch.sum(target.conj() * out)) ** 2)
    return min(best, final), theta


def teacher_student(layout: QubitLayout, d_teacher: int, d_student: int,
                    s0: float, restarts: int, seed: int,
                    steps: int = 3000, lr: float = 0.05) -> ExpressivityPoint:
    """Best-of-restarts infidelity of a student circuit reproducing a random
    teacher circuit's action on an entropy-s0 initial state."""
    if d_teacher < 1 or d_student < 1:
        raise AnalysisError("depths must be >= 1")
    if restarts < 1:
        raise AnalysisError("need at least one restart")
    rng = np.random.default_rng(seed)
    psi0 = random_entropy_state(layout.n_qubits, s0, seed).amps
    teacher = build_hardware_efficient(layout, d_teacher)
    theta_t = rng.uniform(-np.pi, np.pi, teacher.n_free)
    target = apply_circuit_raw(psi0, teacher, torch.as_tensor(theta_t)).detach()
    student = build_hardware_efficient(layout, d_student)
    best = np.inf
    for _ in range(restarts):
        init = rng.uniform(-np.pi, np.pi, student.n_free)
        inf, _ = _optimize_overlap(psi0, target, student, init, steps, lr)
        best = min(best, inf)
    return ExpressivityPoint(d_teacher, d_student, s0, max(best, 0.0),
                             restarts)


def random_orthogonal(dim: int, rng) -> np.ndarray:
    """Haar-random real orthogonal matrix with det +1."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_unitary(dim: int, rng) -> np.ndarray:
    """Haar-random complex unitary matrix."""
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def block_universality(block_depth: int, n_targets: int, seed: int,
                       restarts: int = 5, steps: int = 4000,
                       lr: float = 0.05) -> list:
    """Worst-case gate infidelity of the two-qubit feedback block against
    Haar-random two-qubit unitary targets; one value per target.

    Gate infidelity is global-phase-invariant: 1 - |tr(V^dag U)|^2 / 16."""
    rng = np.random.default_rng(seed)
    layout = QubitLayout.all_system(2)
    circ = build_feedback_ansatz(layout, block_depth)
    groups = _block_slot_map(circ)
    slots, (_, pair) = groups[0], circ.blocks[0]

    def gate_infidelity(theta_t, v_t):
        u = _block_unitary_batched(slots, pair, theta_t.unsqueeze(0))[0]
        return 1.0 - torch.abs(torch.sum(v_t.conj() * u)) ** 2 / 16.0

    out = []
    for _ in range(n_targets):
        v = torch.as_tensor(random_unitary(4, rng),
                            dtype=torch.complex128)
        best = np.inf
        for _ in range(restarts):
            theta = rng.uniform(-np.pi, np.pi, circ.n_free)
            opt = AdamState.fresh(theta.size, lr=lr)
            last = np.inf
            for _ in range(steps):
                t = torch.as_tensor(theta).clone().requires_grad_(True)
                loss = gate_infidelity(t, v)
                loss.backward()
                val = float(loss.detach())
                opt, theta = adam_step(opt, theta, t.grad.numpy())
                if abs(last - val) < 1e-16:
                    break
                last = val
            best = min(best, val)
        out.append(max(best, 0.0))
    return out


# -- CSV output -------------------------------------------------------------

def mi_to_csv(mi: MiMatrix, path) -> None:
    n = mi.n_qubits
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", mi.stage])
        w.writerow(["qubit"] + list(range(n)))
        for j in range(n):
            w.writerow([j] + [repr(float(v)) for v in mi.values[j]])


def mi_profile_to_csv(mi: MiMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["d", "avg_mi", "stage"])
        for d, v in mi_profile(mi):
            w.writerow([d, repr(float(v)), mi.stage])


def correctability_to_csv(report: CorrectabilityReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["flipped_index", report.flipped_index])
        w.writerow(["outcome", report.outcome])
        w.writerow(["outcome_flipped", report.outcome_flipped])
        w.writerow(["lam_pen", repr(report.lam_pen)])
        w.writerow(["baseline_loss", repr(report.baseline_loss)])
        w.writerow(["perturbed_loss", repr(report.perturbed_loss)])
        w.writerow(["non_identifiable", int(report.non_identifiable)])
        w.writerow(["site", "delta_theta"])
        for j, v in enumerate(report.delta_theta):
            w.writerow([j, repr(float(v))])


def expressivity_to_csv(points: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["d_teacher", "d_student", "s0", "infidelity", "restarts"])
        for p in points:
            w.writerow([p.d_teacher, p.d_student, repr(float(p.s0)),
                        repr(float(p.infidelity)), p.restarts])
