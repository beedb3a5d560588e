"""Measure-and-feedback pipeline and loss functions.

The torch-graph cores (`*_raw`) keep autograd connectivity so the gradients
module can differentiate every loss exactly; the public operations wrap
them and return plain floats / StateVectors.

Because every exact-enumeration objective here is quadratic in the state,
branch renormalization cancels: sums run over unnormalized branches
U2(f(M;W)) <M|_A U1 |0>, which is both simpler and numerically safer than
dividing by small branch probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .circuits import (ParamCircuit, apply_circuit_batched_raw,
                       apply_circuit_raw, apply_unitary_batched_raw)
from .feedback import (MeasurementRecord, RnnPolicy, TabularPolicy,
                       circuit_assignment)
from .qsim import (CDTYPE, P_FLOOR, ProbTable, QubitLayout, StateVector,
                   outcome_distribution_raw, project_ancillas_raw, zero_state)


class SpecError(ValueError):
    pass


@dataclass
class ProtocolSpec:
    layout: QubitLayout
    u1: ParamCircuit
    u2: ParamCircuit
    rounds: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise SpecError("rounds must be >= 1")
        if self.u1.n_qubits != self.layout.n_qubits:
            raise SpecError("u1 register size does not match layout")
        if self.u2.n_qubits != self.layout.n_qubits:
            raise SpecError("u2 register size does not match layout")
        sys_q = set(self.layout.system_indices)
        for s in self.u2.slots:
            if any(q not in sys_q for q in s.targets):
                raise SpecError("u2 must act on system qubits only")

    def assignment(self):
        return circuit_assignment(self.layout, self.u2)


@dataclass
class OutcomeBranch:
    m: MeasurementRecord
    prob: float
    state: StateVector


@dataclass
class LossSpec:
    """Objective plus optional ancilla regularization.

    objective: manifold_fidelity | single_fidelity | ghz_lambda | energy
               | per_site_multisize
    target: TargetManifold, StateVector, or QubitOperator as appropriate.
    """

    objective: str
    target: object = None
    lam: float = 0.0
    reg_weight: float = 0.0
    reg_ratio: float = 2.0
    mode: str = "exact"            # "exact" | "sampled"
    batch: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise SpecError("lambda must lie in [0, 1]")
        if self.reg_ratio <= 1.0:
            raise SpecError("regularization ratio must exceed 1")


def _policies_for(spec: ProtocolSpec, policy):
    pols = policy if isinstance(policy, (list, tuple)) else [policy]
    if len(pols) != spec.rounds:
        raise SpecError(f"need {spec.rounds} policies, got {len(pols)}")
    return list(pols)


def _eval_policy(policy, params_t, record, assignment):
    if isinstance(policy, RnnPolicy):
        return policy.eval_torch(params_t, record, assignment)
    return policy.eval_torch(params_t, record)


def enumerate_branches_raw(spec: ProtocolSpec, theta1_t: torch.Tensor,
                           policies, params_ts, psi1=None):
    """Yield (outcome ints tuple, prob float, unnormalized branch amps).

    Branch amplitudes keep the autograd graph through theta1 and the
    policy parameters. `psi1` optionally injects a precomputed (possibly
    detached) post-U1 state for cheap feedback-only passes.
    """
    layout = spec.layout
    na = layout.n_ancilla
    assignment = spec.assignment() if spec.u2.blocks else None
    if psi1 is None:
        psi1 = apply_circuit_raw(zero_state(layout).amps, spec.u1, theta1_t)
    frontier = [((), psi1)]
    for rnd in range(spec.rounds):
        policy, params_t = policies[rnd], params_ts[rnd]
        nxt = []
        for ms, amps in frontier:
            if rnd > 0:
                amps = apply_circuit_raw(amps, spec.u1, theta1_t)
            probs = outcome_distribution_raw(amps, layout).detach().numpy()
            for m in range(2**na):
                if probs[m] < P_FLOOR:
                    continue
                branch = project_ancillas_raw(amps, layout, m)
                record = MeasurementRecord.from_int(m, layout)
                theta2 = _eval_policy(policy, params_t, record, assignment)
                phi = apply_circuit_raw(branch, spec.u2, theta2)
                nxt.append((ms + (m,), phi))
        frontier = nxt
    for ms, phi in frontier:
        prob = float(torch.sum(torch.abs(phi.detach()) ** 2))
        yield ms, prob, phi


def _params_ts(spec, policies):
    return [torch.as_tensor(p.param_vector) for p in policies]


def run_branches(spec: ProtocolSpec, theta1, policy) -> list:
    """All branches with P(M) >= the probability floor, normalized, ordered
    by outcome value."""
    policies = _policies_for(spec, policy)
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    out = []
    for ms, prob, phi in enumerate_branches_raw(
            spec, theta1_t, policies, _params_ts(spec, policies)):
        state = StateVector(phi.detach() / np.sqrt(prob), spec.layout)
        record = MeasurementRecord.from_int(ms[-1], spec.layout)
        out.append(OutcomeBranch(record, prob, state))
    return out


def sample_run(spec: ProtocolSpec, theta1, policy, rng) -> OutcomeBranch:
    """Draw one branch with probability P(M)."""
    policies = _policies_for(spec, policy)
    if spec.rounds != 1:
        raise SpecError("sampling supports single-round protocols")
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1, theta1_t)
    probs = outcome_distribution_raw(psi1, spec.layout).numpy()
    m = int(rng.choice(len(probs), p=probs / probs.sum()))
    branch = project_ancillas_raw(psi1, spec.layout, m)
    record = MeasurementRecord.from_int(m, spec.layout)
    assignment = spec.assignment() if spec.u2.blocks else None
    theta2 = _eval_policy(policies[0], _params_ts(spec, policies)[0],
                          record, assignment)
    phi = apply_circuit_raw(branch, spec.u2, theta2)
    prob = float(probs[m])
    return OutcomeBranch(record, prob,
                         StateVector(phi.detach() / np.sqrt(prob), spec.layout))


def _eval_policy_batch(policy, params_t, ms, layout, assignment):
    """(B, n_u2_params) feedback angle rows for the listed outcomes."""
    if isinstance(policy, TabularPolicy):
        table = params_t.reshape(2**policy.n_ancilla, policy.n_angles)
        return table[torch.as_tensor(ms, dtype=torch.long)]
    rows = [policy.eval_torch(params_t, MeasurementRecord.from_int(m, layout),
                              assignment) for m in ms]
    return torch.stack(rows)


def branch_batch_raw(spec: ProtocolSpec, theta1_t: torch.Tensor, policy,
                     params_t: torch.Tensor, psi1=None):
    """Single-round branch ensemble as one batch.

    Returns (outcome ints, unnormalized post-feedback amplitudes (B, 2^n)).
    """
    layout = spec.layout
    if psi1 is None:
        psi1 = apply_circuit_raw(zero_state(layout).amps, spec.u1, theta1_t)
    probs = outcome_distribution_raw(psi1, layout).detach().numpy()
    ms = [m for m in range(2**layout.n_ancilla) if probs[m] >= P_FLOOR]
    branches = torch.stack(
        [project_ancillas_raw(psi1, layout, m) for m in ms])
    assignment = spec.assignment() if spec.u2.blocks else None
    angles_b = _eval_policy_batch(policy, params_t, ms, layout, assignment)
    phi_b = apply_circuit_batched_raw(branches, spec.u2, angles_b)
    return ms, phi_b


def system_amplitudes_batched(amps_b: torch.Tensor,
                              layout: QubitLayout) -> torch.Tensor:
    b = amps_b.shape[0]
    n = layout.n_qubits
    idx = [slice(None)] * (n + 1)
    for q in layout.ancilla_indices:
        idx[n - q] = 0
    return amps_b.reshape([b] + [2] * n)[tuple(idx)].reshape(b, -1)


def system_amplitudes_raw(amps: torch.Tensor, layout: QubitLayout) -> torch.Tensor:
    """Amplitudes over the system-only register, assuming ancillas in |0>."""
    n = layout.n_qubits
    idx = [slice(None)] * n
    for q in layout.ancilla_indices:
        idx[n - 1 - q] = 0
    return amps.reshape([2] * n)[tuple(idx)].reshape(-1)


def _target_matrix(target) -> torch.Tensor:
    """(dim, k) complex matrix of target system states."""
    if hasattr(target, "basis"):            # TargetManifold
        cols = [s.amps.detach() for s in target.basis]
    else:                                   # single StateVector
        cols = [target.amps.detach()]
    return torch.stack(cols, dim=1).to(CDTYPE)


def fidelity_sum_raw(branches, layout, target_mat) -> torch.Tensor:
    """Sum over branches and target columns of |<t|branch>|^2 (unnormalized
    branches make this the ensemble fidelity)."""
    total = torch.zeros((), dtype=torch.float64)
    for _, _, phi in branches:
        sys_amps = system_amplitudes_raw(phi, layout)
        overlaps = target_mat.conj().T @ sys_amps
        total = total + torch.sum(torch.abs(overlaps) ** 2)
    return total


def manifold_fidelity(spec: ProtocolSpec, theta1, policy, manifold) -> float:
    policies = _policies_for(spec, policy)
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    branches = enumerate_branches_raw(spec, theta1_t, policies,
                                      _params_ts(spec, policies))
    return float(fidelity_sum_raw(branches, spec.layout,
                                  _target_matrix(manifold)))


def ghz_lambda_loss(state, lam: float) -> float:
    """App.-style attenuated GHZ infidelity of a single (system) state."""
    if not 0.0 <= lam <= 1.0:
        raise SpecError("lambda must lie in [0, 1]")
    amps = state.amps.detach() if isinstance(state, StateVector) else torch.as_tensor(state, dtype=CDTYPE)
    return float(_ghz_terms_raw(amps, lam, torch.ones((), dtype=torch.float64)))


def _ghz_terms_raw(sys_amps: torch.Tensor, lam: float, prob) -> torch.Tensor:
    a0 = sys_amps[0]
    a1 = sys_amps[-1]
    const = (1.0 - lam / 2.0) * prob
    quad = (1.0 - lam) / 2.0 * (torch.abs(a0) ** 2 + torch.abs(a1) ** 2)
    cross = torch.real(a0 * a1.conj())
    return const - quad - cross


def ancilla_regularization_raw(probs_t: torch.Tensor, n_ancilla: int,
                               r: float) -> torch.Tensor:
    """Quadratic hinge pushing every outcome probability into a window of
    ratio r around uniform. Zero-probability outcomes are clamped at the
    probability floor so collapsed distributions stay penalized."""
    c = np.log2(r) / (2 * n_ancilla)
    p = torch.clamp(probs_t, min=P_FLOOR)
    d = 1.0 + torch.log2(p) / n_ancilla
    above = torch.clamp(d - c, min=0.0)
    below = torch.clamp(-d - c, min=0.0)
    return torch.mean(above**2 + below**2)


def ancilla_regularization(table: ProbTable, r: float = 2.0) -> float:
    if r <= 1.0:
        raise SpecError("ratio must exceed 1")
    return float(ancilla_regularization_raw(
        torch.as_tensor(table.probs), table.n_ancilla, r))


def objective_raw(spec: ProtocolSpec, lossspec: LossSpec,
                  theta1_t: torch.Tensor, policies, params_ts,
                  psi1=None) -> torch.Tensor:
    """Exact-enumeration objective value (torch scalar, graph-preserving)."""
    obj = lossspec.objective
    if spec.rounds == 1:
        _, phi_b = branch_batch_raw(spec, theta1_t, policies[0],
                                    params_ts[0], psi1=psi1)
        sys_b = system_amplitudes_batched(phi_b, spec.layout)
        if obj in ("manifold_fidelity", "single_fidelity"):
            overlaps = sys_b @ _target_matrix(lossspec.target).conj()
            return 1.0 - torch.sum(torch.abs(overlaps) ** 2)
        if obj == "ghz_lambda":
            a0, a1 = sys_b[:, 0], sys_b[:, -1]
            probs = torch.sum(torch.abs(sys_b) ** 2, dim=1)
            lam = lossspec.lam
            terms = ((1.0 - lam / 2.0) * probs
                     - (1.0 - lam) / 2.0 * (torch.abs(a0) ** 2
                                            + torch.abs(a1) ** 2)
                     - torch.real(a0 * a1.conj()))
            return torch.sum(terms)
        if obj == "energy":
            ham = lossspec.target
            total = torch.zeros((), dtype=torch.float64)
            bsz = sys_b.shape[0]
            for coeff, mat, targets in ham.terms:
                m = torch.as_tensor(mat, dtype=CDTYPE).expand(
                    bsz, mat.shape[0], mat.shape[1])
                applied = apply_unitary_batched_raw(sys_b, m, targets,
                                                    ham.n_qubits)
                total = total + coeff * torch.real(
                    torch.sum(sys_b.conj() * applied))
            return total
        raise SpecError(f"objective {obj!r} is not enumerable")

    branches = enumerate_branches_raw(spec, theta1_t, policies, params_ts,
                                      psi1=psi1)
    if obj in ("manifold_fidelity", "single_fidelity"):
        fid = fidelity_sum_raw(branches, spec.layout,
                               _target_matrix(lossspec.target))
        return 1.0 - fid
    if obj == "ghz_lambda":
        total = torch.zeros((), dtype=torch.float64)
        for _, _, phi in branches:
            sys_amps = system_amplitudes_raw(phi, spec.layout)
            prob = torch.sum(torch.abs(sys_amps) ** 2)
            total = total + _ghz_terms_raw(sys_amps, lossspec.lam, prob)
        return total
    if obj == "energy":
        total = torch.zeros((), dtype=torch.float64)
        for _, _, phi in branches:
            sys_amps = system_amplitudes_raw(phi, spec.layout)
            total = total + lossspec.target.expectation_raw(sys_amps)
        return total
    raise SpecError(f"objective {lossspec.objective!r} is not enumerable")


def total_loss_raw(spec: ProtocolSpec, lossspec: LossSpec,
                   theta1_t: torch.Tensor, policies, params_ts,
                   psi1=None, reg: bool = True) -> torch.Tensor:
    loss = objective_raw(spec, lossspec, theta1_t, policies, params_ts,
                         psi1=psi1)
    if reg and lossspec.reg_weight != 0.0:
        pre = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1,
                                theta1_t) if psi1 is None else psi1
        probs = outcome_distribution_raw(pre, spec.layout)
        loss = loss + lossspec.reg_weight * ancilla_regularization_raw(
            probs, spec.layout.n_ancilla, lossspec.reg_ratio)
    return loss


def total_loss(spec: ProtocolSpec, lossspec: LossSpec, theta1, policy) -> float:
    policies = _policies_for(spec, policy)
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    return float(total_loss_raw(spec, lossspec, theta1_t, policies,
                                _params_ts(spec, policies)))


def energy_loss(spec: ProtocolSpec, theta1, policy, hamiltonian) -> float:
    ls = LossSpec("energy", target=hamiltonian)
    return total_loss(spec, ls, theta1, policy)


def per_site_multisize_loss_raw(specs_by_size: dict, targets_by_size: dict,
                                theta1_t: torch.Tensor, policy,
                                params_t: torch.Tensor, batch: int, rng,
                                psi1_by_size: dict = None) -> torch.Tensor:
    """Sampled multi-size loss 1 - mean_sizes mean_M F(M, Ns)^(1/Ns).

    F is branch-conditional: |<t|U2|psi(M)>|^2 / P(M) with M drawn from
    P(M). Sampled outcomes are treated as fixed in the gradient."""
    for ns, spec in specs_by_size.items():
        if spec.u1.sharing is None:
            raise SpecError("multi-size loss requires a tied u1")
    sizes = sorted(specs_by_size)
    total = torch.zeros((), dtype=torch.float64)
    for ns in sizes:
        spec = specs_by_size[ns]
        target_mat = _target_matrix(targets_by_size[ns])
        assignment = spec.assignment() if spec.u2.blocks else None
        if psi1_by_size is not None and ns in psi1_by_size:
            psi1 = psi1_by_size[ns]
        else:
            psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1,
                                     theta1_t)
        probs = outcome_distribution_raw(psi1, spec.layout).detach().numpy()
        probs = np.clip(probs, 0, None)
        draw = rng.choice(len(probs), size=batch, p=probs / probs.sum())
        acc = torch.zeros((), dtype=torch.float64)
        for m in draw:
            branch = project_ancillas_raw(psi1, spec.layout, int(m))
            record = MeasurementRecord.from_int(int(m), spec.layout)
            theta2 = _eval_policy(policy, params_t, record, assignment)
            phi = apply_circuit_raw(branch, spec.u2, theta2)
            sys_amps = system_amplitudes_raw(phi, spec.layout)
            pm = torch.sum(torch.abs(branch) ** 2)
            fid = torch.sum(torch.abs(target_mat.conj().T @ sys_amps) ** 2) / pm
            acc = acc + torch.clamp(fid, min=P_FLOOR) ** (1.0 / ns)
        total = total + acc / batch
    return 1.0 - total / len(sizes)


def per_site_multisize_loss(specs_by_size: dict, targets_by_size: dict,
                            theta1, policy, batch: int, rng) -> float:
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
    params_t = torch.as_tensor(policy.param_vector)
    return float(per_site_multisize_loss_raw(
        specs_by_size, targets_by_size, theta1_t, policy, params_t, batch, rng))
