"""Exact reverse-mode gradients of every loss, plus the finite-difference
verification harness.

Gradients are obtained by reverse-mode differentiation through the full
computation (gates, branch weights, feedback composition, parameter tying);
`fd_check` provides the independent central-difference oracle. In sampled
mode the drawn outcomes are treated as fixed, so the gradient is the exact
derivative of the per-sample surrogate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .circuits import apply_circuit_raw
from .protocol import (LossSpec, ProtocolSpec, _eval_policy, _ghz_terms_raw,
                       _policies_for, _target_matrix,
                       ancilla_regularization_raw, system_amplitudes_raw,
                       total_loss_raw)
from .feedback import MeasurementRecord
from .qsim import P_FLOOR, outcome_distribution_raw, project_ancillas_raw, zero_state


@dataclass
class GradientVector:
    d_theta1: np.ndarray
    d_policy: np.ndarray          # single round; list for multi-round

    def flat(self) -> np.ndarray:
        pols = self.d_policy if isinstance(self.d_policy, list) else [self.d_policy]
        return np.concatenate([self.d_theta1] + pols)


def sampled_objective_raw(spec: ProtocolSpec, lossspec: LossSpec,
                          theta1_t: torch.Tensor, policies, params_ts,
                          rng, psi1=None) -> torch.Tensor:
    """Monte-Carlo surrogate: mean over drawn M of the branch-conditional
    per-sample loss."""
    if spec.rounds != 1:
        raise ValueError("sampled mode supports single-round protocols")
    policy, params_t = policies[0], params_ts[0]
    assignment = spec.assignment() if spec.u2.blocks else None
    if psi1 is None:
        psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1, theta1_t)
    probs = outcome_distribution_raw(psi1, spec.layout).detach().numpy()
    probs = np.clip(probs, 0, None)
    draws = rng.choice(len(probs), size=lossspec.batch, p=probs / probs.sum())
    acc = torch.zeros((), dtype=torch.float64)
    for m in draws:
        branch = project_ancillas_raw(psi1, spec.layout, int(m))
        record = MeasurementRecord.from_int(int(m), spec.layout)
        theta2 = _eval_policy(policy, params_t, record, assignment)
        phi = apply_circuit_raw(branch, spec.u2, theta2)
        sys_amps = system_amplitudes_raw(phi, spec.layout)
        pm = torch.sum(torch.abs(sys_amps) ** 2)
        if lossspec.objective in ("manifold_fidelity", "single_fidelity"):
            tm = _target_matrix(lossspec.target)
            fid = torch.sum(torch.abs(tm.conj().T @ sys_amps) ** 2) / pm
            acc = acc + (1.0 - fid)
        elif lossspec.objective == "ghz_lambda":
            acc = acc + _ghz_terms_raw(sys_amps / torch.sqrt(pm),
                                       lossspec.lam,
                                       torch.ones((), dtype=torch.float64))
        else:
            raise ValueError(
                f"objective {lossspec.objective!r} has no sampled mode")
    return acc / lossspec.batch


def loss_and_grad(spec: ProtocolSpec, lossspec: LossSpec, theta1, policy,
                  wrt=("theta1", "policy"), psi1=None, rng=None):
    """Loss value and its exact gradient blocks.

    `psi1` may carry a precomputed detached post-U1 state for cheap
    policy-only passes (theta1 gradients are then zero by construction)."""
    policies = _policies_for(spec, policy)
    theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float)).clone()
    theta1_t.requires_grad_("theta1" in wrt and psi1 is None)
    params_ts = []
    for p in policies:
        t = torch.as_tensor(p.param_vector).clone()
        t.requires_grad_("policy" in wrt)
        params_ts.append(t)

    if lossspec.mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng")
        loss = sampled_objective_raw(spec, lossspec, theta1_t, policies,
                                     params_ts, rng, psi1=psi1)
        if lossspec.reg_weight != 0.0:
            pre = psi1 if psi1 is not None else apply_circuit_raw(
                zero_state(spec.layout).amps, spec.u1, theta1_t)
            probs = outcome_distribution_raw(pre, spec.layout)
            loss = loss + lossspec.reg_weight * ancilla_regularization_raw(
                probs, spec.layout.n_ancilla, lossspec.reg_ratio)
    else:
        loss = total_loss_raw(spec, lossspec, theta1_t, policies, params_ts,
                              psi1=psi1)
    if loss.requires_grad:
        loss.backward()

    d_theta1 = (theta1_t.grad.numpy().copy() if theta1_t.grad is not None
                else np.zeros(theta1_t.numel()))
    d_pols = [(t.grad.numpy().copy() if t.grad is not None
               else np.zeros(t.numel())) for t in params_ts]
    d_policy = d_pols if len(d_pols) > 1 else d_pols[0]
    return float(loss.detach()), GradientVector(d_theta1, d_policy)


def fd_check(spec: ProtocolSpec, lossspec: LossSpec, theta1, policy,
             eps: float = 1e-4, report_path=None) -> float:
    """Worst-coordinate relative error of the analytic gradient against
    central finite differences (exact-enumeration mode only)."""
    if lossspec.mode != "exact":
        raise ValueError("fd_check requires deterministic exact mode")
    policies = _policies_for(spec, policy)
    theta1 = np.asarray(theta1, dtype=float)
    _, grad = loss_and_grad(spec, lossspec, theta1, policy)
    analytic = grad.flat()

    def value(th, pvecs):
        saved = [p.param_vector for p in policies]
        for p, v in zip(policies, pvecs):
            p.set_params(v)
        try:
            from .protocol import total_loss
            return total_loss(spec, lossspec, th, policy)
        finally:
            for p, v in zip(policies, saved):
                p.set_params(v)

    pvecs = [p.param_vector for p in policies]
    numeric = np.zeros_like(analytic)
    blocks = [("theta1", theta1)] + [
        (f"policy{i}", v) for i, v in enumerate(pvecs)]
    rows = []
    idx = 0
    for bname, base in blocks:
        for j in range(base.size):
            plus = [v.copy() for v in pvecs]
            minus = [v.copy() for v in pvecs]
            th_p, th_m = theta1.copy(), theta1.copy()
            if bname == "theta1":
                th_p[j] += eps
                th_m[j] -= eps
            else:
                b = int(bname[6:])
                plus[b][j] += eps
                minus[b][j] -= eps
            numeric[idx] = (value(th_p, plus) - value(th_m, minus)) / (2 * eps)
            # damped relative error: near-zero coordinates are judged on an
            # absolute scale so fd truncation noise does not dominate
            scale = abs(analytic[idx]) + abs(numeric[idx]) + 1e-3
            rows.append((bname, j, analytic[idx], numeric[idx],
                         abs(analytic[idx] - numeric[idx]) / scale))
            idx += 1

    if report_path is not None:
        with open(report_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["block", "coordinate", "analytic", "numeric",
                        "relative_error"])
            w.writerows(rows)
    return max(r[4] for r in rows)
