"""ADAM optimization with the asymmetric update-frequency loop, schedules,
and annealed parameter noise.

The update loop follows the two-block pattern: one ADAM step on the
pre-measurement angles per epoch, then `freq` sequential ADAM steps on the
feedback parameters, each using the gradient refreshed at the already
updated feedback parameters (the pre-measurement state is fixed during the
inner loop, which also makes the inner gradients cheap).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .circuits import apply_circuit_raw
from .gradients import loss_and_grad
from .protocol import (LossSpec, ProtocolSpec, _policies_for,
                       ancilla_regularization_raw, objective_raw)
from .qsim import outcome_distribution_raw, shannon_entropy, ProbTable, \
    entanglement_entropy, StateVector, zero_state


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              lr: float = None):
    """One bias-corrected ADAM update; returns (state, new params)."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient shape mismatch")
    lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    return state, params - lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class ScheduleSpec:
    """Learning-rate, update-frequency and noise schedules.

    lr: constant at lr_base; "step" drops to lr_final at lr_switch_epoch;
    "cosine" anneals lr_base -> lr_final over the run.
    freq: linear freq_start -> freq_end over freq_ramp_epochs, rounded to
    the nearest integer, flat afterwards.
    noise: amplitude linear noise_start -> 0 at noise_end_epoch.
    """

    lr_kind: str = "constant"
    lr_base: float = 1e-3
    lr_final: float = 1e-5
    lr_switch_epoch: int = 0
    freq_start: int = 1
    freq_end: int = 1
    freq_ramp_epochs: int = 0
    noise_start: float = 0.0
    noise_end_epoch: int = 0

    def __post_init__(self):
        if self.lr_base <= 0:
            raise ValueError("lr must be positive")
        if self.freq_start < 0 or self.freq_end < 0:
            raise ValueError("frequencies must be >= 0")
        if self.noise_start < 0:
            raise ValueError("noise amplitude must be >= 0")

    def lr(self, epoch: int, total_epochs: int) -> float:
        if self.lr_kind == "constant":
            return self.lr_base
        if self.lr_kind == "step":
            return self.lr_base if epoch < self.lr_switch_epoch else self.lr_final
        if self.lr_kind == "cosine":
            t = min(epoch / max(total_epochs - 1, 1), 1.0)
            return self.lr_final + 0.5 * (self.lr_base - self.lr_final) * (
                1 + np.cos(np.pi * t))
        raise ValueError(f"unknown lr schedule {self.lr_kind!r}")

    def freq(self, epoch: int) -> int:
        if self.freq_ramp_epochs <= 0 or epoch >= self.freq_ramp_epochs:
            return int(self.freq_end)
        frac = epoch / self.freq_ramp_epochs
        return int(round(self.freq_start + frac * (self.freq_end - self.freq_start)))

    def noise(self, epoch: int) -> float:
        if self.noise_start == 0.0 or epoch >= self.noise_end_epoch:
            return 0.0
        return self.noise_start * (1 - epoch / self.noise_end_epoch)


@dataclass
class RunRecord:
    seed: int
    config: dict
    metrics: list = field(default_factory=list)
    theta1: np.ndarray = None
    policy_params: list = field(default_factory=list)
    aborted: bool = False
    early_stopped: bool = False
    gradient_calls: list = field(default_factory=list)   # (epoch, block) audit

    COLUMNS = ["epoch", "loss", "infidelity", "shannon_h", "ent_entropy",
               "reg_term", "lr", "freq", "noise"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.metrics:
                w.writerow([repr(row[c]) if isinstance(row[c], float)
                            else row[c] for c in self.COLUMNS])

    @property
    def final(self) -> dict:
        return self.metrics[-1]


class NanLossError(RuntimeError):
    pass


def update_parameters(spec: ProtocolSpec, lossspec: LossSpec, theta1,
                      policy, freq: int, opt_theta: AdamState,
                      opt_policy, lr: float, rng=None, record=None,
                      epoch: int = -1):
    """One asymmetric update: one theta1 step, then `freq` refreshed policy
    steps at fixed theta1 (and fixed pre-measurement state)."""
    policies = _policies_for(spec, policy)
    opts = opt_policy if isinstance(opt_policy, list) else [opt_policy]
    val, grad = loss_and_grad(spec, lossspec, theta1, policy, rng=rng)
    if record is not None:
        record.gradient_calls.append((epoch, "theta1"))
    if not np.isfinite(val):
        raise NanLossError(f"loss became {val}")
    opt_theta, theta1_new = adam_step(opt_theta, np.asarray(theta1, float),
                                      grad.d_theta1, lr)

    if freq > 0:
        theta1_t = torch.as_tensor(np.asarray(theta1, dtype=float))
        psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1,
                                 theta1_t).detach()
        for _ in range(freq):
            _, g = loss_and_grad(spec, lossspec, theta1, policy,
                                 wrt=("policy",), psi1=psi1, rng=rng)
            if record is not None:
                record.gradient_calls.append((epoch, "policy"))
            gp = g.d_policy if isinstance(g.d_policy, list) else [g.d_policy]
            for pol, opt, gi in zip(policies, opts, gp):
                opt, newp = adam_step(opt, pol.param_vector, gi, lr)
                pol.set_params(newp)
    return val, theta1_new


def train(spec: ProtocolSpec, lossspec: LossSpec, policy,
          schedule: ScheduleSpec, epochs: int, seed: int,
          theta1_init=None, entropy_interval: int = 0,
          early_stop_infidelity: float = 1e-6,
          init_scale: float = 0.1, config: dict = None) -> RunRecord:
    """Full training loop; deterministic per (arguments, seed)."""
    rng = np.random.default_rng(seed)
    policies = _policies_for(spec, policy)
    if theta1_init is None:
        theta1 = rng.uniform(-init_scale, init_scale, spec.u1.n_free)
    else:
        theta1 = np.asarray(theta1_init, dtype=float).copy()
    opt_theta = AdamState.fresh(theta1.size)
    opts = [AdamState.fresh(p.param_vector.size) for p in policies]
    record = RunRecord(seed=seed, config=dict(config or {}))

    anc = spec.layout.ancilla_indices
    for epoch in range(epochs):
        lr = schedule.lr(epoch, epochs)
        freq = schedule.freq(epoch)
        noise = schedule.noise(epoch)

        # metrics from the pre-update state
        theta1_t = torch.as_tensor(theta1)
        psi1 = apply_circuit_raw(zero_state(spec.layout).amps, spec.u1,
                                 theta1_t).detach()
        probs = outcome_distribution_raw(psi1, spec.layout).numpy()
        if not np.all(np.isfinite(probs)):
            record.metrics.append({"epoch": epoch, "loss": float("nan"),
                                   "infidelity": float("nan"),
                                   "shannon_h": float("nan"),
                                   "ent_entropy": float("nan"),
                                   "reg_term": float("nan"), "lr": lr,
                                   "freq": freq, "noise": noise})
            record.aborted = True
            break
        h = shannon_entropy(ProbTable(np.clip(probs, 0, None)
                                      / probs.sum(), spec.layout.n_ancilla))
        s = float("nan")
        if entropy_interval and epoch % entropy_interval == 0 and anc:
            s = entanglement_entropy(
                StateVector(psi1, spec.layout), anc)
        params_ts = [torch.as_tensor(p.param_vector) for p in policies]
        obj = float(objective_raw(spec, lossspec, theta1_t, policies,
                                  params_ts, psi1=psi1).detach())
        reg = 0.0
        if lossspec.reg_weight != 0.0:
            reg = lossspec.reg_weight * float(ancilla_regularization_raw(
                torch.as_tensor(probs), spec.layout.n_ancilla,
                lossspec.reg_ratio))
        row = {"epoch": epoch, "loss": obj + reg, "infidelity": obj,
               "shannon_h": h, "ent_entropy": s, "reg_term": reg,
               "lr": lr, "freq": freq, "noise": noise}
        record.metrics.append(row)
        if not np.isfinite(obj + reg):
            record.aborted = True
            break
        if obj < early_stop_infidelity:
            record.early_stopped = True
            break

        try:
            _, theta1 = update_parameters(spec, lossspec, theta1, policy,
                                          freq, opt_theta, opts, lr,
                                          rng=rng, record=record, epoch=epoch)
        except NanLossError:
            record.aborted = True
            break
        if noise > 0.0:
            theta1 = theta1 + rng.uniform(-noise, noise, theta1.size)
            for pol in policies:
                pol.set_params(pol.param_vector
                               + rng.uniform(-noise, noise,
                                             pol.param_vector.size))

    record.theta1 = np.asarray(theta1, float).copy()
    record.policy_params = [p.param_vector for p in policies]
    return record
