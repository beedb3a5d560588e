import numpy as np
import pytest
import torch

from qflab.circuits import (GateSlot, ParamCircuit, apply_circuit,
                            build_feedback_ansatz, build_hardware_efficient,
                            tie_parameters)
from qflab.feedback import TabularPolicy, init_policy
from qflab.protocol import (LossSpec, ProtocolSpec, SpecError,
                            ancilla_regularization, energy_loss,
                            ghz_lambda_loss, manifold_fidelity,
                            per_site_multisize_loss, run_branches, sample_run,
                            system_amplitudes_raw, total_loss)
from qflab.qsim import (ProbTable, QubitLayout, StateVector,
                        outcome_distribution, project_ancillas, zero_state)
from qflab.targets import aklt_hamiltonian_qubit, aklt_manifold, build_ghz


def make_spec(roles="ASSA", u1_depth=2, block_depth=2, rounds=1):
    lay = QubitLayout(roles)
    return ProtocolSpec(lay, build_hardware_efficient(lay, u1_depth),
                        build_feedback_ansatz(lay, block_depth),
                        rounds=rounds)


def random_policy(spec, seed, scale=0.6):
    rng = np.random.default_rng(seed)
    pol = TabularPolicy(spec.layout.n_ancilla, spec.u2.n_params)
    pol.set_params(rng.uniform(-scale, scale, pol.param_vector.size))
    return pol


def random_theta1(spec, seed, scale=1.0):
    return np.random.default_rng(seed).uniform(-scale, scale, spec.u1.n_free)


def random_system_target(n_system, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(2**n_system) + 1j * rng.standard_normal(2**n_system)
    return StateVector(torch.as_tensor(v / np.linalg.norm(v)),
                       QubitLayout.all_system(n_system))


class TestProtocolSpec:
    def test_u2_on_ancilla_rejected(self):
        lay = QubitLayout("ASSA")
        bad = ParamCircuit(4, [GateSlot("ry", (0,), 0)], 1)
        with pytest.raises(SpecError):
            ProtocolSpec(lay, build_hardware_efficient(lay, 1), bad)

    def test_rounds_validated(self):
        lay = QubitLayout("ASSA")
        with pytest.raises(SpecError):
            ProtocolSpec(lay, build_hardware_efficient(lay, 1),
                         build_feedback_ansatz(lay, 1), rounds=0)

    def test_register_mismatch(self):
        lay = QubitLayout("ASSA")
        u1_small = build_hardware_efficient(QubitLayout.all_system(3), 1)
        with pytest.raises(SpecError):
            ProtocolSpec(lay, u1_small, build_feedback_ansatz(lay, 1))


class TestLossSpec:
    def test_lambda_window(self):
        with pytest.raises(SpecError):
            LossSpec("ghz_lambda", lam=1.5)

    def test_reg_ratio_window(self):
        with pytest.raises(SpecError):
            LossSpec("ghz_lambda", reg_ratio=1.0)


class TestRunBranches:
    def test_probabilities_sum_to_one(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 1)
        branches = run_branches(spec, theta1, random_policy(spec, 2))
        assert sum(b.prob for b in branches) == pytest.approx(1.0, abs=1e-10)

    def test_probs_match_post_u1_distribution(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 3)
        psi1 = apply_circuit(zero_state(spec.layout), spec.u1, theta1)
        table = outcome_distribution(psi1)
        branches = run_branches(spec, theta1, random_policy(spec, 4))
        for b in branches:
            assert b.prob == pytest.approx(table[b.m.as_int], abs=1e-12)

    def test_branch_states_normalized(self):
        spec = make_spec()
        for b in run_branches(spec, random_theta1(spec, 5),
                              random_policy(spec, 6)):
            assert b.state.norm() == pytest.approx(1.0, abs=1e-10)

    def test_zero_policy_matches_projection_oracle(self):
        # zero feedback angles make U2 the identity, so each branch must be
        # exactly the projected-and-reset post-U1 state
        spec = make_spec()
        theta1 = random_theta1(spec, 7)
        pol = init_policy("tabular", n_ancilla=spec.layout.n_ancilla,
                          n_angles=spec.u2.n_params)
        psi1 = apply_circuit(zero_state(spec.layout), spec.u1, theta1)
        for b in run_branches(spec, theta1, pol):
            expect, prob = project_ancillas(psi1, b.m.as_int)
            assert b.prob == pytest.approx(prob, abs=1e-12)
            assert np.allclose(b.state.numpy(), expect.numpy(), atol=1e-12)

    def test_ordered_by_outcome(self):
        spec = make_spec()
        ms = [b.m.as_int for b in run_branches(spec, random_theta1(spec, 8),
                                               random_policy(spec, 9))]
        assert ms == sorted(ms)

    def test_two_rounds_enumeration(self):
        spec = make_spec(rounds=2)
        pols = [random_policy(spec, 10), random_policy(spec, 11)]
        branches = run_branches(spec, random_theta1(spec, 12), pols)
        assert sum(b.prob for b in branches) == pytest.approx(1.0, abs=1e-9)

    def test_policy_count_enforced(self):
        spec = make_spec(rounds=2)
        with pytest.raises(SpecError):
            run_branches(spec, random_theta1(spec, 13),
                         random_policy(spec, 14))


class TestSampleRun:
    def test_frequencies_match_distribution(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 20)
        pol = random_policy(spec, 21)
        psi1 = apply_circuit(zero_state(spec.layout), spec.u1, theta1)
        table = outcome_distribution(psi1)
        rng = np.random.default_rng(22)
        counts = np.zeros(4)
        n = 800
        for _ in range(n):
            b = sample_run(spec, theta1, pol, rng)
            counts[b.m.as_int] += 1
            assert b.prob == pytest.approx(table[b.m.as_int], abs=1e-12)
        assert np.abs(counts / n - table.probs).max() < 0.06

    def test_multi_round_rejected(self):
        spec = make_spec(rounds=2)
        with pytest.raises(SpecError):
            sample_run(spec, random_theta1(spec, 23),
                       [random_policy(spec, 24)] * 2,
                       np.random.default_rng(0))


class TestSystemAmplitudes:
    def test_strips_reset_ancillas(self):
        lay = QubitLayout("ASSA")
        amps = np.zeros(16, dtype=complex)
        # ancillas (qubits 0, 3) in |0>, system (1, 2) in (|01> + |10>)/sqrt(2)
        amps[0b0010] = amps[0b0100] = 1 / np.sqrt(2)
        sys_amps = system_amplitudes_raw(torch.as_tensor(amps), lay).numpy()
        assert np.allclose(sys_amps, [0, 1 / np.sqrt(2), 1 / np.sqrt(2), 0])


class TestGhzLambda:
    def test_ghz_is_zero_loss(self):
        st = build_ghz(3)
        for lam in (0.0, 0.4, 1.0):
            assert ghz_lambda_loss(st, lam) == pytest.approx(0.0, abs=1e-12)

    def test_all_zero_state(self):
        st = zero_state(QubitLayout.all_system(3))
        for lam in (0.0, 0.7):
            assert ghz_lambda_loss(st, lam) == pytest.approx(0.5)

    def test_lambda_zero_is_ghz_infidelity(self):
        st = random_system_target(3, 30)
        ghz = build_ghz(3).numpy()
        expect = 1.0 - abs(np.vdot(ghz, st.numpy())) ** 2
        assert ghz_lambda_loss(st, 0.0) == pytest.approx(expect, abs=1e-12)

    def test_lambda_validated(self):
        with pytest.raises(SpecError):
            ghz_lambda_loss(build_ghz(2), -0.1)


class TestRegularization:
    def test_uniform_is_zero(self):
        table = ProbTable(np.full(4, 0.25), 2)
        assert ancilla_regularization(table, 2.0) == 0.0

    def test_inside_window_is_zero(self):
        # n=1, r=4: window is p in [2^-1.5, 2^-0.5]
        table = ProbTable(np.array([0.6, 0.4]), 1)
        assert ancilla_regularization(table, 4.0) == 0.0

    def test_hand_computed_value(self):
        # n=1, r=2: c=0.5, d(p)=1+log2(p)
        p = np.array([0.8, 0.2])
        d = 1 + np.log2(p)
        expect = np.mean(np.maximum(d - 0.5, 0) ** 2
                         + np.maximum(-d - 0.5, 0) ** 2)
        got = ancilla_regularization(ProbTable(p, 1), 2.0)
        assert got == pytest.approx(expect, abs=1e-12)

    def test_collapsed_is_penalized(self):
        table = ProbTable(np.array([1.0, 0.0]), 1)
        assert ancilla_regularization(table, 2.0) > 0.1

    def test_ratio_validated(self):
        with pytest.raises(SpecError):
            ancilla_regularization(ProbTable(np.array([1.0, 0.0]), 1), 1.0)


class TestObjectives:
    def test_fidelity_matches_branch_sum(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 40)
        pol = random_policy(spec, 41)
        target = random_system_target(2, 42)
        ls = LossSpec("single_fidelity", target=target)
        loss = total_loss(spec, ls, theta1, pol)
        fid = 0.0
        for b in run_branches(spec, theta1, pol):
            sys_amps = system_amplitudes_raw(b.state.amps, spec.layout).numpy()
            fid += b.prob * abs(np.vdot(target.numpy(), sys_amps)) ** 2
        assert loss == pytest.approx(1.0 - fid, abs=1e-10)

    def test_ghz_objective_matches_branch_sum(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 43)
        pol = random_policy(spec, 44)
        lam = 0.3
        ls = LossSpec("ghz_lambda", lam=lam)
        loss = total_loss(spec, ls, theta1, pol)
        expect = sum(b.prob * ghz_lambda_loss(StateVector(
            system_amplitudes_raw(b.state.amps, spec.layout),
            QubitLayout.all_system(2)), lam)
            for b in run_branches(spec, theta1, pol))
        assert loss == pytest.approx(expect, abs=1e-10)

    def test_energy_matches_dense_oracle(self):
        lay = QubitLayout.from_blocks(1)          # 4 system qubits
        spec = ProtocolSpec(lay, build_hardware_efficient(lay, 2),
                            build_feedback_ansatz(lay, 2))
        theta1 = random_theta1(spec, 45)
        pol = random_policy(spec, 46)
        ham = aklt_hamiltonian_qubit(2)
        dense = ham.dense()
        loss = energy_loss(spec, theta1, pol, ham)
        expect = 0.0
        for b in run_branches(spec, theta1, pol):
            v = system_amplitudes_raw(b.state.amps, spec.layout).numpy()
            expect += b.prob * np.real(np.vdot(v, dense @ v))
        assert loss == pytest.approx(expect, abs=1e-10)

    def test_manifold_fidelity_columns(self):
        lay = QubitLayout.from_blocks(1)
        spec = ProtocolSpec(lay, build_hardware_efficient(lay, 2),
                            build_feedback_ansatz(lay, 2))
        theta1 = random_theta1(spec, 47)
        pol = random_policy(spec, 48)
        man = aklt_manifold(2)
        mat = man.matrix()
        fid = manifold_fidelity(spec, theta1, pol, man)
        expect = 0.0
        for b in run_branches(spec, theta1, pol):
            v = system_amplitudes_raw(b.state.amps, spec.layout).numpy()
            expect += b.prob * np.sum(np.abs(mat.conj().T @ v) ** 2)
        assert fid == pytest.approx(expect, abs=1e-10)

    def test_two_round_fidelity_consistency(self):
        spec = make_spec(rounds=2)
        theta1 = random_theta1(spec, 49)
        pols = [random_policy(spec, 50), random_policy(spec, 51)]
        target = random_system_target(2, 52)
        ls = LossSpec("single_fidelity", target=target)
        loss = total_loss(spec, ls, theta1, pols)
        fid = 0.0
        for b in run_branches(spec, theta1, pols):
            sys_amps = system_amplitudes_raw(b.state.amps, spec.layout).numpy()
            fid += b.prob * abs(np.vdot(target.numpy(), sys_amps)) ** 2
        assert loss == pytest.approx(1.0 - fid, abs=1e-9)

    def test_regularized_total(self):
        spec = make_spec()
        theta1 = random_theta1(spec, 53)
        pol = random_policy(spec, 54)
        target = random_system_target(2, 55)
        bare = LossSpec("single_fidelity", target=target)
        reg = LossSpec("single_fidelity", target=target, reg_weight=0.25,
                       reg_ratio=2.0)
        psi1 = apply_circuit(zero_state(spec.layout), spec.u1, theta1)
        pen = ancilla_regularization(outcome_distribution(psi1), 2.0)
        assert total_loss(spec, reg, theta1, pol) == pytest.approx(
            total_loss(spec, bare, theta1, pol) + 0.25 * pen, abs=1e-10)

    def test_unknown_objective(self):
        spec = make_spec()
        with pytest.raises(SpecError):
            total_loss(spec, LossSpec("nonsense"), random_theta1(spec, 56),
                       random_policy(spec, 57))


class TestMultisize:
    def _tied_spec(self):
        lay = QubitLayout("ASSA")
        u1 = tie_parameters(build_hardware_efficient(lay, 2), 4)
        return ProtocolSpec(lay, u1, build_feedback_ansatz(lay, 2))

    def test_requires_tied_u1(self):
        spec = make_spec()
        pol = init_policy("tabular", n_ancilla=2, n_angles=spec.u2.n_params)
        with pytest.raises(SpecError):
            per_site_multisize_loss({2: spec},
                                    {2: random_system_target(2, 60)},
                                    np.zeros(spec.u1.n_free), pol, 4,
                                    np.random.default_rng(0))

    def test_perfect_case_is_zero(self):
        spec = self._tied_spec()
        pol = init_policy("tabular", n_ancilla=2, n_angles=spec.u2.n_params)
        target = zero_state(QubitLayout.all_system(2))
        loss = per_site_multisize_loss({2: spec}, {2: target},
                                       np.zeros(spec.u1.n_free), pol, 4,
                                       np.random.default_rng(1))
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_deterministic_given_rng(self):
        spec = self._tied_spec()
        pol = random_policy(spec, 61)
        theta1 = np.random.default_rng(62).uniform(-1, 1, spec.u1.n_free)
        target = random_system_target(2, 63)
        vals = [per_site_multisize_loss({2: spec}, {2: target}, theta1, pol,
                                        8, np.random.default_rng(7))
                for _ in range(2)]
        assert vals[0] == vals[1]
        assert 0.0 <= vals[0] <= 1.0
