import numpy as np
import pytest
import torch

from qflab.circuits import build_feedback_ansatz
from qflab.feedback import (MeasurementRecord, PolicyError, RnnConfig,
                            RnnPolicy, TabularPolicy,
                            assign_blocks_to_ancillas, circuit_assignment,
                            init_policy, swiglu_dim)
from qflab.qsim import QubitLayout


class TestMeasurementRecord:
    def test_from_int_bit_order(self):
        lay = QubitLayout("ASSA")
        rec = MeasurementRecord.from_int(2, lay)
        assert rec.bits == (1, 0)        # first ancilla is the MSB
        assert rec.positions == (0, 3)
        assert rec.as_int == 2

    def test_roundtrip_all_outcomes(self):
        lay = QubitLayout.from_blocks(1)
        for m in range(4):
            assert MeasurementRecord.from_int(m, lay).as_int == m

    def test_invalid_bits(self):
        with pytest.raises(PolicyError):
            MeasurementRecord((0, 2), (0, 1))


class TestTabularPolicy:
    def test_row_count(self):
        pol = TabularPolicy(4, 3)
        assert pol.table.shape == (16, 3)

    def test_zero_init_identity(self):
        pol = init_policy("tabular", n_ancilla=2, n_angles=5)
        rec = MeasurementRecord.from_int(3, QubitLayout("ASSA"))
        assert np.allclose(pol.eval(rec), 0.0)

    def test_rows_independent(self):
        pol = TabularPolicy(2, 2)
        lay = QubitLayout("ASSA")
        pol.table[1] = [0.5, -0.5]
        assert np.allclose(pol.eval(MeasurementRecord.from_int(2, lay)), 0.0)
        assert np.allclose(pol.eval(MeasurementRecord.from_int(1, lay)),
                           [0.5, -0.5])

    def test_param_vector_roundtrip(self):
        pol = TabularPolicy(2, 3)
        v = np.arange(12.0)
        pol.set_params(v)
        assert np.allclose(pol.param_vector, v)
        assert pol.table[1, 2] == 5.0

    def test_eval_torch_row_gradient(self):
        pol = TabularPolicy(2, 2)
        lay = QubitLayout("ASSA")
        params = torch.zeros(8, requires_grad=True)
        out = pol.eval_torch(params, MeasurementRecord.from_int(1, lay))
        out.sum().backward()
        grad = params.grad.reshape(4, 2).numpy()
        assert np.allclose(grad[1], 1.0)
        assert np.allclose(np.delete(grad, 1, axis=0), 0.0)

    def test_csv_roundtrip(self, tmp_path):
        pol = TabularPolicy(3, 2)
        pol.set_params(np.random.default_rng(0).uniform(-1, 1, 16))
        pol.save(tmp_path / "t.csv")
        back = TabularPolicy.load(tmp_path / "t.csv")
        assert back.n_ancilla == 3 and back.n_angles == 2
        assert np.array_equal(back.table, pol.table)


class TestRnnStructure:
    def test_swiglu_dim(self):
        assert swiglu_dim(16) % 4 == 0
        assert swiglu_dim(16) >= int(np.ceil(8 * 16 / 3))
        assert swiglu_dim(3) == 8

    def test_weight_count_consistency(self):
        for direction in ("uni", "bi"):
            cfg = RnnConfig(depth=2, d_h=8, direction=direction,
                            angles_per_site=3)
            pol = RnnPolicy(cfg)
            assert pol.weights.size == pol.n_weights

    def test_bad_weight_length(self):
        cfg = RnnConfig(depth=1, d_h=4)
        with pytest.raises(PolicyError):
            RnnPolicy(cfg, np.zeros(7))

    def test_deterministic_init(self):
        cfg = RnnConfig(depth=2, d_h=8, angles_per_site=2)
        a = init_policy("rnn-bi", config=cfg, seed=3)
        b = init_policy("rnn-bi", config=cfg, seed=3)
        assert np.array_equal(a.weights, b.weights)

    def test_zero_head_identity_feedback(self):
        cfg = RnnConfig(depth=2, d_h=8, angles_per_site=4)
        pol = init_policy("rnn-bi", config=cfg, seed=1)
        out = pol.site_outputs(torch.as_tensor(pol.weights), (1, 0, 1))
        assert torch.allclose(out, torch.zeros_like(out))

    def test_binary_roundtrip(self, tmp_path):
        cfg = RnnConfig(depth=2, d_h=8, direction="uni",
                        front_end="conv5", angles_per_site=2)
        pol = init_policy("rnn-uni", config=cfg, seed=5)
        pol.save(tmp_path / "p.bin")
        back = RnnPolicy.load(tmp_path / "p.bin")
        assert back.config == cfg
        assert np.array_equal(back.weights, pol.weights)

    def test_magic_check(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"\x00" * 64)
        with pytest.raises(PolicyError):
            RnnPolicy.load(path)


class TestRnnEvaluation:
    @staticmethod
    def _nonzero_policy(cfg, seed=2):
        pol = init_policy(f"rnn-{cfg.direction}", config=cfg, seed=seed)
        rng = np.random.default_rng(seed + 100)
        w = pol.weights.copy()
        off, shape = pol._layout["head.w"]
        w[off:off + int(np.prod(shape))] = rng.uniform(-0.5, 0.5,
                                                       int(np.prod(shape)))
        pol.set_params(w)
        return pol

    def test_constant_head_bias(self):
        cfg = RnnConfig(depth=1, d_h=4, angles_per_site=2)
        pol = RnnPolicy(cfg)          # all-zero weights
        w = pol.weights.copy()
        off, shape = pol._layout["head.b"]
        w[off:off + 2] = [0.3, -0.7]
        pol.set_params(w)
        params = torch.as_tensor(pol.weights)
        for bits in ((0, 0, 0), (1, 1, 0), (0, 1)):
            out = pol.site_outputs(params, bits).numpy()
            assert np.allclose(out, [0.3, -0.7])

    def test_size_agnostic(self):
        cfg = RnnConfig(depth=2, d_h=8, angles_per_site=3)
        pol = self._nonzero_policy(cfg)
        params = torch.as_tensor(pol.weights)
        for na in (4, 6):
            out = pol.site_outputs(params, (0, 1) * (na // 2))
            assert out.shape == (na, 3)
            assert torch.isfinite(out).all()

    def test_unidirectional_causality(self):
        cfg = RnnConfig(depth=2, d_h=8, direction="uni",
                        front_end="linear", angles_per_site=2)
        pol = self._nonzero_policy(cfg)
        params = torch.as_tensor(pol.weights)
        base = pol.site_outputs(params, (1, 0, 1, 0, 0)).numpy()
        flipped = pol.site_outputs(params, (1, 0, 1, 1, 1)).numpy()
        assert np.allclose(base[:3], flipped[:3], atol=0)
        assert not np.allclose(base[3:], flipped[3:])

    def test_conv_front_end_widens_receptive_field(self):
        cfg = RnnConfig(depth=1, d_h=4, direction="uni",
                        front_end="conv5", angles_per_site=1)
        pol = self._nonzero_policy(cfg)
        params = torch.as_tensor(pol.weights)
        base = pol.site_outputs(params, (0, 0, 0, 0, 0)).numpy()
        # flipping bit 2 reaches site 0 through the width-5 window
        flipped = pol.site_outputs(params, (0, 0, 1, 0, 0)).numpy()
        assert not np.allclose(base[0], flipped[0])

    def test_bidirectional_sees_both_sides(self):
        cfg = RnnConfig(depth=1, d_h=8, direction="bi",
                        front_end="linear", angles_per_site=2)
        pol = self._nonzero_policy(cfg)
        params = torch.as_tensor(pol.weights)
        base = pol.site_outputs(params, (0, 0, 0, 0)).numpy()
        flipped = pol.site_outputs(params, (0, 0, 0, 1)).numpy()
        assert not np.allclose(base[0], flipped[0])

    def test_mirror_symmetry(self):
        # forward and backward GRUs share weights and the projection treats
        # both halves identically -> palindromic input gives palindromic
        # output
        cfg = RnnConfig(depth=1, d_h=6, direction="bi",
                        front_end="linear", angles_per_site=2)
        pol = self._nonzero_policy(cfg, seed=8)
        w = pol.weights.copy()
        lay = pol._layout
        for part in ("wx", "wh", "b"):
            f_off, f_shape = lay[f"blk0.gru_f.{part}"]
            b_off, _ = lay[f"blk0.gru_b.{part}"]
            size = int(np.prod(f_shape))
            w[b_off:b_off + size] = w[f_off:f_off + size]
        p_off, p_shape = lay["blk0.proj.w"]
        proj = w[p_off:p_off + int(np.prod(p_shape))].reshape(p_shape)
        proj[:, 6:] = proj[:, :6]
        w[p_off:p_off + proj.size] = proj.reshape(-1)
        pol.set_params(w)
        params = torch.as_tensor(pol.weights)
        out = pol.site_outputs(params, (1, 0, 0, 1)).numpy()
        assert np.allclose(out, out[::-1], atol=1e-12)


class TestAssignment:
    def test_nearest_ancilla(self):
        lay = QubitLayout.from_blocks(1)       # A S S S S A
        u2 = build_feedback_ansatz(lay, 2)
        # blocks on pairs (1,2), (2,3), (3,4); centers 1.5, 2.5, 3.5
        assert assign_blocks_to_ancillas(lay, u2) == [0, 0, 1]

    def test_ties_go_left(self):
        lay = QubitLayout("ASSA")              # block center 1.5, ancillas 0,3
        u2 = build_feedback_ansatz(lay, 1)
        assert assign_blocks_to_ancillas(lay, u2) == [0]

    def test_circuit_assignment_sizes(self):
        lay = QubitLayout.from_blocks(1)
        u2 = build_feedback_ansatz(lay, 3)
        sites, sizes, n_angles = circuit_assignment(lay, u2)
        assert sizes == [11, 11, 11]
        assert n_angles == u2.n_params

    def test_rnn_policy_covers_assignment(self):
        lay = QubitLayout.from_blocks(1)
        u2 = build_feedback_ansatz(lay, 2)
        assignment = circuit_assignment(lay, u2)
        per_site = max(sum(sz for s, sz in zip(*assignment[:2]) if s == a)
                       for a in set(assignment[0]))
        cfg = RnnConfig(depth=1, d_h=8, angles_per_site=per_site)
        pol = init_policy("rnn-bi", config=cfg, seed=0)
        rec = MeasurementRecord.from_int(1, lay)
        out = pol.eval(rec, assignment)
        assert out.shape == (u2.n_params,)

    def test_angles_per_site_too_small(self):
        lay = QubitLayout.from_blocks(1)
        u2 = build_feedback_ansatz(lay, 2)
        assignment = circuit_assignment(lay, u2)
        cfg = RnnConfig(depth=1, d_h=8, angles_per_site=2)
        pol = init_policy("rnn-bi", config=cfg, seed=0)
        with pytest.raises(PolicyError):
            pol.eval(MeasurementRecord.from_int(0, lay), assignment)
