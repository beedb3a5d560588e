"""Classical feedback policies mapping ancilla outcomes to correction angles.

Two families: a tabular lookup (one learnable angle row per outcome) and a
size-agnostic recurrent network. The network is a residual pre-norm stack,
repeated to depth D: x <- x + GRU(RMSNorm(x)), x <- x + SwiGLU(RMSNorm(x)),
with a linear (bidirectional) or width-5 1D-convolution (unidirectional)
front end and a zero-initialized linear output head, so a fresh policy is
the identity feedback.

GRU gate equations (standard reset/update formulation):
    r = sigmoid(W_r x + U_r h + b_r)
    z = sigmoid(W_z x + U_z h + b_z)
    n = tanh(W_n x + r * (U_n h) + b_n)
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .qsim import QubitLayout, outcome_int


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class MeasurementRecord:
    bits: tuple                 # one bit per ancilla, in layout order
    positions: tuple            # ancilla qubit indices

    def __post_init__(self):
        if len(self.bits) != len(self.positions):
            raise PolicyError("bit count does not match ancilla positions")
        if any(b not in (0, 1) for b in self.bits):
            raise PolicyError("bits must be 0/1")

    @classmethod
    def from_int(cls, m: int, layout: QubitLayout) -> "MeasurementRecord":
        na = layout.n_ancilla
        bits = tuple((m >> (na - 1 - k)) & 1 for k in range(na))
        return cls(bits, layout.ancilla_indices)

    @property
    def as_int(self) -> int:
        return outcome_int(self.bits)


def assign_blocks_to_ancillas(layout: QubitLayout, u2) -> list:
    """Map each feedback block of u2 to its nearest ancilla site index.

    Block centers are compared against ancilla qubit positions; ties go to
    the left. Returns one ancilla-site index per block (block order)."""
    anc = layout.ancilla_indices
    if not anc:
        raise PolicyError("layout has no ancillas")
    if not u2.blocks:
        raise PolicyError("feedback circuit carries no block metadata")
    assignment = []
    for _, (a, b) in u2.blocks:
        center = (a + b) / 2.0
        dists = [abs(center - q) for q in anc]
        assignment.append(int(np.argmin(dists)))
    return assignment


# ---------------------------------------------------------------- tabular

@dataclass
class TabularPolicy:
    n_ancilla: int
    n_angles: int
    table: np.ndarray = None

    def __post_init__(self):
        rows = 2**self.n_ancilla
        if self.table is None:
            self.table = np.zeros((rows, self.n_angles))
        self.table = np.asarray(self.table, dtype=float)
        if self.table.shape != (rows, self.n_angles):
            raise PolicyError(
                f"table shape {self.table.shape} != {(rows, self.n_angles)}"
            )

    @property
    def kind(self) -> str:
        return "tabular"

    @property
    def param_vector(self) -> np.ndarray:
        return self.table.reshape(-1).copy()

    def set_params(self, vec: np.ndarray) -> None:
        self.table = np.asarray(vec, dtype=float).reshape(self.table.shape).copy()

    def eval_torch(self, params: torch.Tensor, m: MeasurementRecord, assignment=None) -> torch.Tensor:
        if len(m.bits) != self.n_ancilla:
            raise PolicyError("outcome length mismatch")
        return params.reshape(2**self.n_ancilla, self.n_angles)[m.as_int]

    def eval(self, m: MeasurementRecord) -> np.ndarray:
        return self.table[m.as_int].copy()

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["outcome"] + [f"angle_{i}" for i in range(self.n_angles)])
            for row in range(2**self.n_ancilla):
                w.writerow([format(row, f"0{self.n_ancilla}b")]
                           + [repr(float(v)) for v in self.table[row]])

    @classmethod
    def load(cls, path) -> "TabularPolicy":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        n_angles = len(header) - 1
        n_ancilla = len(body[0][0])
        table = np.zeros((2**n_ancilla, n_angles))
        for r in body:
            table[int(r[0], 2)] = [float(v) for v in r[1:]]
        return cls(n_ancilla, n_angles, table)


# ---------------------------------------------------------------- RNN

def swiglu_dim(d_h: int) -> int:
    """Hidden expansion 8/3 * d_h rounded up to a multiple of 4."""
    raw = int(np.ceil(8 * d_h / 3))
    return ((raw + 3) // 4) * 4


@dataclass(frozen=True)
class RnnConfig:
    depth: int = 2                    # GRU/SwiGLU block pairs
    d_h: int = 16
    direction: str = "bi"             # "uni" | "bi"
    front_end: str = "linear"         # "linear" | "conv5"
    angles_per_site: int = 1

    def __post_init__(self):
        if self.direction not in ("uni", "bi"):
            raise PolicyError("direction must be 'uni' or 'bi'")
        if self.front_end not in ("linear", "conv5"):
            raise PolicyError("front_end must be 'linear' or 'conv5'")


def _rms_norm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(torch.mean(x * x, dim=-1, keepdim=True) + 1e-8) * gain


def _gru_scan(x: torch.Tensor, wx: torch.Tensor, wh: torch.Tensor,
              b: torch.Tensor, reverse: bool = False) -> torch.Tensor:
    """x: (seq, d_h) -> (seq, d_h); weights stacked [r; z; n] along dim 0."""
    seq, d = x.shape
    h = torch.zeros(d, dtype=x.dtype)
    order = range(seq - 1, -1, -1) if reverse else range(seq)
    outs = [None] * seq
    for t in order:
        gi = wx @ x[t] + b
        gh = wh @ h
        r = torch.sigmoid(gi[:d] + gh[:d])
        z = torch.sigmoid(gi[d:2 * d] + gh[d:2 * d])
        n = torch.tanh(gi[2 * d:] + r * gh[2 * d:])
        h = (1 - z) * n + z * h
        outs[t] = h
    return torch.stack(outs)


@dataclass
class RnnPolicy:
    config: RnnConfig
    weights: np.ndarray = None
    _layout: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._build_layout()
        if self.weights is None:
            self.weights = np.zeros(self.n_weights)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.n_weights,):
            raise PolicyError(
                f"weight vector length {self.weights.size} != {self.n_weights}"
            )

    @property
    def kind(self) -> str:
        return f"rnn-{self.config.direction}"

    def _add(self, name, shape):
        size = int(np.prod(shape))
        self._layout[name] = (self._offset, shape)
        self._offset += size

    def _build_layout(self):
        cfg = self.config
        d, dff = cfg.d_h, swiglu_dim(cfg.d_h)
        self._layout = {}
        self._offset = 0
        if cfg.front_end == "linear":
            self._add("front.w", (d, 1))
        else:
            self._add("front.w", (d, 5))
        self._add("front.b", (d,))
        for i in range(cfg.depth):
            self._add(f"blk{i}.norm1", (d,))
            self._add(f"blk{i}.gru_f.wx", (3 * d, d))
            self._add(f"blk{i}.gru_f.wh", (3 * d, d))
            self._add(f"blk{i}.gru_f.b", (3 * d,))
            if cfg.direction == "bi":
                self._add(f"blk{i}.gru_b.wx", (3 * d, d))
                self._add(f"blk{i}.gru_b.wh", (3 * d, d))
                self._add(f"blk{i}.gru_b.b", (3 * d,))
                self._add(f"blk{i}.proj.w", (d, 2 * d))
                self._add(f"blk{i}.proj.b", (d,))
            self._add(f"blk{i}.norm2", (d,))
            self._add(f"blk{i}.ffn.w1", (dff, d))
            self._add(f"blk{i}.ffn.w2", (dff, d))
            self._add(f"blk{i}.ffn.w3", (d, dff))
        self._add("out.norm", (d,))
        self._add("head.w", (cfg.angles_per_site, d))
        self._add("head.b", (cfg.angles_per_site,))
        self.n_weights = self._offset

    def _get(self, params: torch.Tensor, name: str) -> torch.Tensor:
        off, shape = self._layout[name]
        return params[off:off + int(np.prod(shape))].reshape(shape)

    @property
    def param_vector(self) -> np.ndarray:
        return self.weights.copy()

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_weights,):
            raise PolicyError("weight vector length mismatch")
        self.weights = vec.copy()

    def site_outputs(self, params: torch.Tensor, bits) -> torch.Tensor:
        """(seq, angles_per_site) head outputs for a +/-1-encoded bitstring."""
        cfg = self.config
        x_in = torch.as_tensor([2.0 * b - 1.0 for b in bits],
                               dtype=torch.float64).reshape(-1, 1)
        seq = x_in.shape[0]
        if cfg.front_end == "linear":
            x = x_in @ self._get(params, "front.w").T + self._get(params, "front.b")
        else:
            w = self._get(params, "front.w")           # (d_h, 5), centered
            padded = torch.cat([torch.zeros(2, 1, dtype=torch.float64), x_in,
                                torch.zeros(2, 1, dtype=torch.float64)])
            windows = torch.stack([padded[t:t + 5, 0] for t in range(seq)])
            x = windows @ w.T + self._get(params, "front.b")
        for i in range(cfg.depth):
            h = _rms_norm(x, self._get(params, f"blk{i}.norm1"))
            fwd = _gru_scan(h, self._get(params, f"blk{i}.gru_f.wx"),
                            self._get(params, f"blk{i}.gru_f.wh"),
                            self._get(params, f"blk{i}.gru_f.b"))
            if cfg.direction == "bi":
                bwd = _gru_scan(h, self._get(params, f"blk{i}.gru_b.wx"),
                                self._get(params, f"blk{i}.gru_b.wh"),
                                self._get(params, f"blk{i}.gru_b.b"),
                                reverse=True)
                both = torch.cat([fwd, bwd], dim=-1)
                upd = both @ self._get(params, f"blk{i}.proj.w").T \
                    + self._get(params, f"blk{i}.proj.b")
            else:
                upd = fwd
            x = x + upd
            h = _rms_norm(x, self._get(params, f"blk{i}.norm2"))
            w1 = self._get(params, f"blk{i}.ffn.w1")
            w2 = self._get(params, f"blk{i}.ffn.w2")
            w3 = self._get(params, f"blk{i}.ffn.w3")
            gate = h @ w1.T
            x = x + (torch.nn.functional.silu(gate) * (h @ w2.T)) @ w3.T
        x = _rms_norm(x, self._get(params, "out.norm"))
        return x @ self._get(params, "head.w").T + self._get(params, "head.b")

    def eval_torch(self, params: torch.Tensor, m: MeasurementRecord,
                   assignment) -> torch.Tensor:
        """Angle vector for the feedback circuit described by `assignment`.

        `assignment` is (block_sites, block_sizes, n_angles): the ancilla
        site and parameter count of each feedback block, plus the total
        angle count."""
        block_sites, block_sizes, n_angles = assignment
        outs = self.site_outputs(params, m.bits)
        per_site_cursor = [0] * outs.shape[0]
        pieces = []
        for site, size in zip(block_sites, block_sizes):
            start = per_site_cursor[site]
            if start + size > self.config.angles_per_site:
                raise PolicyError(
                    "angles_per_site too small for the feedback circuit"
                )
            pieces.append(outs[site, start:start + size])
            per_site_cursor[site] = start + size
        flat = torch.cat(pieces)
        if flat.numel() != n_angles:
            raise PolicyError("assignment does not cover the angle vector")
        return flat

    def eval(self, m: MeasurementRecord, assignment) -> np.ndarray:
        params = torch.as_tensor(self.weights)
        return self.eval_torch(params, m, assignment).detach().numpy()

    # binary layout: magic 'QFRN', depth, d_h, direction flag (0 uni/1 bi),
    # front-end flag (0 linear/1 conv5), angles_per_site, weight count,
    # then little-endian float64 weights.
    def save(self, path) -> None:
        cfg = self.config
        with open(path, "wb") as f:
            f.write(struct.pack("<4sIIIIIQ", b"QFRN", cfg.depth, cfg.d_h,
                                1 if cfg.direction == "bi" else 0,
                                1 if cfg.front_end == "conv5" else 0,
                                cfg.angles_per_site, self.n_weights))
            f.write(self.weights.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "RnnPolicy":
        with open(path, "rb") as f:
            magic, depth, d_h, bi, conv, aps, nw = struct.unpack(
                "<4sIIIIIQ", f.read(32))
            if magic != b"QFRN":
                raise PolicyError("not an RNN policy file")
            weights = np.frombuffer(f.read(), dtype="<f8")
        if weights.size != nw:
            raise PolicyError("weight payload has wrong length")
        cfg = RnnConfig(depth, d_h, "bi" if bi else "uni",
                        "conv5" if conv else "linear", aps)
        return cls(cfg, weights.copy())


def circuit_assignment(layout: QubitLayout, u2) -> tuple:
    """Assignment triple consumed by RnnPolicy.eval_torch."""
    sites = assign_blocks_to_ancillas(layout, u2)
    sizes = [sl.stop - sl.start for sl, _ in u2.blocks]
    return (sites, sizes, u2.n_params)


def init_policy(kind: str, *, n_ancilla: int = None, n_angles: int = None,
                config: RnnConfig = None, seed: int = 0):
    """Fresh policy. Tabular starts at all zeros; the RNN gets scaled-uniform
    weights with a zero output head. Both start as identity feedback."""
    if kind == "tabular":
        return TabularPolicy(n_ancilla, n_angles)
    if kind in ("rnn-uni", "rnn-bi", "rnn"):
        if config is None:
            raise PolicyError("rnn policy needs a config")
        policy = RnnPolicy(config)
        rng = np.random.default_rng(seed)
        w = np.zeros(policy.n_weights)
        for name, (off, shape) in policy._layout.items():
            size = int(np.prod(shape))
            if name.endswith(("norm1", "norm2", "out.norm")):
                w[off:off + size] = 1.0
            elif name.startswith("head."):
                continue  # zero head -> identity feedback at init
            else:
                fan_in = shape[-1] if len(shape) > 1 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                w[off:off + size] = rng.uniform(-bound, bound, size)
        policy.set_params(w)
        return policy
    raise PolicyError(f"unknown policy kind {kind!r}")
