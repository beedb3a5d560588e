"""Experiment runner: config-driven training, validation, and analysis.

Commands: train, validate, analyze, gradcheck, teacher-student.
Configs are YAML (nested key-value; schema documented in the README).
Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 check failure.
"""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import (correctability_check, correctability_to_csv,
                       expressivity_to_csv, mi_profile_to_csv, mi_to_csv,
                       protocol_mi_stages, teacher_student)
from .circuits import (ParamCircuit, build_feedback_ansatz,
                       build_hardware_efficient, tie_parameters)
from .feedback import RnnConfig, RnnPolicy, TabularPolicy, init_policy
from .gradients import fd_check
from .optim import RunRecord, ScheduleSpec, train
from .protocol import (LossSpec, ProtocolSpec, ancilla_regularization,
                       ghz_lambda_loss, total_loss)
from .qsim import ProbTable, QubitLayout
from .targets import (BOUNDARIES, aklt_hamiltonian_qubit, aklt_manifold,
                      build_aklt, build_ghz, lowdin_orthonormalize)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "target": None,
    "boundary": ["up", "up"],
    "layout": {"kind": "blocks", "n_blocks": 1, "roles": None,
               "n_system": None, "every": None},
    "circuit": {"u1_depth": 4, "u2_block_depth": 5, "tie_period": 0},
    "feedback": {"kind": "tabular", "rnn_depth": 2, "rnn_d_h": 16,
                 "rnn_front_end": "conv5", "rnn_seed": 0},
    "loss": {"lam": 0.0, "reg_weight": 0.0, "reg_ratio": 2.0},
    "schedule": {"lr_kind": "constant", "lr_base": 1e-2, "lr_final": 1e-4,
                 "lr_switch_epoch": 0, "freq_start": 1, "freq_end": 1,
                 "freq_ramp_epochs": 0, "noise_start": 0.0,
                 "noise_end_epoch": 0},
    "epochs": 100,
    "seeds": [0],
    "entropy_interval": 10,
    "early_stop_infidelity": 1e-6,
    "init_scale": 0.1,
    "out": "runs",
}

TARGETS = ("ghz", "aklt-manifold", "aklt-single")


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in (extra or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config field {k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"field {k!r} must be a mapping")
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    if cfg["target"] not in TARGETS:
        raise ConfigError(
            f"target must be one of {TARGETS}, got {cfg['target']!r}")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be nonempty")
    if cfg["epochs"] < 1:
        raise ConfigError("epochs must be >= 1")
    return cfg


def build_layout(cfg: dict) -> QubitLayout:
    lc = cfg["layout"]
    kind = lc["kind"]
    if kind == "blocks":
        return QubitLayout.from_blocks(int(lc["n_blocks"]))
    if kind == "interleaved":
        if lc["n_system"] is None or lc["every"] is None:
            raise ConfigError("interleaved layout needs n_system and every")
        return QubitLayout.interleaved(int(lc["n_system"]), int(lc["every"]))
    if kind == "roles":
        if not lc["roles"]:
            raise ConfigError("roles layout needs a roles string")
        return QubitLayout(lc["roles"])
    raise ConfigError(f"unknown layout kind {kind!r}")


def build_experiment(cfg: dict):
    """Config -> (spec, lossspec, schedule, policy factory)."""
    layout = build_layout(cfg)
    cc = cfg["circuit"]
    u1 = build_hardware_efficient(layout, int(cc["u1_depth"]))
    if int(cc["tie_period"]):
        u1 = tie_parameters(u1, int(cc["tie_period"]))
    u2 = build_feedback_ansatz(layout, int(cc["u2_block_depth"]))
    spec = ProtocolSpec(layout, u1, u2)

    n_sys = len(layout.system_indices)
    lc = cfg["loss"]
    if cfg["target"] == "ghz":
        lossspec = LossSpec("ghz_lambda", lam=float(lc["lam"]),
                            reg_weight=float(lc["reg_weight"]),
                            reg_ratio=float(lc["reg_ratio"]))
    elif cfg["target"] == "aklt-manifold":
        if n_sys % 2:
            raise ConfigError("aklt targets need an even system size")
        lossspec = LossSpec("manifold_fidelity", aklt_manifold(n_sys // 2),
                            reg_weight=float(lc["reg_weight"]),
                            reg_ratio=float(lc["reg_ratio"]))
    else:
        if n_sys % 2:
            raise ConfigError("aklt targets need an even system size")
        b = tuple(cfg["boundary"])
        if b not in BOUNDARIES:
            raise ConfigError(f"boundary must be one of {BOUNDARIES}")
        lossspec = LossSpec("single_fidelity", build_aklt(n_sys // 2, b),
                            reg_weight=float(lc["reg_weight"]),
                            reg_ratio=float(lc["reg_ratio"]))

    sc = cfg["schedule"]
    schedule = ScheduleSpec(
        lr_kind=sc["lr_kind"], lr_base=float(sc["lr_base"]),
        lr_final=float(sc["lr_final"]),
        lr_switch_epoch=int(sc["lr_switch_epoch"]),
        freq_start=int(sc["freq_start"]), freq_end=int(sc["freq_end"]),
        freq_ramp_epochs=int(sc["freq_ramp_epochs"]),
        noise_start=float(sc["noise_start"]),
        noise_end_epoch=int(sc["noise_end_epoch"]))

    fb = cfg["feedback"]
    kind = fb["kind"]
    if kind not in ("tabular", "rnn-uni", "rnn-bi"):
        raise ConfigError(f"unknown feedback kind {kind!r}")

    def policy_factory():
        if kind == "tabular":
            return init_policy("tabular", n_ancilla=layout.n_ancilla,
                               n_angles=u2.n_free)
        sites, sizes, _ = spec.assignment()
        per_site = max(sum(sz for s, sz in zip(sites, sizes) if s == a)
                       for a in set(sites))
        rc = RnnConfig(depth=int(fb["rnn_depth"]), d_h=int(fb["rnn_d_h"]),
                       direction=kind.split("-")[1],
                       front_end=fb["rnn_front_end"],
                       angles_per_site=per_site)
        return init_policy(kind, config=rc, seed=int(fb["rnn_seed"]))

    return spec, lossspec, schedule, policy_factory


def config_hash(cfg: dict) -> str:
    semantic = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(semantic, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: dict) -> None:
    files = sorted(p for p in run_dir.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": {str(p.relative_to(run_dir)): _sha256(p) for p in files},
    }
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def save_theta1(theta1: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as f:
        f.write("index,angle\n")
        for i, v in enumerate(theta1):
            f.write(f"{i},{float(v)!r}\n")


def load_theta1(path: Path) -> np.ndarray:
    rows = path.read_text().strip().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def run_one_seed(cfg: dict, seed: int, out_root: Path, epochs: int) -> RunRecord:
    spec, lossspec, schedule, policy_factory = build_experiment(cfg)
    policy = policy_factory()
    record = train(spec, lossspec, policy, schedule, epochs, seed,
                   entropy_interval=int(cfg["entropy_interval"]),
                   early_stop_infidelity=float(cfg["early_stop_infidelity"]),
                   init_scale=float(cfg["init_scale"]), config=cfg)
    run_dir = out_root / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)
    record.to_csv(run_dir / "metrics.csv")
    save_theta1(record.theta1, run_dir / "theta1.csv")
    if isinstance(policy, TabularPolicy):
        policy.save(run_dir / "policy.csv")
    else:
        policy.save(run_dir / "policy.bin")
    (run_dir / "u1.json").write_text(spec.u1.to_json())
    (run_dir / "u2.json").write_text(spec.u2.to_json())
    write_manifest(run_dir, cfg)
    return record


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.seed:
        cfg["seeds"] = list(args.seed)
    out_root = Path(args.out or cfg["out"])
    failed = False
    for seed in cfg["seeds"]:
        record = run_one_seed(cfg, int(seed), out_root, int(cfg["epochs"]))
        final = record.final
        status = ("aborted" if record.aborted
                  else "early-stop" if record.early_stopped else "done")
        print(f"seed {seed}: {status} after {final['epoch'] + 1} epochs, "
              f"infidelity {final['infidelity']:.3e}, "
              f"H {final['shannon_h']:.3f}")
        failed = failed or record.aborted
    return EXIT_NUMERIC if failed else EXIT_OK


def _load_run(run_dir: Path):
    cfg_path = run_dir / "config.yaml"
    theta_path = run_dir / "theta1.csv"
    if not cfg_path.exists() or not theta_path.exists():
        raise ConfigError(f"{run_dir} is missing run snapshots")
    with open(cfg_path) as f:
        cfg = _merge(DEFAULTS, yaml.safe_load(f))
    spec, lossspec, _, _ = build_experiment(cfg)
    theta1 = load_theta1(theta_path)
    if (run_dir / "policy.csv").exists():
        policy = TabularPolicy.load(run_dir / "policy.csv")
    elif (run_dir / "policy.bin").exists():
        policy = RnnPolicy.load(run_dir / "policy.bin")
    else:
        raise ConfigError(f"{run_dir} has no policy snapshot")
    return cfg, spec, lossspec, theta1, policy


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    cfg, spec, lossspec, theta1, policy = _load_run(run_dir)
    out = run_dir / "analysis"
    out.mkdir(exist_ok=True)
    analyses = set(args.analyses or ["mi"])
    if "mi" in analyses:
        stages = protocol_mi_stages(spec, theta1, policy, m=args.outcome)
        m = stages.pop("outcome")
        for stage, mi in stages.items():
            tag = stage.replace("post-", "")
            mi_to_csv(mi, out / f"mi_{tag}.csv")
            mi_profile_to_csv(mi, out / f"mi_profile_{tag}.csv")
        print(f"MI matrices for outcome {m} -> {out}")
    if "correctability" in analyses:
        indices = (args.index if args.index is not None
                   else range(spec.layout.n_ancilla))
        for idx in np.atleast_1d(indices):
            rep = correctability_check(spec, lossspec, theta1, policy,
                                       int(idx), args.lam_pen, args.seed)
            correctability_to_csv(rep, out / f"correctability_{idx}.csv")
            print(f"correctability index {idx}: outcome {rep.outcome} -> "
                  f"{rep.outcome_flipped}, max dtheta "
                  f"{rep.delta_theta.max():.3f} rad")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    spec, lossspec, _, policy_factory = build_experiment(cfg)
    rng = np.random.default_rng(args.seed)
    theta1 = rng.uniform(-0.5, 0.5, spec.u1.n_free)
    policy = policy_factory()
    policy.set_params(policy.param_vector
                      + rng.uniform(-0.1, 0.1, policy.param_vector.size))
    report = Path(args.out) / "fd_report.csv" if args.out else None
    if report:
        report.parent.mkdir(parents=True, exist_ok=True)
    worst = fd_check(spec, lossspec, theta1, policy, eps=args.eps,
                     report_path=report)
    print(f"worst relative error: {worst:.3e} (tolerance {args.tol:.1e})")
    return EXIT_OK if worst < args.tol else EXIT_CHECK


def cmd_teacher_student(args) -> int:
    points = []
    for d in args.depth:
        p = teacher_student(QubitLayout.all_system(args.n_qubits), d, d,
                            args.s0, args.restarts, args.seed,
                            steps=args.steps)
        points.append(p)
        print(f"depth {d}, S0={args.s0}: min infidelity {p.infidelity:.3e}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        expressivity_to_csv(points, out)
    return EXIT_OK


def _oracle_checks():
    """(name, passed, detail) rows for the validation suite."""
    rows = []
    for n in (2, 3):
        ham = aklt_hamiltonian_qubit(n)
        worst = max(abs(ham.expectation(build_aklt(n, b)))
                    for b in BOUNDARIES)
        rows.append((f"aklt-zero-energy-n{n}", worst < 1e-10,
                     f"max |E| = {worst:.2e}"))
    man = aklt_manifold(2)
    mat = np.stack([s.numpy() for s in man.basis], axis=1)
    gram_err = np.abs(mat.conj().T @ mat - np.eye(4)).max()
    rows.append(("manifold-gram-identity", gram_err < 1e-10,
                 f"max deviation {gram_err:.2e}"))
    ghz = build_ghz(4)
    zero = np.zeros(16, dtype=complex)
    zero[0] = 1.0
    l_ghz = ghz_lambda_loss(ghz, 0.5)
    l_zero = ghz_lambda_loss(torch.as_tensor(zero), 0.5)
    rows.append(("ghz-loss-identities",
                 abs(l_ghz) < 1e-12 and abs(l_zero - 0.5) < 1e-12,
                 f"l(GHZ)={l_ghz:.2e}, l(|0>)={l_zero}"))
    uniform = ProbTable(np.full(4, 0.25), 2)
    reg_u = ancilla_regularization(uniform, 2.0)
    peaked = ProbTable(np.array([0.97, 0.01, 0.01, 0.01]), 2)
    reg_p = ancilla_regularization(peaked, 2.0)
    rows.append(("regularization-window", reg_u == 0.0 and reg_p > 0.0,
                 f"uniform {reg_u}, peaked {reg_p:.3e}"))

    layout = QubitLayout("ASSA")
    u1 = build_hardware_efficient(layout, 2)
    u2 = build_feedback_ansatz(layout, 2)
    spec = ProtocolSpec(layout, u1, u2)
    lossspec = LossSpec("ghz_lambda", lam=0.5, reg_weight=0.1)
    rng = np.random.default_rng(7)
    theta1 = rng.uniform(-0.5, 0.5, u1.n_free)
    policy = init_policy("tabular", n_ancilla=layout.n_ancilla,
                         n_angles=u2.n_free)
    policy.set_params(rng.uniform(-0.3, 0.3, policy.param_vector.size))
    worst = fd_check(spec, lossspec, theta1, policy)
    rows.append(("gradient-fd-check", worst < 1e-5,
                 f"worst relative error {worst:.2e}"))
    return rows


def cmd_validate(args) -> int:
    ok = True
    for name, passed, detail in _oracle_checks():
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="qflab",
        description="Measurement-feedback circuit training lab")
    ap.add_argument("--threads", type=int, default=1,
                    help="torch intra-op threads")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training for each seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, action="append",
                   help="override config seeds (repeatable)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="output directory root")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("validate", help="run the oracle suite")
    v.add_argument("--config", help="unused; accepted for uniformity")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("analyze", help="post-hoc analysis of a run directory")
    a.add_argument("run", help="run directory (one seed)")
    a.add_argument("--analyses", nargs="+", choices=["mi", "correctability"])
    a.add_argument("--outcome", type=int, default=None,
                   help="measurement outcome for staged MI")
    a.add_argument("--index", type=int, nargs="+", default=None,
                   help="ancilla indices for correctability")
    a.add_argument("--lam-pen", type=float, default=0.1)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--out", help="directory for the per-coordinate report")
    g.set_defaults(func=cmd_gradcheck)

    ts = sub.add_parser("teacher-student",
                        help="expressivity scan at equal depths")
    ts.add_argument("--n-qubits", type=int, default=8)
    ts.add_argument("--depth", type=int, nargs="+", default=[1, 2, 3])
    ts.add_argument("--s0", type=float, default=0.0)
    ts.add_argument("--restarts", type=int, default=5)
    ts.add_argument("--steps", type=int, default=3000)
    ts.add_argument("--seed", type=int, default=0)
    ts.add_argument("--out", help="CSV output path")
    ts.set_defaults(func=cmd_teacher_student)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(args.threads, 1))
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
