"""Command-line front end: ``ctioc <command> --config FILE [--out DIR] [--seed N]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._common import CostEstimate
from .config import ExperimentConfig, bundled_config, load_config
from .errors import BasisError, ConfigError, IOCError, NumericalError
from .experiment import (expert_gain, expert_trajectory, noise_study, read_report,
                         run_experiment, verify)
from .forward import integral_rl_solve
from .systems import perturb_input_dynamics, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("ctioc")


def _load(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists() and path.suffix == "" and "/" not in args.config:
        path = bundled_config(args.config)
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=Path(args.out))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.out or Path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(a) -> str:
    return np.array2string(np.asarray(a), precision=6, suppress_small=True)


def cmd_simulate(args, cfg):
    out = _out_dir(cfg)
    traj = expert_trajectory(cfg, expert_gain(cfg))
    write_trajectory_csv(traj, out / "expert.csv")
    print(f"wrote {out / 'expert.csv'} ({len(traj)} samples)")


def cmd_forward(args, cfg):
    if cfg.expert_cost is None:
        raise ConfigError("[expert] needs a cost for the forward solve", symbol="expert")
    pair = integral_rl_solve(cfg.system, cfg.expert_cost, cfg.basis, cfg.alg1.forward)
    out = _out_dir(cfg)
    (out / "forward.json").write_text(json.dumps(
        {"W_V": pair.W_V.tolist(), "K": pair.K.tolist(), "iterations": pair.iterations,
         "residual": pair.residual}, indent=2) + "\n")
    print(f"W_V = {_fmt(pair.W_V)}\nK = {_fmt(pair.K)}\niterations = {pair.iterations}")


def _cmd_alg(algorithm):
    def run(args, cfg):
        cfg = replace(cfg, algorithm=algorithm)
        if algorithm == "alg1" and cfg.init is None:
            raise ConfigError("alg1 needs an [init] cost", symbol="init")
        report = run_experiment(cfg, _out_dir(cfg))
        print(f"converged = {report.converged}  restarts = {report.restarts}  "
              f"E = {report.final_E:.3g}  time = {report.wall_clock:.1f} s")
        print(f"W_Q = {_fmt(report.W_Q)}\nR = {_fmt(report.R)}\nK = {_fmt(report.K)}")
        if report.policy_distance is not None:
            print(f"verification: max input deviation {report.policy_distance:.3g}, "
                  f"normalized gain error {report.normalized_gain_error:.3g}")
    return run


def cmd_noise_study(args, cfg):
    grid = None if args.grid is None else [float(g) for g in args.grid.split(",")]
    cells = noise_study(cfg, grid, args.trials, _out_dir(cfg), jobs=args.jobs)
    for c in cells:
        print(f"{c.uncertainty:.3f}  trial {c.trial}  error {c.error:.4g}"
              + (f"  FAILED: {c.message}" if c.message else ""))


def cmd_verify(args, cfg):
    src = Path(args.report) if args.report else _out_dir(cfg) / "report.json"
    try:
        rep = read_report(src)
    except OSError as exc:
        raise ConfigError(f"cannot read report {src}: {exc.strerror}") from None
    if rep.W_Q is None:
        raise NumericalError("the report holds no recovered cost")
    cost = CostEstimate(np.array(rep.W_Q), np.array(rep.R), np.array(rep.W_V))
    K_e = expert_gain(cfg)
    K_v, dist = verify(cfg, cost, perturb_input_dynamics(cfg.system, cfg.g_uncertainty), K_e)
    print(f"K = {_fmt(K_v)}\nmax input deviation {dist.max_deviation:.3g}, "
          f"normalized gain error {dist.normalized_gain_error:.3g}")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate the expert and write its trajectory CSV"),
    "forward": (cmd_forward, "forward-solve the expert cost"),
    "alg1": (_cmd_alg("alg1"), "estimate the cost with the model-free gain bookkeeping"),
    "alg2": (_cmd_alg("alg2"), "estimate the cost with a known input map"),
    "noise-study": (cmd_noise_study, "sweep input-map uncertainty under measurement noise"),
    "verify": (cmd_verify, "forward-solve a recovered cost and compare policies"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctioc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True,
                       help="config file, or the name of a bundled one (example1, quadrotor, linear2d)")
        s.add_argument("--out", help="output directory (overrides [run] out)")
        s.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        if name == "noise-study":
            s.add_argument("--grid", help="comma-separated uncertainty levels")
            s.add_argument("--trials", type=int)
            s.add_argument("--jobs", type=int, default=1)
        if name == "verify":
            s.add_argument("--report", help="report.json to verify (default OUT/report.json)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        COMMANDS[args.command][0](args, cfg)
    except (ConfigError, BasisError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, IOCError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
