"""End-to-end runs: expert data, estimation, verification and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import hjb
from ._common import derive_seed, read_diagnostics_csv
from .alg1 import run_algorithm1
from .alg2 import run_algorithm2
from .config import ExperimentConfig
from .errors import IOCError
from .forward import CostSpec, ForwardOptions, integral_rl_solve, policy_distance
from .systems import (GainLaw, Trajectory, add_measurement_noise, perturb_input_dynamics,
                      read_trajectory_csv, simulate, write_trajectory_csv)

log = logging.getLogger(__name__)

# Seed-derivation paths under the master seed.
_EXPERT_FWD, _VERIFY_FWD, _NOISE, _CELL = 10, 11, 12, 13


@contextmanager
def _stage(name: str):
    try:
        yield
    except IOCError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
            exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


@dataclass
class RunReport:
    system: str
    algorithm: str
    seed: int
    converged: bool
    restarts: int
    iterations: int
    final_E: float
    W_Q: list | None
    R: list | None
    W_V: list | None
    K: list | None
    K_expert: list
    learner_gain_error: float | None
    verification_K: list | None
    policy_distance: float | None
    normalized_gain_error: float | None
    q_residual: float | None
    q_source: str | None
    T: float
    counters: dict
    wall_clock: float
    manifest: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _tolist(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def expert_gain(cfg: ExperimentConfig) -> np.ndarray:
    """The configured expert gain, or the forward solution of the expert cost."""
    if cfg.expert_K is not None:
        return np.atleast_2d(cfg.expert_K)
    fopts = ForwardOptions(seed=derive_seed(cfg.seed, _EXPERT_FWD))
    with _stage("expert"):
        return integral_rl_solve(cfg.system, cfg.expert_cost, cfg.basis, fopts).K


def expert_trajectory(cfg: ExperimentConfig, K_e, noise_seed: int | None = None) -> Trajectory:
    with _stage("expert"):
        if cfg.expert_csv is not None:
            traj = read_trajectory_csv(cfg.expert_csv, meta={"system": cfg.system_name})
        else:
            traj = simulate(cfg.system, GainLaw(K_e, cfg.basis.sigma_u), cfg.x0, cfg.dt,
                            cfg.duration, meta={"system": cfg.system_name, "role": "expert"})
        if cfg.noise_pct > 0:
            seed = derive_seed(cfg.seed, _NOISE) if noise_seed is None else noise_seed
            traj = add_measurement_noise(traj, cfg.noise_pct, seed)
    return traj


def estimate(cfg: ExperimentConfig, traj: Trajectory):
    """Run the configured algorithm against the (possibly perturbed) learner model."""
    learner = perturb_input_dynamics(cfg.system, cfg.g_uncertainty)
    with _stage(cfg.algorithm):
        if cfg.algorithm == "alg1":
            return run_algorithm1(traj, cfg.init, learner, cfg.basis, opts=cfg.alg1), learner
        init = (cfg.init_R, cfg.init_W_V)
        return run_algorithm2(traj, learner, init, cfg.basis, opts=cfg.alg2), learner


def verify(cfg: ExperimentConfig, cost, env, K_e):
    """Forward-solve the recovered cost in ``env`` and compare with the expert gain."""
    fopts = ForwardOptions(seed=derive_seed(cfg.seed, _VERIFY_FWD))
    with _stage("verify"):
        pair = integral_rl_solve(env, CostSpec(cost.W_Q, cost.R), cfg.basis, fopts)
    return pair.K, policy_distance(pair.K, K_e, cfg.basis)


_PLOT_SCRIPT = '''\
# Convergence curves of an estimation run.  Generated {stamp}.
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent
with open(here / "diagnostics.csv") as fh:
    rows = list(csv.DictReader(fh))
k = [int(r["k"]) for r in rows]
fig, ax = plt.subplots(2, 1, sharex=True, figsize=(6, 6))
ax[0].semilogy(k, [float(r["E"]) for r in rows])
ax[0].set_ylabel("policy error E")
ax[1].plot(k, [float(r["normWV"]) for r in rows], label="|W_V|")
ax[1].plot(k, [float(r["minEigR"]) for r in rows], label="min eig R")
ax[1].set_xlabel("iteration")
ax[1].legend()
fig.tight_layout()
fig.savefig(here / "convergence.png", dpi=150)
'''


def run_experiment(cfg: ExperimentConfig, out=None) -> RunReport:
    """Expert data, estimation, verification; writes files when an output directory is set."""
    t0 = time.perf_counter()
    out = Path(out) if out is not None else cfg.out
    K_e = expert_gain(cfg)
    traj = expert_trajectory(cfg, K_e)
    res, learner = estimate(cfg, traj)
    cost = res.cost
    K_v, dist, lerr = None, None, None
    K_l = cost.K if cost is not None else getattr(res.state, "K", None)
    if K_l is not None:
        lerr = float(np.linalg.norm(K_l - K_e) / np.linalg.norm(K_e))
    if cost is not None:
        K_v, dist = verify(cfg, cost, learner, K_e)
    report = RunReport(
        system=cfg.system_name, algorithm=cfg.algorithm, seed=cfg.seed,
        converged=bool(res.converged), restarts=int(res.restarts),
        iterations=int(res.iterations), final_E=float(res.final_E),
        W_Q=_tolist(cost.W_Q if cost else None), R=_tolist(cost.R if cost else None),
        W_V=_tolist(cost.W_V if cost else None), K=_tolist(K_l), K_expert=_tolist(K_e),
        learner_gain_error=lerr, verification_K=_tolist(K_v),
        policy_distance=None if dist is None else dist.max_deviation,
        normalized_gain_error=None if dist is None else dist.normalized_gain_error,
        q_residual=res.q_residual, q_source=None if res.stack is None else res.stack.source,
        T=float(cfg.alg1.T if cfg.algorithm == "alg1" else cfg.alg2.T),
        counters=dict(res.counters), wall_clock=time.perf_counter() - t0)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(traj, out / "expert.csv")
        res.diagnostics.write_csv(out / "diagnostics.csv")
        report.manifest = ["expert.csv", "diagnostics.csv"]
        if res.stack is not None:
            hjb.write_stack_csv(res.stack, out / "stack.csv")
            report.manifest.append("stack.csv")
        stamp = datetime.now(timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")
        (out / "plot_convergence.py").write_text(_PLOT_SCRIPT.format(stamp=stamp))
        report.manifest += ["plot_convergence.py", "report.json"]
        (out / "report.json").write_text(report.to_json() + "\n")
    return report


def read_report(path) -> RunReport:
    return RunReport(**json.loads(Path(path).read_text()))


def check_manifest(out) -> list:
    """Read every file listed in ``report.json`` back with its own reader."""
    out = Path(out)
    report = read_report(out / "report.json")
    loaded = []
    for name in report.manifest:
        p = out / name
        if name == "expert.csv":
            loaded.append(read_trajectory_csv(p))
        elif name == "diagnostics.csv":
            loaded.append(read_diagnostics_csv(p))
        elif name == "stack.csv":
            loaded.append(hjb.read_stack_csv(p, report.T, report.q_source or "expert"))
        elif name == "report.json":
            loaded.append(read_report(p))
        else:
            loaded.append(p.read_text())
    return loaded


@dataclass(frozen=True)
class NoiseCell:
    uncertainty: float
    trial: int
    error: float
    message: str = ""


def _run_cell(cfg: ExperimentConfig, K_e, level: int, u: float, trial: int) -> NoiseCell:
    cell = replace(cfg.with_seed(derive_seed(cfg.seed, _CELL, trial, level)), g_uncertainty=u,
                   out=None)
    try:
        traj = expert_trajectory(cell, K_e, derive_seed(cfg.seed, _NOISE, trial, level))
        res, _ = estimate(cell, traj)
        K_l = res.cost.K if res.cost is not None else res.state.K
        err = float(np.linalg.norm(K_l - K_e) / np.linalg.norm(K_e))
        return NoiseCell(u, trial, err)
    except IOCError as exc:
        log.warning("cell uncertainty=%g trial=%d failed: %s", u, trial, exc)
        return NoiseCell(u, trial, math.nan, str(exc))


def noise_study(cfg: ExperimentConfig, uncertainty_grid=None, trials: int | None = None,
                out=None, jobs: int = 1) -> list[NoiseCell]:
    """Normalized learner-gain error over a grid of input-map uncertainties.

    Measurement noise of ``cfg.noise_pct`` is regenerated for every cell from
    a seed derived from ``(trial, level)``.  A failing cell is recorded with a
    NaN error and the sweep continues.  Writes ``noise_study.csv`` with
    columns ``uncertainty,trial,norm_policy_error`` when ``out`` is set.
    """
    grid = list(cfg.grid if uncertainty_grid is None else uncertainty_grid)
    trials = cfg.trials if trials is None else int(trials)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    K_e = expert_gain(cfg)
    jobs_list = [(lvl, u, tr) for tr in range(trials) for lvl, u in enumerate(grid)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_run_cell, cfg, K_e, lvl, u, tr) for lvl, u, tr in jobs_list]
            cells = [f.result() for f in futs]
    else:
        cells = [_run_cell(cfg, K_e, lvl, u, tr) for lvl, u, tr in jobs_list]
    out = Path(out) if out is not None else cfg.out
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_noise_csv(cells, out / "noise_study.csv")
        failed = [asdict(c) for c in cells if c.message]
        (out / "noise_failures.json").write_text(json.dumps(failed, indent=2) + "\n")
    return cells


def write_noise_csv(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["uncertainty", "trial", "norm_policy_error"])
        for c in cells:
            w.writerow([repr(float(c.uncertainty)), c.trial, repr(float(c.error))])


def read_noise_csv(path) -> list[NoiseCell]:
    with open(path, newline="") as fh:
        return [NoiseCell(float(r["uncertainty"]), int(r["trial"]), float(r["norm_policy_error"]))
                for r in csv.DictReader(fh)]


__all__ = ["RunReport", "run_experiment", "expert_gain", "expert_trajectory", "estimate",
           "verify", "read_report", "check_manifest", "NoiseCell", "noise_study",
           "write_noise_csv", "read_noise_csv"]
