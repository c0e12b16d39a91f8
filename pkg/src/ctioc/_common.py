"""Pieces shared by the two estimation loops."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, weights_from_matrix
from .errors import ConditioningError, DataError, NumericalError
from .systems import Trajectory

PINV_RTOL = 1e-8
EPS_R = 1e-6


@dataclass(frozen=True)
class CostEstimate:
    """Recovered cost ``(W_Q, R)`` with the value weights and gain it came with."""

    W_Q: np.ndarray
    R: np.ndarray
    W_V: np.ndarray
    K: np.ndarray | None = None


def derive_seed(master: int, *path: int) -> int:
    """Independent child seed for ``path`` under ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def checked_pinv(W, rtol: float = PINV_RTOL) -> np.ndarray:
    """Pseudoinverse that refuses to truncate: ill-conditioned ``W`` raises."""
    W = np.atleast_2d(W)
    if W.size == 0:
        raise ConditioningError("W_u is empty")
    u, sv, vt = np.linalg.svd(W, full_matrices=False)
    if sv[0] == 0 or sv[-1] < rtol * sv[0]:
        cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
        raise ConditioningError(f"W_u is too ill-conditioned for a pseudoinverse (cond {cond:.3g})")
    return (vt.T / sv) @ u.T


def project_spd(R, eps: float = EPS_R) -> np.ndarray:
    """Symmetrize and floor the eigenvalues at ``eps``."""
    R = 0.5 * (R + R.T)
    lam, V = np.linalg.eigh(R)
    if lam[0] >= eps:
        return R
    out = (V * np.maximum(lam, eps)) @ V.T
    out = 0.5 * (out + out.T)
    # Reconstruction and eigensolver roundoff scale with the largest eigenvalue;
    # shift past both so a later eigenvalue check still sees the floor.
    lam = np.linalg.eigvalsh(out)
    margin = 16 * np.finfo(float).eps * max(abs(lam[-1]), 1.0)
    if lam[0] < eps + margin:
        out += (eps + margin - lam[0]) * np.eye(len(out))
    return out


def distance(errors) -> float:
    """Sum of squared policy errors; an empty collection gives 0."""
    E = np.asarray(errors, dtype=float)
    return float(np.sum(E * E)) if E.size else 0.0


@dataclass
class TrainingSet:
    """Expert samples above the amplitude floor plus a fixed evaluation subset."""

    X: np.ndarray
    U: np.ndarray
    eval_idx: np.ndarray

    @property
    def size(self) -> int:
        return len(self.X)


def select_samples(expert: Trajectory, floor: float, eval_size: int, seed: int) -> TrainingSet:
    """Keep samples whose ``||x||_inf`` is at least ``floor`` times the trajectory peak."""
    amp = np.abs(expert.states).max(axis=1)
    peak = amp.max()
    if not np.isfinite(peak) or peak == 0:
        raise DataError("expert trajectory has no excitation")
    keep = amp >= floor * peak
    if floor > 0:
        keep &= amp > 0
    if not np.any(keep):
        raise DataError("no expert sample lies above the amplitude floor")
    X, U = expert.states[keep], expert.inputs[keep]
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(X), size=min(eval_size, len(X)), replace=False)
    return TrainingSet(X, U, np.sort(idx))


class StopRule:
    """True once the last ``window`` values are all below ``eps``."""

    def __init__(self, eps: float, window: int):
        if eps <= 0 or window < 1:
            raise ValueError("need eps > 0 and window >= 1")
        self.eps = eps
        self.recent = deque(maxlen=window)

    def push(self, value: float) -> bool:
        self.recent.append(value)
        return len(self.recent) == self.recent.maxlen and max(self.recent) < self.eps


@dataclass
class Diagnostics:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *values):
        self.rows.append(values)

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(self.columns))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([str(int(row[0]))] + ["%.17g" % v for v in row[1:]])


def read_diagnostics_csv(path) -> Diagnostics:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        cols = tuple(next(r))
        rows = [tuple(float(v) for v in line) for line in r if line]
    return Diagnostics(cols, rows)


def random_restart_cost(basis: BasisSet, m: int, seed: int, fallback_W_Q):
    """Fresh ``(W_Q, R)``: diagonal R with entries in [0.5, 1.5], Q from ``M'M``."""
    rng = np.random.default_rng(seed)
    R = np.diag(rng.uniform(0.5, 1.5, m))
    M = rng.normal(size=(basis.n, basis.n)) / np.sqrt(basis.n)
    W_Q = weights_from_matrix(M.T @ M + 0.1 * np.eye(basis.n), basis.sigma_Q)
    if not np.any(W_Q):
        W_Q = np.asarray(fallback_W_Q, dtype=float) * rng.uniform(0.5, 1.5)
    return W_Q, R


def random_pd_value(basis: BasisSet, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(basis.n, basis.n)) / np.sqrt(basis.n)
    return weights_from_matrix(M.T @ M + 0.1 * np.eye(basis.n), basis.sigma_V)


def safe_inv(R) -> np.ndarray:
    try:
        return np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("R is singular") from exc
