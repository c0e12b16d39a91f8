"""State-penalty estimation by least squares on the integral HJB equation.

Along an optimal trajectory ``V(x(t-T)) - V(x(t)) = int Q(x) + u'Ru`` over
each window, which is linear in the penalty weights ``W_Q``.  Rows come
either from the recorded expert trajectory or from learner rollouts driven
by the converged policy plus an enrichment signal.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet
from .errors import DataError, NotInformativeError
from .quadrature import window_starts, window_weights, windowed_integrals
from .systems import (DynamicalSystem, GainLaw, SinusoidSignal, SumLaw, Trajectory,
                      simulate)

SOURCES = ("expert", "learner_enhanced")

# Enrichment is just a seeded multi-sine.
EnrichmentSignal = SinusoidSignal


@dataclass(frozen=True)
class HistoryStack:
    """Rows ``Phi[i] . W_Q = psi[i]`` of the integral HJB equation."""

    Phi: np.ndarray
    psi: np.ndarray
    T: float
    source: str
    t_end: np.ndarray

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if self.Phi.ndim != 2 or len(self.Phi) != len(self.psi) or len(self.psi) != len(self.t_end):
            raise ValueError("Phi, psi and t_end disagree on the number of rows")

    @property
    def rows(self) -> int:
        return len(self.psi)

    @property
    def L_Q(self) -> int:
        return self.Phi.shape[1]

    def append(self, other: "HistoryStack") -> "HistoryStack":
        if other.L_Q != self.L_Q:
            raise ValueError("stacks use different penalty bases")
        return HistoryStack(np.vstack([self.Phi, other.Phi]), np.concatenate([self.psi, other.psi]),
                            self.T, self.source, np.concatenate([self.t_end, other.t_end]))


def _windows(traj: Trajectory, T: float, stride: float | None, floor: float):
    width = int(round(T / traj.dt))
    step = int(round((stride if stride is not None else T) / traj.dt))
    if width < 2:
        raise ValueError("window T must span at least two sampling intervals")
    if step < 1:
        raise ValueError("stride must be at least one sampling interval")
    starts = window_starts(len(traj), width, step)
    if len(starts) == 0:
        raise DataError(f"trajectory of {traj.times[-1]:.4g} s is shorter than one window of {T} s")
    if floor > 0:
        amp = np.abs(traj.states).max(axis=1)
        peak = amp.max()
        wpeak = np.array([amp[s:s + width + 1].max() for s in starts])
        starts = starts[wpeak >= floor * peak]
        if len(starts) == 0:
            raise DataError("every window falls below the amplitude floor")
    return starts, width


def _assemble(traj, R_l, W_Vl, T, basis, stride, floor, rule, penalty, source):
    starts, width = _windows(traj, T, stride, floor)
    w = window_weights(width, traj.dt, rule)
    V = basis.sigma_V(traj.states) @ np.asarray(W_Vl, dtype=float)
    Phi = windowed_integrals(basis.sigma_Q(traj.states), starts, width, w)
    psi = V[starts] - V[starts + width] - windowed_integrals(penalty, starts, width, w)
    return HistoryStack(Phi, psi, T, source, traj.times[starts + width])


def _quad(u, R):
    return np.einsum("ki,ij,kj->k", u, R, u)


def accumulate_expert(traj: Trajectory, R_l, W_Vl, T: float, basis: BasisSet,
                      stride: float | None = None, floor: float = 0.01,
                      rule: str = "trapezoid") -> HistoryStack:
    """Stack from recorded expert data.

    Windows of ``T`` seconds start every ``stride`` seconds (default ``T``).
    Windows whose largest state magnitude stays below ``floor`` times the
    trajectory peak are dropped; ``floor=0`` keeps all of them.
    """
    R_l = np.atleast_2d(R_l)
    return _assemble(traj, R_l, W_Vl, T, basis, stride, floor, rule,
                     _quad(traj.inputs, R_l), "expert")


def accumulate_enhanced(traj_l: Trajectory, K_conv, R_l, W_Vl, u_p, T: float, basis: BasisSet,
                        stride: float | None = None, floor: float = 0.01,
                        rule: str = "trapezoid") -> HistoryStack:
    """Stack from a learner rollout under ``u = -K_conv sigma_u(x) + u_p(t)``.

    ``u_p`` is the enrichment signal (callable of time); ``None`` recovers it
    from the recorded inputs as ``u - u*``.
    """
    R_l = np.atleast_2d(R_l)
    u_star = -(basis.sigma_u(traj_l.states) @ np.atleast_2d(K_conv).T)
    if u_p is None:
        up = traj_l.inputs - u_star
    else:
        up = np.stack([np.broadcast_to(u_p(t), (traj_l.m,)) for t in traj_l.times])
    penalty = 2 * np.einsum("ki,ij,kj->k", u_star, R_l, up) + _quad(u_star, R_l)
    return _assemble(traj_l, R_l, W_Vl, T, basis, stride, floor, rule, penalty,
                     "learner_enhanced")


def make_enrichment(m: int, peak_input, seed: int, n_sines: int = 6, fmin: float = 0.2,
                    fmax: float = 8.0, fraction: float = 0.3) -> EnrichmentSignal:
    """Log-spaced multi-sine bounded by ``fraction`` of the expert's peak input per channel."""
    amp = fraction * np.broadcast_to(np.asarray(peak_input, dtype=float), (m,))
    return SinusoidSignal.random(m, n_sines, fmin, fmax, amp, seed, log_spaced=True)


def simulate_enriched(sys: DynamicalSystem, K_conv, basis: BasisSet, u_p, x0,
                      dt: float = 1e-3, duration: float = 10.0) -> Trajectory:
    law = SumLaw(GainLaw(np.atleast_2d(K_conv), basis.sigma_u), u_p)
    return simulate(sys, law, x0, dt, duration, meta={"role": "learner_enhanced"})


@dataclass(frozen=True)
class Informativity:
    rank: int
    sigma_min: float
    informative: bool


def informativity(stack: HistoryStack, sigma_tol: float = 1e-6) -> Informativity:
    """Numerical rank and smallest singular value of ``Phi``.

    Informative means full column rank with ``sigma_min >= sigma_tol *
    sigma_max``; the threshold is relative so that it does not depend on the
    units of the data.
    """
    L = stack.L_Q
    if stack.rows == 0:
        return Informativity(0, 0.0, False)
    sv = np.linalg.svd(stack.Phi, compute_uv=False)
    if sv[0] == 0:
        return Informativity(0, 0.0, False)
    rank = int(np.sum(sv > max(stack.Phi.shape) * np.finfo(float).eps * sv[0]))
    smin = float(sv[-1]) if len(sv) == L else 0.0
    return Informativity(rank, smin, bool(rank == L and smin >= sigma_tol * sv[0]))


@dataclass(frozen=True)
class QEstimate:
    W_Q: np.ndarray
    residual_rms: float
    info: Informativity


def estimate_WQ(stack: HistoryStack, sigma_tol: float = 1e-6) -> QEstimate:
    """Least-squares penalty weights; refuses rank-deficient or ill-conditioned stacks."""
    info = informativity(stack, sigma_tol)
    if not info.informative:
        raise NotInformativeError(
            f"history stack is not informative: rank {info.rank} of {stack.L_Q}, "
            f"sigma_min {info.sigma_min:.3g}")
    W, *_ = np.linalg.lstsq(stack.Phi, stack.psi, rcond=None)
    res = stack.Phi @ W - stack.psi
    return QEstimate(W, float(np.sqrt(np.mean(res ** 2))), info)


def write_stack_csv(stack: HistoryStack, path) -> None:
    header = ["t_end"] + [f"sigmaQ_{i + 1}" for i in range(stack.L_Q)] + ["psi"]
    data = np.column_stack([stack.t_end, stack.Phi, stack.psi])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow(["%.17g" % v for v in row])


def read_stack_csv(path, T: float, source: str = "expert") -> HistoryStack:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return HistoryStack(data[:, 1:-1], data[:, -1], T, source, data[:, 0])


__all__ = [
    "HistoryStack", "EnrichmentSignal", "accumulate_expert", "accumulate_enhanced",
    "make_enrichment", "simulate_enriched", "Informativity", "informativity", "QEstimate",
    "estimate_WQ", "write_stack_csv", "read_stack_csv",
]
