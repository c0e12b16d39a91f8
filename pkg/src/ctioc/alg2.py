"""Cost estimation when the input dynamics ``g`` are known.

The learner policy follows directly from the value weights,
``u_l = -1/2 R^-1 g(x)' grad(sigma_V)(x)' W_V``, so there is no forward
solve and no gain bookkeeping: the loop reads only the expert record.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import hjb
from ._common import (EPS_R, CostEstimate, Diagnostics, StopRule, derive_seed, random_pd_value,
                      random_restart_cost, safe_inv, select_samples)
from .alg1 import AlgResult, pd_guarded_step, update_R
from .basis import BasisSet, WuMap, build_wu_map, check_pd_value, check_psd_Q, gain_from_value
from .errors import PositivityError
from .systems import DynamicalSystem, Trajectory

log = logging.getLogger(__name__)


def _value_input_map(sys: DynamicalSystem, basis: BasisSet, x) -> np.ndarray:
    """``grad(sigma_V)(x) g(x)``, shape ``(..., L_V, m)``."""
    return basis.sigma_V.jacobian(x) @ sys.g(x)


def learner_input_known_g(R_l, W_Vl, sys: DynamicalSystem, basis: BasisSet, x) -> np.ndarray:
    """``-1/2 R^-1 g(x)' grad(sigma_V)(x)' W_V`` for one state or a batch."""
    B = _value_input_map(sys, basis, np.asarray(x, dtype=float))
    Ri = safe_inv(np.atleast_2d(R_l))
    return -0.5 * np.einsum("...km,k->...m", B, np.asarray(W_Vl, dtype=float)) @ Ri.T


def update_WV_known_g(W_Vl, sys: DynamicalSystem, R_l, E_u, x, alpha_V: float,
                      basis: BasisSet, max_halvings: int = 20) -> np.ndarray:
    """``W_V + alpha grad(sigma_V) g R^-1 E_u`` with the positivity guard."""
    B = _value_input_map(sys, basis, np.asarray(x, dtype=float))
    d = B @ (safe_inv(np.atleast_2d(R_l)) @ np.atleast_1d(E_u))
    new, ok = pd_guarded_step(np.asarray(W_Vl, dtype=float), d, alpha_V, basis, max_halvings)
    if not ok:
        raise PositivityError(f"no step within {max_halvings} halvings keeps the value PD")
    return new


@dataclass
class Alg2State:
    R: np.ndarray
    W_V: np.ndarray
    k: int = 0
    recent_E: list = field(default_factory=list)


@dataclass
class Alg2Options:
    """Settings of :func:`run_algorithm2`; fields mean the same as in :class:`Alg1Options`."""

    alpha_R: float = 1e-3
    alpha_V: float = 1e-3
    eps_E: float | None = None
    window: int = 50
    sample_floor: float = 0.05
    eval_size: int = 200
    max_iter: int = 200_000
    max_restarts: int = 3
    seed: int = 0
    fix_R: bool = False
    max_halvings: int = 20
    eps_R: float = EPS_R
    T: float = 0.03
    stride: float | None = None
    q_floor: float = 0.01
    q_rule: str = "trapezoid"
    q_sigma_tol: float = 1e-6

    def __post_init__(self):
        if self.alpha_R <= 0 or self.alpha_V <= 0:
            raise ValueError("step sizes must be positive")
        if self.eps_E is not None and self.eps_E <= 0:
            raise ValueError("eps_E must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def _sgd(state, B, U, eval_idx, basis, opts, eps_E, rng, diag):
    stop = StopRule(eps_E, opts.window)
    Be, Ue = B[eval_idx], U[eval_idx]

    def E_eval(R, W):
        u = -0.5 * (Be.transpose(0, 2, 1) @ W) @ safe_inv(R).T
        return float(np.sum((u - Ue) ** 2))

    best = (E_eval(state.R, state.W_V), state)
    n = len(B)
    for k in range(1, opts.max_iter + 1):
        i = rng.integers(n)
        Ri = safe_inv(state.R)
        u_l = -0.5 * Ri @ (B[i].T @ state.W_V)
        e = u_l - U[i]
        R_new = update_R(state.R, u_l, e, opts.alpha_R, opts.fix_R, opts.eps_R)
        W_V, _ = pd_guarded_step(state.W_V, B[i] @ (Ri @ e), opts.alpha_V, basis, opts.max_halvings)
        state = Alg2State(R_new, W_V, k)
        E = E_eval(R_new, W_V)
        diag.add(k, E, np.linalg.norm(W_V), np.linalg.eigvalsh(R_new)[0])
        if E < best[0]:
            best = (E, state)
        if stop.push(E):
            state.recent_E = list(stop.recent)
            return state, True, E, k
    return best[1], False, best[0], opts.max_iter


def run_algorithm2(expert: Trajectory, sys_known_g: DynamicalSystem, init, basis: BasisSet,
                   opts: Alg2Options | None = None, wu_map: WuMap | None = None) -> AlgResult:
    """Estimate ``(Q_l, R_l)`` using the known input map of ``sys_known_g``.

    ``init`` is a pair ``(R_l, W_Vl)``; ``None`` for either part draws the
    default (identity R, random PD quadratic value).  Only ``sys_known_g.g``
    is evaluated; the drift is never used and nothing is simulated.
    """
    opts = opts or Alg2Options()
    t0 = time.perf_counter()
    m = expert.m
    eps_E = opts.eps_E if opts.eps_E is not None else 1e-4 * m
    ts = select_samples(expert, opts.sample_floor, opts.eval_size, derive_seed(opts.seed, 0))
    B = _value_input_map(sys_known_g, basis, ts.X)
    diag = Diagnostics(("k", "E", "normWV", "minEigR"))

    R0, W0 = init if init is not None else (None, None)
    R = np.eye(m) if R0 is None else np.atleast_2d(np.asarray(R0, dtype=float))
    W_V = random_pd_value(basis, derive_seed(opts.seed, 5, 0)) if W0 is None else np.asarray(W0, dtype=float)
    best_fail = None
    for attempt in range(opts.max_restarts + 1):
        if np.linalg.eigvalsh(0.5 * (R + R.T))[0] <= 0:
            raise PositivityError("initial R must be positive definite")
        if not check_pd_value(W_V, basis):
            raise PositivityError("initial value weights are not positive definite")
        state = Alg2State(R.copy(), W_V.copy())
        rng = np.random.default_rng(derive_seed(opts.seed, 2, attempt))
        state, converged, E, iters = _sgd(state, B, ts.U, ts.eval_idx, basis, opts, eps_E, rng, diag)
        if not converged:
            log.warning("iteration cap reached with E=%.3g; continuing with the best state", E)
        stack = hjb.accumulate_expert(expert, state.R, state.W_V, opts.T, basis, opts.stride,
                                      opts.q_floor, opts.q_rule)
        est = hjb.estimate_WQ(stack, opts.q_sigma_tol)
        K = None
        if sys_known_g.W_g is not None:
            K = gain_from_value(state.W_V, state.R, sys_known_g.W_g, wu_map or build_wu_map(basis))
        if check_psd_Q(est.W_Q, basis):
            cost = CostEstimate(est.W_Q, state.R, state.W_V, K)
            return AlgResult(state, cost, diag, converged, attempt, E, iters, stack,
                             est.residual_rms, {"forward_solves": 0, "learner_rollouts": 0},
                             time.perf_counter() - t0)
        log.info("attempt %d: recovered penalty is not PSD; restarting", attempt)
        best_fail = AlgResult(state, None, diag, False, attempt, E, iters, stack, est.residual_rms,
                              {"forward_solves": 0, "learner_rollouts": 0})
        _, R_new = random_restart_cost(basis, m, derive_seed(opts.seed, 4, attempt), np.zeros(basis.L_Q))
        R = R if opts.fix_R else R_new
        W_V = random_pd_value(basis, derive_seed(opts.seed, 5, attempt + 1))
    best_fail.elapsed = time.perf_counter() - t0
    return best_fail


__all__ = ["learner_input_known_g", "update_WV_known_g", "Alg2State", "Alg2Options",
           "run_algorithm2"]
