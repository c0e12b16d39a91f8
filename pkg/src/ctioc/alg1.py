"""Model-free cost estimation from a single expert trajectory.

The learner's input weight ``R_l`` and value weights ``W_Vl`` are fitted by
stochastic gradient descent on the mismatch between the learner policy
``u_l = -K_l sigma_u(x)`` and recorded expert inputs.  The gain is carried
along without a model through ``K' = R'^-1 R K W_u^+ W_u'``.  Once the
policies agree, the state penalty follows from the integral HJB equation.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import hjb
from ._common import (EPS_R, CostEstimate, Diagnostics, StopRule, checked_pinv, derive_seed,
                      distance, project_spd, random_restart_cost, safe_inv, select_samples)
from .basis import BasisSet, WuMap, build_wu_map, check_psd_Q, positivity_test
from .errors import ConditioningError, NotInformativeError, NumericalError, PositivityError
from .forward import CostSpec, ForwardOptions, integral_rl_solve
from .systems import DynamicalSystem, Trajectory

log = logging.getLogger(__name__)

Q_SOURCES = ("expert", "enhanced", "auto")


def learner_input(K_l, basis: BasisSet, x) -> np.ndarray:
    """``-K_l sigma_u(x)``; ``x`` may be a single state or a batch."""
    return -(basis.sigma_u(x) @ np.atleast_2d(K_l).T)


def policy_error(u_l, u_e) -> np.ndarray:
    return np.asarray(u_l, dtype=float) - np.asarray(u_e, dtype=float)


def r_direction(R, u_l, E_u) -> np.ndarray:
    """Descent direction of ``|E_u|^2`` over symmetric ``R``: ``R^-1 E u' + u E' R^-1``."""
    Ri = safe_inv(np.atleast_2d(R))
    a = Ri @ np.reshape(E_u, (-1, 1)) @ np.reshape(u_l, (1, -1))
    return a + a.T


def update_R(R, u_l, E_u, alpha_R: float, fix_R: bool = False, eps_R: float = EPS_R) -> np.ndarray:
    """One gradient step on ``R``, projected back to symmetric with eigenvalues >= ``eps_R``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if fix_R:
        return R.copy()
    return project_spd(R + alpha_R * r_direction(R, u_l, E_u), eps_R)


def value_products(basis: BasisSet, x) -> np.ndarray:
    """``grad(sigma_V)(x) sigma_g(x)'``, shape ``(..., L_V, L_g)``."""
    return np.einsum("...kj,...ij->...ki", basis.sigma_V.jacobian(x), basis.sigma_g(x))


def wv_direction(D, W_u, K_l, E_u, W_u_pinv=None) -> np.ndarray:
    """``D (W_u^+)' K' E_u`` where ``D = grad(sigma_V) sigma_g'`` at the sample."""
    P = checked_pinv(W_u) if W_u_pinv is None else W_u_pinv
    return D @ (P.T @ (np.atleast_2d(K_l).T @ np.atleast_1d(E_u)))


def pd_guarded_step(W_V, direction, alpha: float, basis: BasisSet, max_halvings: int = 20):
    """``W_V + a * direction`` with the largest ``a = alpha / 2^j`` keeping the value PD.

    Returns ``(W_V_new, accepted)``; when no step passes, ``W_V`` comes back unchanged.
    """
    is_pd = positivity_test(basis, "V")
    a = alpha
    for _ in range(max_halvings + 1):
        cand = W_V + a * direction
        if is_pd(cand):
            return cand, True
        a *= 0.5
    return W_V, False


@dataclass
class Alg1State:
    R: np.ndarray
    W_V: np.ndarray
    W_u: np.ndarray
    K: np.ndarray
    k: int = 0
    recent_E: list = field(default_factory=list)


def update_WV(state: Alg1State, E_u, x, alpha_V: float, basis: BasisSet, wu_map: WuMap | None = None,
              max_halvings: int = 20) -> np.ndarray:
    """Gradient step on ``W_V`` at expert state ``x`` with a positivity guard.

    Raises :class:`PositivityError` when no halved step keeps the value PD.
    """
    D = value_products(basis, np.asarray(x, dtype=float))
    d = wv_direction(D, state.W_u, state.K, E_u)
    new, ok = pd_guarded_step(state.W_V, d, alpha_V, basis, max_halvings)
    if not ok:
        raise PositivityError(f"no step within {max_halvings} halvings keeps the value PD")
    return new


def propagate_K(K, R_old, R_new, Wul_old, Wul_new, Wul_old_pinv=None) -> np.ndarray:
    """``K' = R_new^-1 R_old K W_u,old^+ W_u,new``."""
    P = checked_pinv(Wul_old) if Wul_old_pinv is None else Wul_old_pinv
    R_new = np.atleast_2d(R_new)
    try:
        return np.linalg.solve(R_new, np.atleast_2d(R_old) @ np.atleast_2d(K) @ P @ Wul_new)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("R_new is singular") from exc


@dataclass
class Alg1Options:
    """Settings of :func:`run_algorithm1`.

    ``eps_E`` defaults to ``1e-4 * m``.  ``sample_floor`` and ``q_floor`` are
    fractions of the expert's peak state amplitude.  ``q_source`` picks the
    data for the penalty fit: the expert trajectory, an enriched learner
    rollout, or ``"auto"`` (expert first, enriched rollout if the expert
    stack is not informative).

    An attempt ends when the stopping rule fires, when the best ``E`` has not
    improved by a factor ``1 - plateau_tol`` within ``plateau_window``
    iterations, or at ``max_iter``.  An attempt that stalls above ``eps_E``
    is restarted; with ``restart_from_estimate`` the next forward solve uses
    the penalty just recovered (when it is PSD) instead of a random cost.
    """

    alpha_R: float = 1e-3
    alpha_V: float = 1e-3
    eps_E: float | None = None
    window: int = 50
    sample_floor: float = 0.05
    eval_size: int = 200
    max_iter: int = 200_000
    max_restarts: int = 3
    seed: int = 0
    batch_mode: str = "stochastic"
    fix_R: bool = False
    max_halvings: int = 20
    eps_R: float = EPS_R
    plateau_window: int = 5000
    plateau_tol: float = 0.01
    restart_from_estimate: bool = True
    T: float = 0.03
    stride: float | None = None
    q_floor: float = 0.01
    q_source: str = "auto"
    q_rule: str = "trapezoid"
    q_sigma_tol: float = 1e-6
    enrich_sines: int = 6
    enrich_fmin: float = 0.2
    enrich_fmax: float = 8.0
    enrich_fraction: float = 0.3
    enrich_duration: float | None = None
    # A strong probe identifies the input map well enough for the gain bookkeeping.
    forward: ForwardOptions = field(default_factory=lambda: ForwardOptions(probe_scale=1.0))

    def __post_init__(self):
        if self.alpha_R <= 0 or self.alpha_V <= 0:
            raise ValueError("step sizes must be positive")
        if self.eps_E is not None and self.eps_E <= 0:
            raise ValueError("eps_E must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.batch_mode not in ("stochastic", "full_batch"):
            raise ValueError("batch_mode must be 'stochastic' or 'full_batch'")
        if self.q_source not in Q_SOURCES:
            raise ValueError(f"q_source must be one of {Q_SOURCES}")


@dataclass
class AlgResult:
    """Outcome of an estimation run.

    ``converged`` is False when the iteration cap was hit; the state is
    then the best one seen.  ``cost`` is None only when every restart failed
    to produce a PSD penalty.
    """

    state: object
    cost: CostEstimate | None
    diagnostics: Diagnostics
    converged: bool
    restarts: int
    final_E: float
    iterations: int
    stack: hjb.HistoryStack | None = None
    q_residual: float | None = None
    counters: dict = field(default_factory=dict)
    elapsed: float = 0.0


class _Batch:
    """Precomputed basis values for the expert samples."""

    def __init__(self, ts, basis: BasisSet):
        self.X, self.U = ts.X, ts.U
        self.S = basis.sigma_u(ts.X)
        self.D = value_products(basis, ts.X)
        self.eval_idx = ts.eval_idx

    def E_eval(self, K):
        i = self.eval_idx
        return distance(self.S[i] @ K.T + self.U[i])

    def E_full(self, K):
        return distance(self.S @ K.T + self.U)


def _min_eig(R):
    return float(R[0, 0]) if R.shape == (1, 1) else float(np.linalg.eigvalsh(R)[0])


def _record(diag, k, E, state):
    diag.add(k, E, np.linalg.norm(state.K), np.linalg.norm(state.W_V), _min_eig(state.R))


def _sgd(state: Alg1State, batch: _Batch, basis, wu_map, opts: Alg1Options, eps_E, rng, diag):
    """Step 4 loop; returns ``(state, status, E, iterations)``.

    ``status`` is ``"converged"``, ``"plateau"`` or ``"max_iter"``; for the
    last two the returned state is the best one seen.
    """
    stop = StopRule(eps_E, opts.window)
    P = checked_pinv(state.W_u)
    # Start from the propagation's fixed point so the first step has no jump.
    state = Alg1State(state.R, state.W_V, state.W_u, state.K @ P @ state.W_u, state.k)
    E = batch.E_eval(state.K) if opts.batch_mode == "stochastic" else batch.E_full(state.K)
    best_E, best, best_k, ref_E = E, state, 0, E
    n = len(batch.X)
    for k in range(1, opts.max_iter + 1):
        if opts.batch_mode == "stochastic":
            i = rng.integers(n)
            u_l = -(state.K @ batch.S[i])
            e = u_l - batch.U[i]
            R_new = update_R(state.R, u_l, e, opts.alpha_R, opts.fix_R, opts.eps_R)
            d = batch.D[i] @ (P.T @ (state.K.T @ e))
            W_V, _ = pd_guarded_step(state.W_V, d, opts.alpha_V, basis, opts.max_halvings)
            W_u = wu_map(W_V)
            try:
                P_new = checked_pinv(W_u)
            except ConditioningError:
                W_V, W_u, P_new = state.W_V, state.W_u, P
            K_new = propagate_K(state.K, state.R, R_new, state.W_u, W_u, P)
            P = P_new
            state = Alg1State(R_new, W_V, W_u, K_new, k)
            E = batch.E_eval(K_new)
        else:
            state, E, P, moved = _full_batch_step(state, batch, basis, wu_map, opts, P, E)
            state.k = k
            if not moved:
                _record(diag, k, E, state)
                return state, ("converged" if E < eps_E else "plateau"), E, k
        _record(diag, k, E, state)
        if stop.push(E):
            state.recent_E = list(stop.recent)
            return state, "converged", E, k
        if E < ref_E * (1 - opts.plateau_tol):
            best_k, ref_E = k, E
        if E < best_E:
            best_E, best = E, state
        if k - best_k >= opts.plateau_window:
            return best, "plateau", best_E, k
    return best, "max_iter", best_E, opts.max_iter


def _full_batch_step(state, batch, basis, wu_map, opts, P, E_cur):
    """Averaged direction with backtracking; accept only non-increasing full-set error."""
    u_l = -(batch.S @ state.K.T)                       # (N, m)
    e = u_l - batch.U
    n = len(e)
    if opts.fix_R:
        dR = np.zeros_like(state.R)
    else:
        Ri = safe_inv(state.R)
        a = Ri @ (e.T @ u_l) / n
        dR = a + a.T
    dV = np.einsum("pkg,pg->k", batch.D, (e @ state.K) @ P) / n
    E0 = E_cur
    is_pd = positivity_test(basis, "V")
    aR, aV = opts.alpha_R, opts.alpha_V
    for _ in range(opts.max_halvings + 1):
        R_new = project_spd(state.R + aR * dR, opts.eps_R) if not opts.fix_R else state.R
        W_V = state.W_V + aV * dV
        if is_pd(W_V):
            W_u = wu_map(W_V)
            try:
                P_new = checked_pinv(W_u)
            except ConditioningError:
                P_new = None
            if P_new is not None:
                K_new = propagate_K(state.K, state.R, R_new, state.W_u, W_u, P)
                E_new = batch.E_full(K_new)
                if E_new <= E0:
                    return Alg1State(R_new, W_V, W_u, K_new, state.k), E_new, P_new, True
        aR *= 0.5
        aV *= 0.5
    return state, E0, P, False


def _estimate_Q(expert, sys_learner, state, basis, opts: Alg1Options, seed):
    """Step 5: penalty weights from the integral HJB stack."""
    def expert_stack():
        return hjb.accumulate_expert(expert, state.R, state.W_V, opts.T, basis, opts.stride,
                                     opts.q_floor, opts.q_rule)

    def enhanced_stack():
        if sys_learner is None:
            raise NotInformativeError("expert stack is not informative and no learner system is available")
        peak = np.abs(expert.inputs).max(axis=0)
        u_p = hjb.make_enrichment(expert.m, peak, seed, opts.enrich_sines, opts.enrich_fmin,
                                  opts.enrich_fmax, opts.enrich_fraction)
        dur = opts.enrich_duration or float(expert.times[-1] - expert.times[0])
        traj = hjb.simulate_enriched(sys_learner, state.K, basis, u_p, expert.states[0],
                                     expert.dt, dur)
        return hjb.accumulate_enhanced(traj, state.K, state.R, state.W_V, u_p, opts.T, basis,
                                       opts.stride, opts.q_floor, opts.q_rule)

    if opts.q_source == "enhanced":
        stack = enhanced_stack()
    else:
        stack = expert_stack()
        if opts.q_source == "auto" and not hjb.informativity(stack, opts.q_sigma_tol).informative:
            log.info("expert stack not informative; switching to enriched learner data")
            stack = enhanced_stack()
    est = hjb.estimate_WQ(stack, opts.q_sigma_tol)
    return est, stack


def run_algorithm1(expert: Trajectory, init: CostSpec, sys_for_init: DynamicalSystem | None,
                   basis: BasisSet, wu_map: WuMap | None = None,
                   opts: Alg1Options | None = None, initial_pair=None) -> AlgResult:
    """Estimate ``(Q_l, R_l)`` from one expert trajectory.

    ``sys_for_init`` is the learner environment used only for the forward
    solve that initializes each attempt (and, if requested, the enriched
    rollout for the penalty fit).  ``initial_pair`` may supply a precomputed
    :class:`ValuePolicyPair` for the first attempt instead of solving.
    The gradient loop itself reads nothing but the expert record.
    """
    opts = opts or Alg1Options()
    t0 = time.perf_counter()
    m = expert.m
    eps_E = opts.eps_E if opts.eps_E is not None else 1e-4 * m
    wu_map = wu_map or build_wu_map(basis)
    ts = select_samples(expert, opts.sample_floor, opts.eval_size, derive_seed(opts.seed, 0))
    batch = _Batch(ts, basis)
    diag = Diagnostics(("k", "E", "normK", "normWV", "minEigR"))
    counters = {"forward_solves": 0, "learner_rollouts": 0}

    cost = init.validate(basis)
    best = None
    k_total = 0
    for attempt in range(opts.max_restarts + 1):
        if attempt == 0 and initial_pair is not None:
            pair = initial_pair
        else:
            if sys_for_init is None:
                raise ValueError("a learner system is required for the initial forward solve")
            fopts = replace(opts.forward, seed=derive_seed(opts.seed, 1, attempt))
            pair = integral_rl_solve(sys_for_init, cost, basis, fopts)
            counters["forward_solves"] += 1
        state = Alg1State(cost.R.copy(), pair.W_V.copy(), wu_map(pair.W_V),
                          np.atleast_2d(pair.K).copy())
        rng = np.random.default_rng(derive_seed(opts.seed, 2, attempt))
        sub = Diagnostics(diag.columns)
        state, status, E, iters = _sgd(state, batch, basis, wu_map, opts, eps_E, rng, sub)
        diag.rows.extend((r[0] + k_total,) + tuple(r[1:]) for r in sub.rows)
        k_total += iters
        converged = status == "converged"
        log.info("attempt %d: %s after %d iterations, E=%.3g", attempt, status, iters, E)
        try:
            est, stack = _estimate_Q(expert, sys_for_init, state, basis, opts,
                                     derive_seed(opts.seed, 3, attempt))
            if stack.source == "learner_enhanced":
                counters["learner_rollouts"] += 1
        except NotInformativeError:
            if attempt == opts.max_restarts and best is None:
                raise
            est = None
        psd = est is not None and bool(check_psd_Q(est.W_Q, basis))
        if psd:
            res = AlgResult(state, CostEstimate(est.W_Q, state.R, state.W_V, state.K), diag,
                            converged, attempt, E, k_total, stack, est.residual_rms, counters)
            if converged:
                best = res
                break
            if best is None or best.cost is None or E < best.final_E:
                best = res
            if opts.restart_from_estimate:
                cost = CostSpec(est.W_Q, state.R)
                continue
        else:
            log.info("attempt %d: recovered penalty is not PSD", attempt)
            if best is None:
                best = AlgResult(state, None, diag, False, attempt, E, k_total, None, None, counters)
        W_Q, R = random_restart_cost(basis, m, derive_seed(opts.seed, 4, attempt), init.W_Q)
        cost = CostSpec(W_Q, init.R.copy() if opts.fix_R else R)
    best.iterations = k_total
    best.restarts = attempt
    best.elapsed = time.perf_counter() - t0
    return best


__all__ = [
    "learner_input", "policy_error", "distance", "r_direction", "update_R", "value_products",
    "wv_direction", "update_WV", "propagate_K", "pd_guarded_step", "Alg1State", "Alg1Options",
    "AlgResult", "run_algorithm1",
]
