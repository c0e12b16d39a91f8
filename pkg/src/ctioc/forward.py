"""Forward optimal control: Riccati oracle and data-driven integral policy iteration.

Given a cost ``(Q, R)`` these routines produce a value-function weight
vector and a feedback gain.  They initialize the model-free estimator and
verify recovered costs through the policy they induce.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisSet, check_pd_value, check_psd_Q, quadratic_matrix
from .errors import (ConvergenceError, InsufficientExcitationError, NotStabilizableError,
                     NumericalError, PositivityError)
from .quadrature import window_starts, window_weights, windowed_integrals
from .systems import DynamicalSystem, SinusoidSignal, Trajectory, simulate_batch


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``W_Q . sigma_Q(x) + u' R u``."""

    W_Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W_Q", np.asarray(self.W_Q, dtype=float).reshape(-1))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))

    def validate(self, basis: BasisSet):
        R = self.R
        if R.shape[0] != R.shape[1] or not np.allclose(R, R.T, rtol=0, atol=1e-12):
            raise ValueError("R must be a symmetric matrix")
        if np.linalg.eigvalsh(R)[0] <= 0:
            raise PositivityError("R must be positive definite")
        if len(self.W_Q) != basis.L_Q:
            raise ValueError(f"W_Q needs {basis.L_Q} entries")
        if not check_psd_Q(self.W_Q, basis):
            raise PositivityError("state penalty Q is not positive semidefinite")
        return self

    def Q(self, basis: BasisSet, x):
        return basis.sigma_Q(x) @ self.W_Q


@dataclass(frozen=True)
class ValuePolicyPair:
    W_V: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int
    K0: np.ndarray | None = None


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    residual: float


def care_residual(A, B, Qbar, R, P) -> float:
    return float(np.abs(A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Qbar).max())


def _stabilizable(A, B, tol=1e-9):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=1e-8 * max(1.0, np.abs(M).max())) < n:
                return False
    return True


def solve_riccati(A, B, Qbar, R, tol: float = 1e-10, newton_steps: int = 4) -> RiccatiSolution:
    """Stabilizing solution of ``A'P + PA - P B R^-1 B' P + Qbar = 0``.

    The Schur-method solution from SciPy is polished with Newton-Kleinman
    steps until the residual is at or below ``tol`` (relative to the problem
    scale).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Qbar = np.atleast_2d(np.asarray(Qbar, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not _stabilizable(A, B):
        raise NotStabilizableError("(A, B) is not stabilizable")
    try:
        P = scipy.linalg.solve_continuous_are(A, B, Qbar, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Riccati solve failed: {exc}") from exc
    P = 0.5 * (P + P.T)
    scale = max(1.0, float(np.abs(Qbar).max()), float(np.abs(P).max() * np.abs(A).max()))
    res = care_residual(A, B, Qbar, R, P)
    for _ in range(newton_steps):
        if res <= tol * scale:
            break
        K = np.linalg.solve(R, B.T @ P)
        Acl = A - B @ K
        P_new = scipy.linalg.solve_continuous_lyapunov(Acl.T, -(Qbar + K.T @ R @ K))
        P_new = 0.5 * (P_new + P_new.T)
        res_new = care_residual(A, B, Qbar, R, P_new)
        if res_new >= res:
            break
        P, res = P_new, res_new
    K = np.linalg.solve(R, B.T @ P)
    if np.linalg.eigvals(A - B @ K).real.max() >= 0:
        raise NumericalError("Riccati gain does not stabilize the closed loop")
    return RiccatiSolution(P, K, res)


# --------------------------------------------------------------------------
# Integral policy iteration
# --------------------------------------------------------------------------

@dataclass
class ForwardOptions:
    """Settings of :func:`integral_rl_solve`.

    Learner data are collected from ``n_rollouts`` initial states drawn in
    ``x0_scale`` times the operating box, under the initial gain plus a
    multi-sine probe (``probe_sines`` tones in ``[probe_fmin, probe_fmax]`` Hz,
    bounded by ``probe_scale`` times the nominal input magnitude).
    """

    T: float = 0.03
    stride: float | None = None
    dt: float = 1e-3
    n_rollouts: int = 8
    duration: float = 4.0
    x0_scale: float = 0.25
    probe_sines: int = 8
    probe_fmin: float = 0.1
    probe_fmax: float = 10.0
    probe_scale: float = 0.2
    tol: float = 1e-9
    max_iter: int = 60
    seed: int = 0
    quadrature: str = "simpson"
    rank_rtol: float = 1e-10
    extra: dict = field(default_factory=dict)


def quadratic_approximation(cost: CostSpec, basis: BasisSet, h: float = 1e-4) -> np.ndarray:
    """``Qbar`` such that ``Q(x) ~ x' Qbar x`` near the origin (PSD-projected)."""
    if basis.sigma_Q.quadratic_pairs() is not None:
        Qbar = quadratic_matrix(cost.W_Q, basis.sigma_Q)
    else:
        n = basis.n
        H = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            gp = basis.sigma_Q.jacobian(e).T @ cost.W_Q
            gm = basis.sigma_Q.jacobian(-e).T @ cost.W_Q
            H[:, i] = (gp - gm) / (2 * h)
        Qbar = 0.25 * (H + H.T)
    lam, V = np.linalg.eigh(0.5 * (Qbar + Qbar.T))
    return (V * np.clip(lam, 0, None)) @ V.T


def fit_linear_gain(K_lin, basis: BasisSet, seed: int = 0) -> np.ndarray:
    """Gain ``K`` with ``K sigma_u(x) ~ K_lin x``, fitted on the operating box."""
    X = basis.sample(max(20 * basis.L_u, 200), seed)
    S = basis.sigma_u(X)
    coef, *_ = np.linalg.lstsq(S, X @ np.atleast_2d(K_lin).T, rcond=None)
    K = coef.T
    K[np.abs(K) < 1e-12 * max(1.0, np.abs(K).max())] = 0.0
    return K


def linearized_gain(sys: DynamicalSystem, cost: CostSpec, basis: BasisSet) -> np.ndarray:
    """Initial stabilizing gain: LQR on the Jacobian linearization at the origin."""
    A, B = sys.jacobian()
    sol = solve_riccati(A, B, quadratic_approximation(cost, basis), cost.R)
    return fit_linear_gain(sol.K, basis)


def collect_learner_data(sys: DynamicalSystem, K0, basis: BasisSet,
                         opts: ForwardOptions) -> list[Trajectory]:
    """Roll out ``u = -K0 sigma_u(x) + u_p(t)`` from seeded initial states."""
    K0 = np.atleast_2d(K0)
    seq = np.random.SeedSequence(opts.seed)
    s_x0, s_probe, s_scale = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    rng = np.random.default_rng(s_x0)
    X0 = rng.uniform(basis.lo, basis.hi, size=(opts.n_rollouts, sys.n)) * opts.x0_scale
    nominal = np.abs(basis.sigma_u(basis.sample(500, s_scale) * opts.x0_scale) @ K0.T).max(axis=0)
    nominal = np.where(nominal > 0, nominal, 1.0)
    probe = SinusoidSignal.random(sys.m, opts.probe_sines, opts.probe_fmin, opts.probe_fmax,
                                  opts.probe_scale * nominal, s_probe, batch=(opts.n_rollouts,))

    def law(t, X):
        return -(basis.sigma_u(X) @ K0.T) + probe(t)

    return simulate_batch(sys, law, X0, opts.dt, opts.duration, meta={"role": "learner"})


@dataclass
class _BellmanData:
    dV: np.ndarray      # (w, L_V)   sigma_V(start) - sigma_V(end)
    iQ: np.ndarray      # (w,)
    iSS: np.ndarray     # (w, L_u, L_u)
    iUS: np.ndarray     # (w, m, L_u)


def _bellman_data(trajs, cost, basis, T, stride, rule) -> _BellmanData:
    parts = []
    for tr in trajs:
        width = int(round(T / tr.dt))
        step = int(round((stride or T) / tr.dt))
        if width < 2:
            raise ValueError("window T must span at least two samples")
        starts = window_starts(len(tr), width, step)
        if len(starts) == 0:
            continue
        w = window_weights(width, tr.dt, rule)
        sV = basis.sigma_V(tr.states)
        S = basis.sigma_u(tr.states)
        q = cost.Q(basis, tr.states)
        SS = S[:, :, None] * S[:, None, :]
        US = tr.inputs[:, :, None] * S[:, None, :]
        parts.append(_BellmanData(
            sV[starts] - sV[starts + width], windowed_integrals(q, starts, width, w),
            windowed_integrals(SS, starts, width, w), windowed_integrals(US, starts, width, w)))
    if not parts:
        raise InsufficientExcitationError("learner data too short for a single Bellman window")
    return _BellmanData(*(np.concatenate([getattr(p, f) for p in parts])
                          for f in ("dV", "iQ", "iSS", "iUS")))


def _bellman_system(data: _BellmanData, K_i, R):
    cross = np.einsum("ab,wbj->waj", R, data.iUS + np.einsum("bk,wkj->wbj", K_i, data.iSS))
    Phi = np.hstack([data.dV, 2.0 * cross.reshape(len(cross), -1)])
    rhs = data.iQ + np.einsum("kj,wkj->w", K_i.T @ R @ K_i, data.iSS)
    return Phi, rhs


def _solve_columns(Phi, rhs, rank_rtol):
    norms = np.linalg.norm(Phi, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    A = Phi / norms
    theta, _, rank, sv = np.linalg.lstsq(A, rhs, rcond=None)
    if sv[-1] <= rank_rtol * sv[0] or rank < Phi.shape[1]:
        raise InsufficientExcitationError(
            f"Bellman regression is rank deficient (sigma_min/sigma_max = {sv[-1] / sv[0]:.3g}); "
            "increase probing or rollouts")
    return theta / norms


def integral_rl_solve(source, cost: CostSpec, basis: BasisSet, opts: ForwardOptions | None = None,
                      K0=None) -> ValuePolicyPair:
    """Off-policy integral policy iteration.

    Parameters
    ----------
    source : DynamicalSystem or list of Trajectory
        Either the learner environment (data are collected with
        :func:`collect_learner_data`) or a recorded batch of learner
        rollouts with their applied inputs.
    cost : CostSpec
    basis : BasisSet
    opts : ForwardOptions, optional
    K0 : array, optional
        Initial stabilizing gain over ``sigma_u``; required for recorded
        batches, otherwise computed by :func:`linearized_gain`.

    Each iteration solves, jointly for ``W_V`` and ``K_next``, the least
    squares problem ``V(x(t-T)) - V(x(t)) = int [Q + u_i'R u_i + 2 u_next' R (u - u_i)]``
    with ``u_i = -K_i sigma_u(x)``.
    """
    opts = opts or ForwardOptions()
    cost = cost.validate(basis)
    if isinstance(source, DynamicalSystem):
        if K0 is None:
            K0 = linearized_gain(source, cost, basis)
        trajs = collect_learner_data(source, K0, basis, opts)
    else:
        if K0 is None:
            raise ValueError("an initial stabilizing gain K0 is needed for recorded data")
        trajs = list(source)
    K0 = np.atleast_2d(np.asarray(K0, dtype=float))
    m, L_V = cost.R.shape[0], basis.L_V
    data = _bellman_data(trajs, cost, basis, opts.T, opts.stride, opts.quadrature)

    K = K0
    for it in range(1, opts.max_iter + 1):
        Phi, rhs = _bellman_system(data, K, cost.R)
        theta = _solve_columns(Phi, rhs, opts.rank_rtol)
        W_V, K_next = theta[:L_V], theta[L_V:].reshape(m, basis.L_u)
        step = np.abs(K_next - K).max()
        K = K_next
        if step <= opts.tol * max(1.0, np.abs(K).max()):
            break
    else:
        raise ConvergenceError(f"policy iteration did not converge in {opts.max_iter} iterations")
    residual = float(np.sqrt(np.mean((Phi @ theta - rhs) ** 2)))
    if not check_pd_value(W_V, basis):
        raise PositivityError("forward solve produced a value function that is not positive definite")
    return ValuePolicyPair(W_V, K, residual, it, K0)


def bellman_residual(pair: ValuePolicyPair, trajs, cost: CostSpec, basis: BasisSet,
                     opts: ForwardOptions | None = None) -> float:
    """RMS integral Bellman residual of a converged pair on (possibly held-out) data."""
    opts = opts or ForwardOptions()
    data = _bellman_data(trajs, cost, basis, opts.T, opts.stride, opts.quadrature)
    Phi, rhs = _bellman_system(data, pair.K, cost.R)
    theta = np.concatenate([pair.W_V, pair.K.reshape(-1)])
    return float(np.sqrt(np.mean((Phi @ theta - rhs) ** 2)))


@dataclass(frozen=True)
class PolicyDistance:
    max_deviation: float
    normalized_gain_error: float


def policy_distance(K_a, K_b, basis: BasisSet, grid=None) -> PolicyDistance:
    """Largest input difference over ``grid`` and ``||K_a - K_b||_F / ||K_b||_F``."""
    K_a = np.atleast_2d(np.asarray(K_a, dtype=float))
    K_b = np.atleast_2d(np.asarray(K_b, dtype=float))
    grid = basis.grid() if grid is None else np.atleast_2d(grid)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    dev = float(np.abs(basis.sigma_u(grid) @ (K_a - K_b).T).max())
    diff = np.linalg.norm(K_a - K_b)
    ref = np.linalg.norm(K_b)
    norm_err = float(diff / ref) if ref > 0 else (0.0 if diff == 0 else float("inf"))
    return PolicyDistance(dev, norm_err)


__all__ = [
    "CostSpec", "ValuePolicyPair", "RiccatiSolution", "solve_riccati", "care_residual",
    "ForwardOptions", "quadratic_approximation", "fit_linear_gain", "linearized_gain",
    "collect_learner_data", "integral_rl_solve", "bellman_residual", "PolicyDistance",
    "policy_distance",
]
