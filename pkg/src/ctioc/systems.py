"""Benchmark systems, fixed-step RK4 simulation, and data corruption for robustness studies."""
from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .basis import BasisMatrix, BasisSet, BasisVector, quadratic_terms
from .errors import ConfigError, DataError, DivergenceError, NumericalError

DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class DynamicalSystem:
    """Input-affine system ``xdot = f(x) + g(x) u``.

    ``drift`` and ``input_map`` accept states of shape ``(..., n)`` and return
    ``(..., n)`` and ``(..., n, m)`` respectively.  ``W_g``/``sigma_g`` is the
    optional parametric form ``g(x)' = W_g sigma_g(x)``.
    """

    name: str
    n: int
    m: int
    drift: Callable
    input_map: Callable
    lo: np.ndarray
    hi: np.ndarray
    W_g: np.ndarray | None = None
    sigma_g: BasisMatrix | None = None
    params: dict = field(default_factory=dict)

    def f(self, x):
        return self.drift(np.asarray(x, dtype=float))

    def g(self, x):
        return self.input_map(np.asarray(x, dtype=float))

    def xdot(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.f(x) + np.einsum("...ij,...j->...i", self.g(x), u)

    def jacobian(self, x=None, h=1e-6):
        """Central-difference linearization ``(A, B)`` of the drift and input map at ``x``."""
        x = np.zeros(self.n) if x is None else np.asarray(x, dtype=float)
        A = np.empty((self.n, self.n))
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = h
            A[:, j] = (self.f(x + e) - self.f(x - e)) / (2 * h)
        return A, self.g(x)


def _example1_f(x):
    x1, x2 = x[..., 0], x[..., 1]
    c = np.cos(2 * x1) + 2
    return np.stack([-x1 + x2, -0.5 * x1 - 0.5 * x2 * (1 - c ** 2)], axis=-1)


def _example1_g(x):
    x1 = x[..., 0]
    col = np.stack([np.zeros_like(x1), np.cos(2 * x1) + 2], axis=-1)
    return col[..., None]


@dataclass(frozen=True)
class _LinearDrift:
    A: np.ndarray

    def __call__(self, x):
        return x @ self.A.T


@dataclass(frozen=True)
class _ConstantInputMap:
    G: np.ndarray

    def __call__(self, x):
        return np.broadcast_to(self.G, x.shape[:-1] + self.G.shape).copy()


@dataclass(frozen=True)
class _QuadrotorDrift:
    a: np.ndarray

    def __call__(self, x):
        p, q, r = x[..., 3], x[..., 4], x[..., 5]
        a = self.a
        return np.stack([p, q, r, a[0] * q * r, a[1] * p * r, a[2] * p * q], axis=-1)


@dataclass(frozen=True)
class _ScaledInputMap:
    base: Callable
    k: float

    def __call__(self, x):
        return self.k * self.base(x)


def _quadrotor(Ixx, Iyy, Izz):
    a = np.array([-(Iyy - Izz) / Ixx, -(Izz - Ixx) / Iyy, -(Ixx - Iyy) / Izz])
    G = np.zeros((6, 3))
    G[3:, :] = np.diag([1 / Ixx, 1 / Iyy, 1 / Izz])
    return _QuadrotorDrift(a), _ConstantInputMap(G), G


def make_linear_system(A, B, name="linear", lo=-1.0, hi=1.0) -> DynamicalSystem:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n, m = B.shape

    return DynamicalSystem(name, n, m, _LinearDrift(A), _ConstantInputMap(B), np.full(n, lo, dtype=float),
                           np.full(n, hi, dtype=float), W_g=B.T.copy(),
                           sigma_g=BasisMatrix.identity(n), params={"A": A, "B": B})


BUILTIN_SYSTEMS = ("example1", "quadrotor_rot", "linear2d")


def make_builtin_system(name: str, params: dict | None = None) -> DynamicalSystem:
    """One of the registered benchmark systems with its default parameters.

    ``params`` may override ``Ixx``/``Iyy``/``Izz`` for the quadrotor.
    """
    params = dict(params or {})
    if name == "example1":
        return DynamicalSystem(
            "example1", 2, 1, _example1_f, _example1_g, np.array([-2.0, -2.0]),
            np.array([2.0, 2.0]), W_g=np.array([[0.0, 2.0, 1.0]]),
            sigma_g=BasisMatrix.parse("[1, 0; 0, 1; 0, cos(2*x1)]", 2))
    if name == "quadrotor_rot":
        I = {"Ixx": 4.856e-3, "Iyy": 4.856e-3, "Izz": 8.801e-3}
        unknown = set(params) - set(I)
        if unknown:
            raise ConfigError(f"unknown quadrotor parameter(s): {', '.join(sorted(unknown))}")
        I.update({k: float(v) for k, v in params.items()})
        if min(I.values()) <= 0:
            raise ConfigError("moments of inertia must be positive")
        drift, input_map, G = _quadrotor(I["Ixx"], I["Iyy"], I["Izz"])
        return DynamicalSystem(
            "quadrotor_rot", 6, 3, drift, input_map, np.array([-2.0] * 3 + [-3.0] * 3),
            np.array([2.0] * 3 + [3.0] * 3), W_g=G.T.copy(),
            sigma_g=BasisMatrix.identity(6), params=I)
    if name == "linear2d":
        sys = make_linear_system(np.diag([1.0, -2.0]), [[1.0], [1.0]], name="linear2d")
        return sys
    raise ConfigError(f"unknown system {name!r}; expected one of {', '.join(BUILTIN_SYSTEMS)}",
                      symbol=name)


def builtin_basis(name: str) -> BasisSet:
    """The basis families used with each registered system."""
    if name == "example1":
        return BasisSet(
            sigma_V=BasisVector.parse("x1^2, x1*x2, x2^2", 2),
            sigma_Q=BasisVector.parse("x1^2, 2*x1*x2, x2^2", 2),
            sigma_g=BasisMatrix.parse("[1, 0; 0, 1; 0, cos(2*x1)]", 2),
            sigma_u=BasisVector.parse("x1, x2, x1*cos(2*x1), x2*cos(2*x1)", 2),
            lo=[-2, -2], hi=[2, 2])
    if name == "quadrotor_rot":
        v = "x1^2, x2^2, x3^2, x4^2, x5^2, x6^2, x1*x4, x2*x5, x3*x6"
        return BasisSet(
            sigma_V=BasisVector.parse(v, 6),
            sigma_Q=BasisVector.parse(quadratic_terms(6, doubled_cross=True), 6),
            sigma_g=BasisMatrix.identity(6),
            sigma_u=BasisVector.parse("x1, x2, x3, x4, x5, x6", 6),
            lo=[-2.0] * 3 + [-3.0] * 3, hi=[2.0] * 3 + [3.0] * 3)
    if name == "linear2d":
        return BasisSet(
            sigma_V=BasisVector.parse("x1^2, x1*x2, x2^2", 2),
            sigma_Q=BasisVector.parse("x1^2, 2*x1*x2, x2^2", 2),
            sigma_g=BasisMatrix.identity(2),
            sigma_u=BasisVector.parse("x1, x2", 2),
            lo=[-1, -1], hi=[1, 1])
    raise ConfigError(f"no builtin basis for system {name!r}", symbol=name)


def perturb_input_dynamics(sys: DynamicalSystem, scale: float) -> DynamicalSystem:
    """Copy of ``sys`` whose input map is ``(1 + scale) g``; drift unchanged."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    k = 1.0 + float(scale)
    input_map = _ScaledInputMap(sys.input_map, k)
    W_g = None if sys.W_g is None else k * sys.W_g
    return dataclasses.replace(sys, input_map=input_map, W_g=W_g,
                               params={**sys.params, "g_scale": k})


# --------------------------------------------------------------------------
# Control laws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GainLaw:
    """``u = -K sigma_u(x)``."""

    K: np.ndarray
    sigma_u: BasisVector

    def __call__(self, t, x):
        K = np.atleast_2d(self.K)
        return -(self.sigma_u(x) @ K.T)


@dataclass(frozen=True)
class FunctionLaw:
    fn: Callable

    def __call__(self, t, x):
        return np.asarray(self.fn(t, x), dtype=float)


@dataclass(frozen=True)
class SumLaw:
    """Base feedback plus an open-loop enrichment ``u = base(t, x) + extra(t)``."""

    base: Callable
    extra: Callable

    def __call__(self, t, x):
        return self.base(t, x) + self.extra(t)


@dataclass(frozen=True)
class SinusoidSignal:
    """``u_p,j(t) = sum_k a_jk sin(2 pi f_jk t + phi_jk)``.

    ``phases`` may carry leading batch dimensions (one set per rollout), in
    which case the signal value has shape ``batch + (m,)``.
    """

    amplitudes: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    seed: int | None = None

    def __call__(self, t):
        arg = 2 * np.pi * self.freqs * t + self.phases
        return np.sum(self.amplitudes * np.sin(arg), axis=-1)

    @property
    def bound(self):
        return np.sum(np.abs(self.amplitudes), axis=-1)

    @classmethod
    def random(cls, m, n_sines, fmin, fmax, amplitude, seed, batch=(), log_spaced=False):
        """Seeded multi-sine whose channel ``j`` is bounded by ``amplitude[j]``.

        Frequencies are spread over ``[fmin, fmax]`` (linearly or log-spaced)
        and jittered so that no two are commensurate; phases are uniform.
        """
        rng = np.random.default_rng(seed)
        amp = np.broadcast_to(np.asarray(amplitude, dtype=float), (m,))
        if log_spaced:
            base = np.geomspace(fmin, fmax, n_sines)
        else:
            base = np.linspace(fmin, fmax, n_sines)
        freqs = np.clip(base * (1 + 0.1 * rng.uniform(-1, 1, (m, n_sines))), fmin, fmax)
        amps = np.repeat(amp[:, None] / n_sines, n_sines, axis=1)
        phases = rng.uniform(0, 2 * np.pi, tuple(batch) + (m, n_sines))
        return cls(amps, freqs, phases, seed)


# --------------------------------------------------------------------------
# Trajectories and simulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    dt: float
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states.ndim != 2 or self.inputs.ndim != 2:
            raise DataError("states and inputs must be 2-D arrays")
        if len(self.states) != len(self.inputs) or len(self.states) != len(self.times):
            raise DataError("times, states and inputs need the same number of rows")
        if len(self.states) < 2:
            raise DataError("a trajectory needs at least two samples")

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def m(self):
        return self.inputs.shape[1]

    def __len__(self):
        return len(self.times)


def _check_sim_args(dt, duration):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duration < dt:
        raise ValueError("duration must be at least one step")
    return int(round(duration / dt))


def simulate_batch(sys: DynamicalSystem, law: Callable, X0, dt: float = 1e-3,
                   duration: float = 1.0, meta: dict | None = None) -> list[Trajectory]:
    """RK4-integrate several initial states at once under a vectorized law ``u(t, X)``.

    The law is re-evaluated at each RK4 stage.  Raises :class:`DivergenceError`
    (with the truncated trajectories attached) once any state exceeds the
    divergence bound.
    """
    steps = _check_sim_args(dt, duration)
    X = np.array(X0, dtype=float, ndmin=2)
    B = X.shape[0]
    N = steps + 1
    times = np.arange(N) * dt
    xs = np.empty((N, B, sys.n))
    us = np.empty((N, B, sys.m))

    def rhs(t, x):
        u = np.reshape(law(t, x), (B, sys.m))
        return sys.xdot(x, u), u

    def finish(k):
        return [Trajectory(dt, times[:k].copy(), xs[:k, b].copy(), us[:k, b].copy(),
                           dict(meta or {}, system=sys.name)) for b in range(B)]

    for k in range(N):
        t = times[k]
        xs[k] = X
        k1, u = rhs(t, X)
        us[k] = u
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(k1))):
            raise NumericalError(f"non-finite dynamics or input at t={t:.6g}")
        if k == N - 1:
            break
        k2, _ = rhs(t + dt / 2, X + dt / 2 * k1)
        k3, _ = rhs(t + dt / 2, X + dt / 2 * k2)
        k4, _ = rhs(t + dt, X + dt * k3)
        X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(X)) or np.abs(X).max() > DIVERGENCE_BOUND:
            trajs = finish(k + 1) if k + 1 >= 2 else None
            raise DivergenceError(
                f"state magnitude exceeded {DIVERGENCE_BOUND:g} at t={times[k + 1]:.6g} "
                "(closed loop unstable)", trajectory=trajs)
    return finish(N)


def simulate(sys: DynamicalSystem, law: Callable, x0, dt: float = 1e-3,
             duration: float = 1.0, meta: dict | None = None) -> Trajectory:
    """Single-rollout RK4 simulation; ``inputs[k]`` is the law evaluated at ``(t_k, x_k)``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (sys.n,):
        raise ValueError(f"x0 must have {sys.n} entries")

    def batch_law(t, X):
        return np.reshape(law(t, X[0]), (1, sys.m))

    try:
        return simulate_batch(sys, batch_law, x0[None], dt, duration, meta)[0]
    except DivergenceError as exc:
        exc.trajectory = exc.trajectory[0] if exc.trajectory else None
        raise


def add_measurement_noise(traj: Trajectory, pct: float, seed: int) -> Trajectory:
    """Multiplicative uniform noise ``s * (1 + pct * eta)``, ``eta ~ U[-1, 1]`` per scalar."""
    if not 0 <= pct <= 1:
        raise ValueError("pct must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    eta_x = rng.uniform(-1.0, 1.0, traj.states.shape)
    eta_u = rng.uniform(-1.0, 1.0, traj.inputs.shape)
    return dataclasses.replace(
        traj, states=traj.states * (1 + pct * eta_x), inputs=traj.inputs * (1 + pct * eta_u),
        meta={**traj.meta, "noise_pct": pct, "noise_seed": seed})


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def trajectory_to_csv(traj: Trajectory) -> str:
    header = ",".join(["t"] + [f"x{i + 1}" for i in range(traj.n)]
                      + [f"u{j + 1}" for j in range(traj.m)])
    buf = io.StringIO()
    data = np.column_stack([traj.times, traj.states, traj.inputs])
    np.savetxt(buf, data, delimiter=",", fmt="%.17g", header=header, comments="")
    return buf.getvalue()


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(trajectory_to_csv(traj))


def read_trajectory_csv(path, meta: dict | None = None) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0] != "t":
        raise DataError(f"{path}: first column must be 't'")
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("u"))
    if header != ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]:
        raise DataError(f"{path}: header must read t,x1..xn,u1..um")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = data[:, 0]
    dt = float(np.median(np.diff(times))) if len(times) > 1 else 0.0
    return Trajectory(dt, times, data[:, 1:1 + n], data[:, 1 + n:1 + n + m],
                      dict(meta or {}, source=str(path)))


__all__ = [
    "DynamicalSystem", "make_builtin_system", "make_linear_system", "builtin_basis",
    "perturb_input_dynamics", "GainLaw", "FunctionLaw", "SumLaw", "SinusoidSignal",
    "Trajectory", "simulate", "simulate_batch", "add_measurement_noise", "trajectory_to_csv",
    "write_trajectory_csv", "read_trajectory_csv", "BUILTIN_SYSTEMS", "DIVERGENCE_BOUND",
]
