"""Finite-difference checks of the update directions, shared by unit and acceptance tests."""
import numpy as np

from ctioc.alg1 import r_direction, value_products, wv_direction
from ctioc.alg2 import _value_input_map, learner_input_known_g
from ctioc.basis import build_wu_map
from ctioc.systems import builtin_basis, make_builtin_system

SYSTEMS = ("example1", "quadrotor_rot", "linear2d")
_CACHE = {}


def setup(name):
    if name not in _CACHE:
        basis = builtin_basis(name)
        _CACHE[name] = (make_builtin_system(name), basis, build_wu_map(basis))
    return _CACHE[name]


def random_spd(m, rng):
    A = rng.normal(size=(m, m))
    return A @ A.T + 0.5 * np.eye(m)


def random_config(rng, name=None):
    name = name or SYSTEMS[rng.integers(len(SYSTEMS))]
    sys, basis, wu = setup(name)
    x = rng.uniform(basis.lo, basis.hi)
    R = random_spd(sys.m, rng)
    W_V = rng.normal(size=basis.L_V)
    u_e = rng.normal(size=sys.m)
    return sys, basis, wu, x, R, W_V, u_e


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _fd(fun, p, direction, h):
    return (fun(p + h * direction) - fun(p - h * direction)) / (2 * h)


def check_r_direction(sys, basis, wu, x, R, W_V, u_e, rng, h=1e-6):
    """Relative error of ``<dir, S>`` against ``-dE[S]`` along a random symmetric ``S``."""
    c = -0.5 * sys.W_g @ wu(W_V) @ basis.sigma_u(x)

    def E(Rm):
        e = np.linalg.solve(Rm, c) - u_e
        return e @ e

    u_l = np.linalg.solve(R, c)
    d = r_direction(R, u_l, u_l - u_e)
    S = rng.normal(size=R.shape)
    S = S + S.T
    return _rel(-np.sum(d * S), _fd(E, R, S, h))


def check_wv_direction(sys, basis, wu, x, R, W_V, u_e, h=1e-6):
    """Alg-1 direction against ``-1/2`` the finite-difference gradient, with a consistent gain."""
    def u(W):
        return -0.5 * np.linalg.solve(R, sys.W_g @ wu(W)) @ basis.sigma_u(x)

    def E(W):
        e = u(W) - u_e
        return e @ e

    W_u = wu(W_V)
    K = 0.5 * np.linalg.solve(R, sys.W_g @ W_u)
    d = wv_direction(value_products(basis, x), W_u, K, u(W_V) - u_e)
    g = np.array([_fd(E, W_V, e, h) for e in np.eye(len(W_V))])
    return _rel(d, -0.5 * g)


def check_known_g_direction(sys, basis, wu, x, R, W_V, u_e, h=1e-6):
    """Known-g direction against minus the finite-difference gradient."""
    def E(W):
        e = learner_input_known_g(R, W, sys, basis, x) - u_e
        return e @ e

    e = learner_input_known_g(R, W_V, sys, basis, x) - u_e
    d = _value_input_map(sys, basis, x) @ np.linalg.solve(R, e)
    g = np.array([_fd(E, W_V, v, h) for v in np.eye(len(W_V))])
    return _rel(d, -g)


def run_suite(count, seed=0):
    """Worst relative error of each direction over ``count`` random configurations."""
    rng = np.random.default_rng(seed)
    worst = {"R": 0.0, "W_V": 0.0, "W_V known g": 0.0}
    for _ in range(count):
        cfg = random_config(rng)
        worst["R"] = max(worst["R"], check_r_direction(*cfg, rng))
        worst["W_V"] = max(worst["W_V"], check_wv_direction(*cfg))
        worst["W_V known g"] = max(worst["W_V known g"], check_known_g_direction(*cfg))
    return worst
