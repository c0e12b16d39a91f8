import numpy as np
import pytest

from ctioc.basis import weights_from_matrix
from ctioc.forward import CostSpec, integral_rl_solve
from ctioc.systems import GainLaw, builtin_basis, make_builtin_system, simulate

K_EXAMPLE1 = np.array([[0.0, 2.0, 0.0, 1.0]])
QUAD_X0 = [1.5, 1.7, 1.8, 0.0, 0.0, 0.0]


def quadrotor_cost(basis):
    I3 = np.eye(3)
    Qbar = np.block([[3 * I3, 0.2 * I3], [0.2 * I3, I3]])
    return CostSpec(weights_from_matrix(Qbar, basis.sigma_Q), np.eye(3))


@pytest.fixture(scope="session")
def ex1():
    sys = make_builtin_system("example1")
    basis = builtin_basis("example1")
    traj = simulate(sys, GainLaw(K_EXAMPLE1, basis.sigma_u), [2.0, 2.0], 1e-3, 10.0)
    return sys, basis, traj


@pytest.fixture(scope="session")
def quad():
    sys = make_builtin_system("quadrotor_rot")
    basis = builtin_basis("quadrotor_rot")
    K_e = integral_rl_solve(sys, quadrotor_cost(basis), basis).K
    traj = simulate(sys, GainLaw(K_e, basis.sigma_u), QUAD_X0, 1e-3, 10.0)
    return sys, basis, K_e, traj


# One line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
