"""Data-driven inverse optimal control for input-affine continuous-time systems."""
from . import errors
from .alg1 import Alg1Options, AlgResult, run_algorithm1
from .alg2 import Alg2Options, run_algorithm2
from .basis import BasisSet, build_wu_map, gain_from_value, parse_basis_set
from .config import ExperimentConfig, bundled_config, load_config, parse_config
from .experiment import RunReport, noise_study, run_experiment
from .forward import CostSpec, ForwardOptions, integral_rl_solve, policy_distance, solve_riccati
from .hjb import accumulate_enhanced, accumulate_expert, estimate_WQ, informativity
from .systems import (DynamicalSystem, GainLaw, Trajectory, add_measurement_noise,
                      builtin_basis, make_builtin_system, perturb_input_dynamics, simulate)

__version__ = "0.1.0"
