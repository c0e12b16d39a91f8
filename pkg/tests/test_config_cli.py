import json

import numpy as np
import pytest

from ctioc.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from ctioc.config import bundled_config, load_config, parse_config
from ctioc.errors import ConfigError

EX1_TEXT = bundled_config("example1").read_text()

BASES = """
[bases]
sigmaV = x1^2, x1*x2, x2^2
sigmaQ = x1^2, 2*x1*x2, x2^2
sigma_g = [1, 0; 0, 1; 0, cos(2*x1)]
sigma_u = x1, x2, x1*cos(2*x1), x2*cos(2*x3)
lo = -2, -2
hi = 2, 2
"""


@pytest.mark.parametrize("name", ["example1", "quadrotor", "linear2d"])
def test_bundled_configs_parse(name):
    cfg = load_config(bundled_config(name))
    assert cfg.seed == 0 and cfg.alg1.seed == 0
    assert cfg.init is not None and cfg.x0 is not None
    assert len(cfg.x0) == cfg.system.n


def test_example1_values():
    cfg = parse_config(EX1_TEXT)
    np.testing.assert_array_equal(cfg.expert_K, [[0, 2, 0, 1]])
    np.testing.assert_array_equal(cfg.init.W_Q, [0.5, 0, 1.5])
    assert cfg.alg1.alpha_V == 0.003 and cfg.alg1.fix_R and cfg.alg2.fix_R
    assert cfg.alg1.eps_E == 1e-6 and cfg.alg1.max_restarts == 5


def test_linear2d_noise_grid():
    cfg = load_config(bundled_config("linear2d"))
    np.testing.assert_allclose(cfg.grid, np.linspace(0, 0.1, 11))
    assert cfg.noise_pct == 0.03 and cfg.trials == 1


def test_quadrotor_block_penalty():
    cfg = load_config(bundled_config("quadrotor"))
    from ctioc.basis import quadratic_matrix
    Q = quadratic_matrix(cfg.expert_cost.W_Q, cfg.basis.sigma_Q)
    np.testing.assert_allclose(Q[:3, :3], 3 * np.eye(3))
    np.testing.assert_allclose(Q[:3, 3:], 0.2 * np.eye(3))
    np.testing.assert_allclose(Q[3:, 3:], np.eye(3))


def test_undefined_basis_symbol_reports_position(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text(EX1_TEXT + BASES)
    with pytest.raises(ConfigError) as info:
        load_config(p)
    err = info.value
    assert err.symbol == "x3"
    line = EX1_TEXT.count("\n") + BASES.splitlines().index(
        "sigma_u = x1, x2, x1*cos(2*x1), x2*cos(2*x3)") + 1
    assert err.line == line
    assert err.column == len("sigma_u = x1, x2, x1*cos(2*x1), x2*cos(2*") + 1
    assert f"{p}:{line}:{err.column}" in str(err) and "x3" in str(err)


def test_missing_seed_is_rejected():
    text = EX1_TEXT.replace("seed = 0\n", "")
    with pytest.raises(ConfigError, match="seed"):
        parse_config(text)


@pytest.mark.parametrize("edit, needle", [
    (("alpha_V = 0.003", "alpha_V = 0.003\nalpha_W = 1"), "alpha_W"),
    (("[run]", "[bogus]\n[run]"), "bogus"),
    (("name = example1", "name = pendulum"), "pendulum"),
    (("x0 = 2, 2", "x0 = 2, 2, 2"), "x0"),
    (("alpha_V = 0.003", "alpha_V = fast"), "alpha_V"),
    (("W_Q = 0.5, 0, 1.5\nR = 0.8", "W_Q = 0.5, 0, 1.5"), "no R"),
])
def test_bad_configs(edit, needle):
    text = EX1_TEXT.replace(*edit)
    assert text != EX1_TEXT
    with pytest.raises(ConfigError, match=needle) as info:
        parse_config(text)
    assert info.value.line is not None or info.value.symbol is not None


def test_seed_override():
    cfg = parse_config(EX1_TEXT).with_seed(42)
    assert cfg.seed == cfg.alg1.seed == cfg.alg2.seed == 42


def test_cli_alg2_and_verify(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["alg2", "--config", "example1", "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["algorithm"] == "alg2" and rep["policy_distance"] <= 0.01
    assert main(["verify", "--config", "example1", "--out", str(out)]) == EXIT_OK
    assert "max input deviation" in capsys.readouterr().out


def test_cli_simulate_and_forward(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", "linear2d", "--out", str(out)]) == EXIT_OK
    assert (out / "expert.csv").exists()
    assert main(["forward", "--config", "linear2d", "--out", str(out)]) == EXIT_OK
    K = json.loads((out / "forward.json").read_text())["K"]
    np.testing.assert_allclose(K, [[2.4877, 0.0429]], atol=2e-3)


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text(EX1_TEXT + BASES)
    assert main(["alg1", "--config", str(p)]) == EXIT_CONFIG
    assert "undefined symbol 'x3'" in capsys.readouterr().err
    assert main(["alg1", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    p = tmp_path / "num.cfg"
    p.write_text(EX1_TEXT.replace(
        "max_restarts = 5",
        "max_restarts = 0\nmax_iter = 10\nq_source = expert\nq_sigma_tol = 0.9"))
    assert main(["alg1", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "[alg1]" in capsys.readouterr().err
