"""Experiment configuration files.

Line-oriented ``key = value`` entries under ``[section]`` headers::

    [run]        seed (required), out, algorithm = alg1 | alg2
    [system]     name, Ixx/Iyy/Izz, x0, dt, duration, expert_csv
    [expert]     W_Q or Qbar, R, optional K
    [init]       W_Q or Qbar, R, optional W_V
    [bases]      builtin = <system>, or sigmaV/sigmaQ/sigma_g/sigma_u plus lo/hi
    [algorithm]  step sizes, stopping rule, floors, penalty-fit settings
    [forward]    exploration settings of the forward solver
    [noise]      pct, g_uncertainty, grid, trials

Every error carries the line and column of the offending entry.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .alg1 import Alg1Options
from .alg2 import Alg2Options
from .basis import BasisMatrix, BasisSet, BasisVector, parse_basis_set, weights_from_matrix
from .errors import BasisError, ConfigError
from .forward import CostSpec, ForwardOptions
from .systems import BUILTIN_SYSTEMS, DynamicalSystem, builtin_basis, make_builtin_system

SECTIONS = ("run", "system", "expert", "init", "bases", "algorithm", "forward", "noise")
SYSTEM_KEYS = {"name", "x0", "dt", "duration", "expert_csv", "Ixx", "Iyy", "Izz"}
COST_KEYS = {"W_Q", "Qbar", "R", "K", "W_V"}
BASIS_KEYS = {"builtin", "sigmaV", "sigmaQ", "sigma_g", "sigma_u", "lo", "hi"}
NOISE_KEYS = {"pct", "g_uncertainty", "grid", "trials"}
RUN_KEYS = {"seed", "out", "algorithm"}
_ALG1_ONLY = {"batch_mode", "plateau_window", "plateau_tol", "restart_from_estimate", "q_source",
              "enrich_sines", "enrich_fmin", "enrich_fmax", "enrich_fraction", "enrich_duration"}


@dataclass
class ExperimentConfig:
    system_name: str
    system: DynamicalSystem
    basis: BasisSet
    x0: np.ndarray
    dt: float
    duration: float
    expert_cost: CostSpec | None
    expert_K: np.ndarray | None
    init: CostSpec | None
    init_W_V: np.ndarray | None
    init_R: np.ndarray | None
    algorithm: str
    alg1: Alg1Options
    alg2: Alg2Options
    noise_pct: float = 0.0
    g_uncertainty: float = 0.0
    grid: list = field(default_factory=lambda: [0.0])
    trials: int = 1
    seed: int = 0
    out: Path | None = None
    expert_csv: Path | None = None
    source: Path | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), alg1=replace(self.alg1, seed=int(seed)),
                       alg2=replace(self.alg2, seed=int(seed)))


def _positions(text: str) -> dict:
    """``(section, key) -> (line, value column)`` for every entry, 1-based."""
    pos, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            pos[(section, None)] = (lineno, m.start(1) + 1)
            continue
        m = re.match(r"(\s*)([^=:\s][^=:]*?)\s*[=:]\s*", line)
        if m and section is not None:
            pos[(section, m.group(2))] = (lineno, m.end() + 1)
    return pos


class _Reader:
    def __init__(self, cp, pos, path):
        self.cp, self.pos, self.path = cp, pos, path

    def where(self, section, key=None):
        return self.pos.get((section, key), self.pos.get((section, None), (None, None)))

    def fail(self, section, key, msg, offset=0, symbol=None):
        line, col = self.where(section, key)
        if col is not None and key is not None:
            col += offset
        loc = f"{self.path or '<config>'}:{line}:{col}: " if line else ""
        raise ConfigError(f"{loc}{msg}", line=line, column=col, symbol=symbol)

    def has(self, section, key):
        return self.cp.has_option(section, key)

    def raw(self, section, key, default=None, required=False):
        if self.cp.has_option(section, key):
            return self.cp.get(section, key).strip()
        if required:
            line, _ = self.where(section)
            loc = f"{self.path or '<config>'}:{line}: " if line else ""
            raise ConfigError(f"{loc}missing required key {key!r} in [{section}]", line=line,
                              symbol=key)
        return default

    def number(self, section, key, default=None, kind=float, required=False):
        v = self.raw(section, key, required=required)
        if v is None:
            return default
        try:
            return kind(v)
        except ValueError:
            self.fail(section, key, f"{key} must be a {kind.__name__}, got {v!r}")

    def boolean(self, section, key, default=None):
        if not self.has(section, key):
            return default
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            self.fail(section, key, f"{key} must be true or false")

    def vector(self, section, key, default=None):
        v = self.raw(section, key)
        if v is None:
            return default
        try:
            return np.array([float(t) for t in v.replace(";", ",").split(",") if t.strip()])
        except ValueError:
            self.fail(section, key, f"{key} must be a comma-separated list of numbers")

    def matrix(self, section, key, default=None):
        """``2``, ``[1, 0; 0, 1]`` or ``diag(0.8, 0.5, 0.7)``."""
        v = self.raw(section, key)
        if v is None:
            return default
        try:
            m = re.fullmatch(r"diag\s*\((.*)\)", v)
            if m:
                return np.diag([float(t) for t in m.group(1).split(",")])
            if v.startswith("["):
                if not v.endswith("]"):
                    raise ValueError
                rows = [[float(t) for t in r.split(",")] for r in v[1:-1].split(";")]
                if len({len(r) for r in rows}) != 1:
                    raise ValueError
                return np.array(rows)
            return np.array([[float(v)]])
        except ValueError:
            self.fail(section, key, f"{key} must be a number, [a, b; c, d] or diag(...)")


def _read_cost(rd: _Reader, section, basis, required):
    if not rd.cp.has_section(section):
        if required:
            raise ConfigError(f"missing section [{section}]", symbol=section)
        return None, None, None
    for key in rd.cp.options(section):
        if key not in COST_KEYS:
            rd.fail(section, key, f"unknown key {key!r} in [{section}]", symbol=key)
    R = rd.matrix(section, "R")
    W_Q = rd.vector(section, "W_Q")
    if W_Q is None and rd.has(section, "Qbar"):
        Qbar = rd.matrix(section, "Qbar")
        if Qbar.shape != (basis.n, basis.n):
            rd.fail(section, "Qbar", f"Qbar must be {basis.n}x{basis.n}")
        try:
            W_Q = weights_from_matrix(Qbar, basis.sigma_Q)
        except BasisError as exc:
            rd.fail(section, "Qbar", str(exc))
    if W_Q is not None and len(W_Q) != basis.L_Q:
        rd.fail(section, "W_Q", f"W_Q needs {basis.L_Q} entries, got {len(W_Q)}")
    extra = {"K": rd.matrix(section, "K"), "W_V": rd.vector(section, "W_V")}
    if extra["W_V"] is not None and len(extra["W_V"]) != basis.L_V:
        rd.fail(section, "W_V", f"W_V needs {basis.L_V} entries")
    cost = None
    if W_Q is not None:
        if R is None:
            rd.fail(section, None, f"[{section}] gives a penalty but no R")
        cost = CostSpec(W_Q, R)
    return cost, R, extra


def _read_bases(rd: _Reader, system_name, n):
    sec = "bases"
    if not rd.cp.has_section(sec):
        return builtin_basis(system_name)
    for key in rd.cp.options(sec):
        if key not in BASIS_KEYS:
            rd.fail(sec, key, f"unknown key {key!r} in [bases]", symbol=key)
    if rd.has(sec, "builtin"):
        name = rd.raw(sec, "builtin")
        if name not in BUILTIN_SYSTEMS:
            rd.fail(sec, "builtin", f"no builtin basis named {name!r}", symbol=name)
        return builtin_basis(name)
    defs = {}
    for key in ("sigmaV", "sigmaQ", "sigma_g", "sigma_u"):
        text = rd.raw(sec, key, required=True)
        try:
            (BasisMatrix if key == "sigma_g" else BasisVector).parse(text, n)
        except ConfigError as exc:
            rd.fail(sec, key, str(exc), offset=(exc.column or 1) - 1, symbol=exc.symbol)
        defs[key] = text
    lo = rd.vector(sec, "lo", np.full(n, -1.0))
    hi = rd.vector(sec, "hi", np.full(n, 1.0))
    try:
        return parse_basis_set(defs, n, lo, hi)
    except (ConfigError, BasisError) as exc:
        rd.fail(sec, None, str(exc))


def _read_options(rd: _Reader, cls, sec, base, skip=()):
    kinds = {f.name: f for f in fields(cls)}
    kw = {}
    if not rd.cp.has_section(sec):
        return base
    for key in rd.cp.options(sec):
        if key in skip:
            continue
        if key not in kinds or key == "forward":
            rd.fail(sec, key, f"unknown key {key!r} in [{sec}]", symbol=key)
        default = getattr(base, key)
        if isinstance(default, bool):
            kw[key] = rd.boolean(sec, key)
        elif isinstance(default, int):
            kw[key] = rd.number(sec, key, kind=int)
        elif isinstance(default, float) or (default is None and key != "q_source"):
            v = rd.raw(sec, key)
            kw[key] = None if v.lower() == "none" else rd.number(sec, key)
        else:
            kw[key] = rd.raw(sec, key)
    try:
        return replace(base, **kw)
    except ValueError as exc:
        rd.fail(sec, None, str(exc))


def parse_config(text: str, path=None) -> ExperimentConfig:
    """Parse the text of a config file; every problem raises :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(f"{path or '<config>'}:{line}: {exc.message.splitlines()[0]}",
                          line=line, column=1) from None
    rd = _Reader(cp, _positions(text), path)
    for sec in cp.sections():
        if sec not in SECTIONS:
            rd.fail(sec, None, f"unknown section [{sec}]", symbol=sec)
    for sec, allowed in (("run", RUN_KEYS), ("system", SYSTEM_KEYS), ("noise", NOISE_KEYS)):
        if cp.has_section(sec):
            for key in cp.options(sec):
                if key not in allowed:
                    rd.fail(sec, key, f"unknown key {key!r} in [{sec}]", symbol=key)

    seed = rd.number("run", "seed", kind=int, required=True)
    algorithm = rd.raw("run", "algorithm", "alg1")
    if algorithm not in ("alg1", "alg2"):
        rd.fail("run", "algorithm", f"algorithm must be alg1 or alg2, got {algorithm!r}")
    out = rd.raw("run", "out")

    name = rd.raw("system", "name", required=True)
    if name not in BUILTIN_SYSTEMS:
        rd.fail("system", "name", f"unknown system {name!r}", symbol=name)
    params = {k: rd.number("system", k) for k in ("Ixx", "Iyy", "Izz") if rd.has("system", k)}
    if params and name != "quadrotor_rot":
        rd.fail("system", next(iter(params)), "inertias apply only to quadrotor_rot")
    try:
        system = make_builtin_system(name, params)
    except ConfigError as exc:
        rd.fail("system", None, str(exc))
    x0 = rd.vector("system", "x0")
    expert_csv = rd.raw("system", "expert_csv")
    if x0 is None and expert_csv is None:
        rd.fail("system", None, "[system] needs x0 (or expert_csv)")
    if x0 is not None and len(x0) != system.n:
        rd.fail("system", "x0", f"x0 needs {system.n} entries")
    dt = rd.number("system", "dt", 1e-3)
    duration = rd.number("system", "duration", 10.0)
    if dt <= 0 or duration < dt:
        rd.fail("system", "dt", "need dt > 0 and duration >= dt")

    basis = _read_bases(rd, name, system.n)
    expert_cost, _, ex = _read_cost(rd, "expert", basis, required=False)
    expert_K = ex["K"] if ex else None
    if expert_cost is None and expert_K is None:
        raise ConfigError("[expert] needs a cost (W_Q or Qbar, and R) or a gain K", symbol="expert")
    init, init_R, ix = _read_cost(rd, "init", basis, required=False)
    init_W_V = ix["W_V"] if ix else None

    fwd = _read_options(rd, ForwardOptions, "forward", Alg1Options().forward)
    a1 = _read_options(rd, Alg1Options, "algorithm", Alg1Options(seed=seed, forward=fwd))
    a2_base = Alg2Options(seed=seed)
    a2 = _read_options(rd, Alg2Options, "algorithm", a2_base, skip=_ALG1_ONLY)
    if algorithm == "alg1" and init is None:
        rd.fail("init", None, "alg1 needs an [init] cost (W_Q or Qbar, and R)")

    grid = rd.vector("noise", "grid", np.array([0.0]))
    if np.any(grid < 0):
        rd.fail("noise", "grid", "uncertainty levels must be >= 0")
    trials = rd.number("noise", "trials", 1, kind=int)
    if trials < 1:
        rd.fail("noise", "trials", "trials must be >= 1")
    pct = rd.number("noise", "pct", 0.0)
    if not 0 <= pct <= 1:
        rd.fail("noise", "pct", "pct must lie in [0, 1]")
    g_unc = rd.number("noise", "g_uncertainty", 0.0)
    if g_unc < 0:
        rd.fail("noise", "g_uncertainty", "g_uncertainty must be >= 0")
    base_dir = Path(path).parent if path else Path(".")
    return ExperimentConfig(
        system_name=name, system=system, basis=basis, x0=x0, dt=dt, duration=duration,
        expert_cost=expert_cost, expert_K=expert_K, init=init, init_W_V=init_W_V,
        init_R=init_R, algorithm=algorithm, alg1=a1, alg2=a2, noise_pct=pct,
        g_uncertainty=g_unc, grid=[float(g) for g in grid], trials=trials, seed=seed,
        out=Path(out) if out else None,
        expert_csv=(base_dir / expert_csv) if expert_csv else None,
        source=Path(path) if path else None)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``example1``, ``quadrotor``, ``linear2d``)."""
    p = Path(__file__).parent / "configs" / f"{name}.cfg"
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}", symbol=name)
    return p


__all__ = ["ExperimentConfig", "parse_config", "load_config", "bundled_config"]
