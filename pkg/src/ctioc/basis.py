"""Basis function families, exact gradients, and the value-to-gain linear map.

Basis functions are written as small expression strings, e.g.::

    sigmaV  = x1^2, x1*x2, x2^2
    sigma_u = x1, x2, x1*cos(2*x1), x2*cos(2*x1)
    sigma_g = [1, 0; 0, 1; 0, cos(2*x1)]

Each entry is a sum of products of a numeric coefficient, powers ``xi^k`` and
trigonometric atoms ``cos(a*xi)`` / ``sin(a*xi)``.  Because the expressions
are kept in product form their gradients are evaluated exactly.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BasisError, BasisParseError


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Monomial:
    """``coef * prod_i x_i^p_i * prod_k trig_k(a_k * x_{j_k})``."""

    coef: float
    powers: tuple[int, ...]
    atoms: tuple[tuple[str, float, int], ...] = ()

    def _factors(self, x):
        out = []
        for i, p in enumerate(self.powers):
            if p == 0:
                continue
            xi = x[..., i]
            df = p * xi ** (p - 1) if p > 1 else np.ones_like(xi)
            out.append((i, xi ** p, df))
        for kind, a, j in self.atoms:
            xj = x[..., j]
            if kind == "cos":
                out.append((j, np.cos(a * xj), -a * np.sin(a * xj)))
            else:
                out.append((j, np.sin(a * xj), a * np.cos(a * xj)))
        return out

    def value(self, x):
        val = np.full(x.shape[:-1], self.coef, dtype=float)
        for _, f, _ in self._factors(x):
            val = val * f
        return val

    def gradient(self, x):
        n = x.shape[-1]
        grad = np.zeros(x.shape[:-1] + (n,))
        factors = self._factors(x)
        for k, (var, _, df) in enumerate(factors):
            term = self.coef * df
            for l, (_, f, _) in enumerate(factors):
                if l != k:
                    term = term * f
            grad[..., var] += term
        return grad

    @property
    def degree(self) -> int:
        return sum(self.powers)


@dataclass(frozen=True)
class Expression:
    """A sum of :class:`Monomial` terms; an empty sum is the zero function."""

    terms: tuple[Monomial, ...]
    n: int
    text: str = ""

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for t in self.terms:
            out = out + t.value(x)
        return out

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n,))
        for t in self.terms:
            out = out + t.gradient(x)
        return out

    def quadratic_part(self):
        """Return ``(i, j, coef)`` if this is a single pure quadratic monomial."""
        if len(self.terms) != 1:
            return None
        t = self.terms[0]
        if t.atoms or t.degree != 2:
            return None
        idx = [i for i, p in enumerate(t.powers) for _ in range(p)]
        return idx[0], idx[1], t.coef

    def __str__(self):
        return self.text or "0"


_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(.))")


def _tokenize(text):
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        num, name, op = m.groups()
        if num is not None:
            tokens.append(("num", float(num), m.start(1)))
        elif name is not None:
            tokens.append(("name", name, m.start(2)))
        elif op is not None and not op.isspace():
            tokens.append(("op", op, m.start(3)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text, n):
        self.text = text
        self.n = n
        self.toks = _tokenize(text)
        self.i = 0

    def _peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, len(self.text))

    def _take(self, kind=None, value=None):
        tok = self._peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise BasisParseError(f"expected {want!r} at column {tok[2] + 1} in {self.text!r}",
                                  column=tok[2] + 1)
        self.i += 1
        return tok

    def _var(self, name, col):
        m = re.fullmatch(r"x(\d+)", name)
        if m is None:
            raise BasisParseError(f"undefined symbol {name!r} in {self.text!r}", symbol=name,
                                  column=col + 1)
        idx = int(m.group(1))
        if not 1 <= idx <= self.n:
            raise BasisParseError(f"undefined symbol {name!r} (state has {self.n} components)",
                                  symbol=name, column=col + 1)
        return idx - 1

    def parse(self) -> Expression:
        terms = []
        sign = 1.0
        tok = self._peek()
        if tok[0] == "op" and tok[1] in "+-":
            sign = -1.0 if tok[1] == "-" else 1.0
            self.i += 1
        terms.append(self._product(sign))
        while True:
            tok = self._peek()
            if tok[0] == "op" and tok[1] in "+-":
                self.i += 1
                terms.append(self._product(-1.0 if tok[1] == "-" else 1.0))
            elif tok[0] is None:
                break
            else:
                raise BasisParseError(f"unexpected {tok[1]!r} at column {tok[2] + 1} in {self.text!r}",
                                      column=tok[2] + 1)
        terms = [t for t in terms if t.coef != 0.0]
        return Expression(tuple(_merge(terms)), self.n, self.text.strip())

    def _product(self, sign):
        coef = sign
        powers = [0] * self.n
        atoms = []
        while True:
            kind, val, col = self._peek()
            if kind == "num":
                self.i += 1
                coef *= val
            elif kind == "name" and val in ("cos", "sin"):
                self.i += 1
                self._take("op", "(")
                a = 1.0
                if self._peek()[0] == "op" and self._peek()[1] == "-":
                    self.i += 1
                    a = -1.0
                if self._peek()[0] == "num":
                    a *= self._take("num")[1]
                    self._take("op", "*")
                name, ncol = self._take("name")[1:]
                j = self._var(name, ncol)
                self._take("op", ")")
                p = self._power()
                atoms.extend([(val, a, j)] * p)
            elif kind == "name":
                self.i += 1
                j = self._var(val, col)
                powers[j] += self._power()
            else:
                raise BasisParseError(f"expected a factor at column {col + 1} in {self.text!r}",
                                      column=col + 1)
            tok = self._peek()
            if tok[0] == "op" and tok[1] == "*":
                self.i += 1
                continue
            return Monomial(coef, tuple(powers), tuple(sorted(atoms)))

    def _power(self):
        tok = self._peek()
        if tok[0] == "op" and tok[1] == "^":
            self.i += 1
            p = self._take("num")[1]
            if p != int(p) or p < 0:
                raise BasisParseError(f"non-integer exponent {p} in {self.text!r}")
            return int(p)
        return 1


def _merge(terms):
    merged: dict = {}
    for t in terms:
        key = (t.powers, t.atoms)
        merged[key] = merged.get(key, 0.0) + t.coef
    return [Monomial(c, k[0], k[1]) for k, c in merged.items() if c != 0.0]


def parse_expression(text: str, n: int) -> Expression:
    return _Parser(text, n).parse()


def _split_top(text, sep, base=0):
    """Top-level pieces of ``text`` as ``(offset, piece)``; offsets index into the full text."""
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text + sep):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if (ch == sep and depth == 0) or i == len(text):
            piece = text[start:i]
            lead = len(piece) - len(piece.lstrip())
            parts.append((base + start + lead, piece.strip()))
            start = i + 1
    return parts


def _parse_at(offset: int, text: str, n: int) -> Expression:
    """Parse one entry, shifting error columns to the enclosing definition."""
    try:
        return parse_expression(text, n)
    except BasisParseError as exc:
        if exc.column is not None:
            exc.column += offset
        raise


# --------------------------------------------------------------------------
# Families
# --------------------------------------------------------------------------

class BasisVector:
    """Vector-valued basis ``x -> (phi_1(x), ..., phi_L(x))``."""

    def __init__(self, exprs, n):
        self.exprs = tuple(exprs)
        self.n = n

    @classmethod
    def parse(cls, text: str, n: int) -> "BasisVector":
        items = [(o, s) for o, s in _split_top(text, ",") if s]
        if not items:
            raise BasisParseError(f"empty basis definition {text!r}")
        return cls([_parse_at(o, s, n) for o, s in items], n)

    def __len__(self):
        return len(self.exprs)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([e.value(x) for e in self.exprs], axis=-1)

    def jacobian(self, x):
        """Shape ``(..., L, n)``; row ``k`` is the gradient of entry ``k``."""
        x = np.asarray(x, dtype=float)
        return np.stack([e.gradient(x) for e in self.exprs], axis=-2)

    def quadratic_pairs(self):
        """``[(i, j, coef), ...]`` when every entry is a pure quadratic monomial, else None."""
        pairs = [e.quadratic_part() for e in self.exprs]
        return None if any(p is None for p in pairs) else pairs

    def __repr__(self):
        return "BasisVector(" + ", ".join(map(str, self.exprs)) + ")"


class BasisMatrix:
    """Matrix-valued basis of shape ``L x n`` (the input-map basis)."""

    def __init__(self, rows, n):
        self.rows = tuple(tuple(r) for r in rows)
        self.n = n
        if any(len(r) != n for r in self.rows):
            raise BasisParseError(f"every row of a matrix basis needs {n} entries")

    @classmethod
    def parse(cls, text: str, n: int) -> "BasisMatrix":
        body, base = text.rstrip(), 0
        if body.lstrip().startswith("[") and body.endswith("]"):
            base = body.index("[") + 1
            body = body[base:-1]
        rows = [(o, r) for o, r in _split_top(body, ";", base) if r]
        parsed = [[_parse_at(o, e, n) for o, e in _split_top(r, ",", ro)] for ro, r in rows]
        return cls(parsed, n)

    @classmethod
    def identity(cls, n: int) -> "BasisMatrix":
        rows = [[parse_expression("1" if i == j else "0", n) for j in range(n)] for i in range(n)]
        return cls(rows, n)

    def __len__(self):
        return len(self.rows)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([np.stack([e.value(x) for e in row], axis=-1) for row in self.rows],
                        axis=-2)


@dataclass
class BasisSet:
    """The four basis families plus the operating box they are sampled on."""

    sigma_V: BasisVector
    sigma_Q: BasisVector
    sigma_g: BasisMatrix
    sigma_u: BasisVector
    lo: np.ndarray
    hi: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        n = self.sigma_V.n
        for fam in (self.sigma_Q, self.sigma_g, self.sigma_u):
            if fam.n != n:
                raise BasisError("basis families disagree on the state dimension")
        if self.lo.shape != (n,) or self.hi.shape != (n,) or np.any(self.hi <= self.lo):
            raise BasisError("operating box must satisfy lo < hi componentwise")

    @property
    def n(self) -> int:
        return self.sigma_V.n

    @property
    def L_V(self):
        return len(self.sigma_V)

    @property
    def L_Q(self):
        return len(self.sigma_Q)

    @property
    def L_g(self):
        return len(self.sigma_g)

    @property
    def L_u(self):
        return len(self.sigma_u)

    def sample(self, count: int, seed: int, exclude_radius: float = 0.0) -> np.ndarray:
        """Uniform points in the operating box, optionally outside a ball at the origin."""
        rng = np.random.default_rng(seed)
        pts = rng.uniform(self.lo, self.hi, size=(count, self.n))
        if exclude_radius > 0:
            bad = np.linalg.norm(pts, axis=1) <= exclude_radius
            while np.any(bad):
                pts[bad] = rng.uniform(self.lo, self.hi, size=(int(bad.sum()), self.n))
                bad = np.linalg.norm(pts, axis=1) <= exclude_radius
        return pts

    def grid(self, per_dim: int = 21, max_points: int = 4096, seed: int = 0) -> np.ndarray:
        """Tensor grid over the box, or seeded random points when the grid is too large."""
        if per_dim ** self.n <= max_points:
            axes = [np.linspace(a, b, per_dim) for a, b in zip(self.lo, self.hi)]
            return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.n)
        return self.sample(max_points, seed)


FAMILIES = ("V", "gradV", "Q", "g", "u")


def eval_basis(basis: BasisSet, family: str, x) -> np.ndarray:
    """Evaluate ``sigma_family(x)``; ``family="gradV"`` gives the Jacobian of sigma_V."""
    if family == "V":
        out = basis.sigma_V(x)
    elif family == "gradV":
        out = basis.sigma_V.jacobian(x)
    elif family == "Q":
        out = basis.sigma_Q(x)
    elif family == "g":
        out = basis.sigma_g(x)
    elif family == "u":
        out = basis.sigma_u(x)
    else:
        raise ValueError(f"unknown basis family {family!r}; expected one of {FAMILIES}")
    if not np.all(np.isfinite(out)):
        raise BasisError(f"non-finite value of sigma_{family}")
    return out


def parse_basis_set(defs: dict[str, str], n: int, lo, hi) -> BasisSet:
    """Build a :class:`BasisSet` from the config-file strings.

    ``defs`` needs the keys ``sigmaV``, ``sigmaQ``, ``sigma_g`` and ``sigma_u``
    (underscores optional).
    """
    norm = {k.replace("_", "").lower(): v for k, v in defs.items()}
    missing = [k for k in ("sigmav", "sigmaq", "sigmag", "sigmau") if k not in norm]
    if missing:
        raise BasisParseError(f"missing basis definitions: {', '.join(missing)}")
    return BasisSet(
        sigma_V=BasisVector.parse(norm["sigmav"], n),
        sigma_Q=BasisVector.parse(norm["sigmaq"], n),
        sigma_g=BasisMatrix.parse(norm["sigmag"], n),
        sigma_u=BasisVector.parse(norm["sigmau"], n),
        lo=lo, hi=hi,
    )


def quadratic_terms(n: int, doubled_cross: bool = False) -> str:
    """All distinct quadratic monomials, row-major upper triangle."""
    out = []
    for i in range(n):
        for j in range(i, n):
            if i == j:
                out.append(f"x{i + 1}^2")
            else:
                out.append(f"{'2*' if doubled_cross else ''}x{i + 1}*x{j + 1}")
    return ", ".join(out)


def quadratic_basis(n: int, lo=-1.0, hi=1.0) -> BasisSet:
    """Bases for a linear system with quadratic value and penalty: sigma_g = I, sigma_u = x."""
    lin = ", ".join(f"x{i + 1}" for i in range(n))
    return BasisSet(
        sigma_V=BasisVector.parse(quadratic_terms(n), n),
        sigma_Q=BasisVector.parse(quadratic_terms(n, doubled_cross=True), n),
        sigma_g=BasisMatrix.identity(n),
        sigma_u=BasisVector.parse(lin, n),
        lo=np.full(n, lo), hi=np.full(n, hi),
    )


# --------------------------------------------------------------------------
# Quadratic forms
# --------------------------------------------------------------------------

def quadratic_matrix(weights, family: BasisVector) -> np.ndarray:
    """Symmetric ``P`` with ``weights . family(x) == x' P x`` for a purely quadratic family."""
    pairs = family.quadratic_pairs()
    if pairs is None:
        raise BasisError("family is not purely quadratic")
    P = np.zeros((family.n, family.n))
    for w, (i, j, c) in zip(np.asarray(weights, dtype=float), pairs):
        if i == j:
            P[i, i] += w * c
        else:
            P[i, j] += 0.5 * w * c
            P[j, i] += 0.5 * w * c
    return P


def weights_from_matrix(P, family: BasisVector) -> np.ndarray:
    """Weights reproducing ``x' P x`` on the quadratic monomials of ``family``.

    Entries of ``family`` that are not pure quadratic monomials get weight 0.
    When a monomial is repeated (or missing) the mapping is not exact.
    """
    P = np.asarray(P, dtype=float)
    w = np.zeros(len(family))
    seen = set()
    for k, e in enumerate(family.exprs):
        q = e.quadratic_part()
        if q is None:
            continue
        i, j, c = q
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        w[k] = (P[i, i] if i == j else P[i, j] + P[j, i]) / c
    return w


# --------------------------------------------------------------------------
# W_V -> W_u map
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WuMap:
    """Linear map with ``W_u[i, j] = sum_k A[i, j, k] * W_V[k]``."""

    A: np.ndarray

    def __call__(self, W_V) -> np.ndarray:
        return self.A @ np.asarray(W_V, dtype=float)


def _products(basis: BasisSet, X):
    # P[p, i, k] = sum_j sigma_g[i, j](x_p) * gradV[k, j](x_p)
    return np.einsum("pij,pkj->pik", basis.sigma_g(X), basis.sigma_V.jacobian(X))


def build_wu_map(basis: BasisSet, seed: int = 0, tol: float = 1e-10) -> WuMap:
    """Fit ``sigma_g grad(sigma_V)' e_k`` onto span(sigma_u) and verify the fit exactly.

    Raises :class:`BasisError` naming the worst-fitting component when sigma_u
    does not span the products.
    """
    L_u = basis.L_u
    n_fit = max(10 * L_u, 50)
    X = basis.sample(n_fit, seed)
    S = basis.sigma_u(X)
    if np.linalg.matrix_rank(S) < L_u:
        raise BasisError("sigma_u entries are not linearly independent on the operating box")
    P = _products(basis, X)                      # (p, L_g, L_V)
    rhs = P.reshape(n_fit, -1)
    coef, *_ = np.linalg.lstsq(S, rhs, rcond=None)  # (L_u, L_g*L_V)
    coef = coef.reshape(L_u, basis.L_g, basis.L_V)
    scale = max(1.0, float(np.abs(coef).max()))
    coef[np.abs(coef) < 1e-12 * scale] = 0.0
    A = np.transpose(coef, (1, 0, 2))            # (L_g, L_u, L_V)

    Xc = basis.sample(n_fit, seed + 7919)
    Pc = _products(basis, Xc)
    fit = np.einsum("pj,ijk->pik", basis.sigma_u(Xc), A)
    err = np.abs(Pc - fit)
    bound = tol * max(1.0, float(np.abs(Pc).max()))
    if err.max() > bound:
        _, i, k = np.unravel_index(np.argmax(err), err.shape)
        raise BasisError(
            f"sigma_u does not span sigma_g*grad(sigma_V)': component (row {i + 1} of sigma_g, "
            f"sigma_V entry {k + 1} = {basis.sigma_V.exprs[k]}) misfits by {err.max():.3g}")
    return WuMap(A)


def gain_from_value(W_V, R, W_g, wu_map: WuMap) -> np.ndarray:
    """``K = 0.5 R^-1 W_g W_u(W_V)``, the gain of the policy implied by a value function."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    return 0.5 * np.linalg.solve(R, np.atleast_2d(W_g) @ wu_map(W_V))


# --------------------------------------------------------------------------
# Positivity checks
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PositivityResult:
    ok: bool
    witness: np.ndarray | None = None

    def __bool__(self):
        return self.ok


def _witness_in_box(v, basis):
    # scale an eigenvector so that it sits inside the box
    v = np.asarray(v, dtype=float)
    span = np.minimum(np.abs(basis.lo), np.abs(basis.hi))
    span = np.where(span > 0, span, np.maximum(np.abs(basis.lo), np.abs(basis.hi)))
    with np.errstate(divide="ignore"):
        s = np.min(np.where(np.abs(v) > 0, span / np.abs(v), np.inf))
    return v * (0.5 * s if np.isfinite(s) else 1.0)


def _check_sign(weights, family, basis, samples, seed, strict, method, tol):
    weights = np.asarray(weights, dtype=float)
    origin = np.zeros(basis.n)
    v0 = float(family(origin) @ weights)
    if abs(v0) > 1e-12:
        return PositivityResult(False, origin)
    pairs = family.quadratic_pairs()
    if method == "eigen" or (method == "auto" and pairs is not None):
        P = quadratic_matrix(weights, family)
        lam, vec = np.linalg.eigh(P)
        scale = max(1.0, float(np.abs(lam).max()))
        bad = lam[0] <= tol * scale if strict else lam[0] < -tol * scale
        return PositivityResult(False, _witness_in_box(vec[:, 0], basis)) if bad else PositivityResult(True)
    key = (id(family), samples, seed)
    if key not in basis._cache:
        X = basis.sample(samples, seed, exclude_radius=1e-6)
        basis._cache[key] = (X, family(X))
    X, Phi = basis._cache[key]
    vals = Phi @ weights
    scale = max(1.0, float(np.abs(vals).max()))
    bad = vals <= 0.0 if strict else vals < -tol * scale
    if np.any(bad):
        return PositivityResult(False, X[int(np.argmax(bad))])
    return PositivityResult(True)


def positivity_test(basis: BasisSet, family: str = "V", samples: int = 2000, seed: int = 0):
    """Fast boolean form of :func:`check_pd_value` (``family="V"``) or
    :func:`check_psd_Q` (``family="Q"``), cached on the basis.

    Meant for inner loops that only need the verdict, not a witness.
    """
    key = ("test", family, samples, seed)
    if key in basis._cache:
        return basis._cache[key]
    fam = basis.sigma_V if family == "V" else basis.sigma_Q
    strict = family == "V"
    origin = fam(np.zeros(basis.n))
    pairs = fam.quadratic_pairs()
    if pairs is not None:
        n = basis.n
        T = np.stack([quadratic_matrix(np.eye(len(fam))[k], fam) for k in range(len(fam))])
        T = T.reshape(len(fam), n * n)

        def test(w):
            if abs(origin @ w) > 1e-12:
                return False
            lam = np.linalg.eigvalsh((w @ T).reshape(n, n))
            scale = max(1.0, abs(lam[0]), abs(lam[-1]))
            return bool(lam[0] > 0) if strict else bool(lam[0] >= -1e-12 * scale)
    else:
        X = basis.sample(samples, seed, exclude_radius=1e-6)
        Phi = fam(X)

        def test(w):
            if abs(origin @ w) > 1e-12:
                return False
            v = Phi @ w
            return bool(np.all(v > 0)) if strict else bool(np.all(v >= -1e-12 * max(1.0, np.abs(v).max())))
    basis._cache[key] = test
    return test


def check_pd_value(W_V, basis: BasisSet, samples: int = 2000, seed: int = 0,
                   method: str = "auto") -> PositivityResult:
    """Positive-definiteness of ``W_V . sigma_V`` on the operating box.

    ``method`` is ``"auto"`` (exact eigenvalue test for purely quadratic
    families, sampling otherwise), ``"eigen"`` or ``"sample"``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    return _check_sign(W_V, basis.sigma_V, basis, samples, seed, True, method, 0.0)


def check_psd_Q(W_Q, basis: BasisSet, samples: int = 2000, seed: int = 0,
                method: str = "auto", tol: float = 1e-12) -> PositivityResult:
    """Positive-semidefiniteness of ``W_Q . sigma_Q`` (same strategy as :func:`check_pd_value`)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    return _check_sign(W_Q, basis.sigma_Q, basis, samples, seed, False, method, tol)


__all__ = [
    "Monomial", "Expression", "parse_expression", "BasisVector", "BasisMatrix", "BasisSet",
    "eval_basis", "parse_basis_set", "quadratic_terms", "quadratic_basis", "quadratic_matrix",
    "weights_from_matrix", "WuMap", "build_wu_map", "gain_from_value", "PositivityResult",
    "check_pd_value", "check_psd_Q", "positivity_test",
]
