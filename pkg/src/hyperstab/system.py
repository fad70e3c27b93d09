"""Hyperbolic problem specifications.

A :class:`SystemSpec` describes

    u_t + a(x, t) u_x + b(x, t) u = 0,   0 < x < 1,

with ``a = diag(a_1..a_n)``, components ``1..m`` moving right and ``m+1..n``
moving left, closed by the reflection boundary conditions

    u_j(0, t) = sum_{k<=m} p_jk u_k(1, t) + sum_{k>m} p_jk u_k(0, t),   j <= m
    u_j(1, t) = (same right-hand side),                                 j >  m

Indices are 0-based in code: component ``j`` moves right iff ``j < m``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .expr import BinOp, Expr, ExprError, Num, evaluate, parse, to_string

__all__ = [
    "Table", "SumCoefficient", "as_coefficient", "coefficient_to_config", "is_zero",
    "SystemSpec", "SpecError", "ValidationReport", "LevyReport",
    "validate", "check_levy", "perturb", "builtin", "BUILTINS", "list_builtins",
]


class SpecError(ValueError):
    """Malformed system specification."""


# ------------------------------------------------------------ coefficients


class Table:
    """Grid-sampled coefficient, linearly interpolated.

    ``values`` has shape ``(len(xs),)`` for a time-independent table or
    ``(len(ts), len(xs))`` otherwise.  Outside the sampled range the edge
    values are held constant.
    """

    def __init__(self, xs, values, ts=None):
        self.xs = np.asarray(xs, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.ts = None if ts is None else np.asarray(ts, dtype=float)
        if self.ts is None and self.values.shape != self.xs.shape:
            raise SpecError("table values must match the x grid")
        if self.ts is not None and self.values.shape != (len(self.ts), len(self.xs)):
            raise SpecError("table values must have shape (len(ts), len(xs))")
        if np.any(np.diff(self.xs) <= 0) or (self.ts is not None and np.any(np.diff(self.ts) <= 0)):
            raise SpecError("table grids must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise SpecError("table values must be finite")

    @property
    def variables(self) -> frozenset:
        return frozenset({"x"} if self.ts is None else {"x", "t"})

    def is_constant(self) -> bool:
        return False

    def __call__(self, x, t):
        xv, tv = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        if self.ts is None:
            out = np.interp(xv, self.xs, self.values)
        else:
            out = _bilinear(self.xs, self.ts, self.values, xv, tv)
        if np.ndim(out) == 0:
            return float(out)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Table)
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.values, other.values)
            and (self.ts is None) == (other.ts is None)
            and (self.ts is None or np.array_equal(self.ts, other.ts))
        )

    def __hash__(self):
        return hash((self.xs.tobytes(), self.values.tobytes()))


def _bracket(grid, v):
    v = np.clip(v, grid[0], grid[-1])
    k = np.clip(np.searchsorted(grid, v, side="right") - 1, 0, len(grid) - 2)
    return k, (v - grid[k]) / (grid[k + 1] - grid[k])


def _bilinear(xs, ts, values, x, t):
    ix, wx = _bracket(xs, x)
    it, wt = _bracket(ts, t)
    lo = (1 - wx) * values[it, ix] + wx * values[it, ix + 1]
    hi = (1 - wx) * values[it + 1, ix] + wx * values[it + 1, ix + 1]
    return (1 - wt) * lo + wt * hi


class SumCoefficient:
    """Pointwise sum of coefficient sources (used when tables are perturbed)."""

    def __init__(self, terms):
        self.terms = tuple(terms)

    @property
    def variables(self) -> frozenset:
        return frozenset().union(*(term.variables for term in self.terms))

    def is_constant(self) -> bool:
        return all(term.is_constant() for term in self.terms)

    def __call__(self, x, t):
        out = self.terms[0](x, t)
        for term in self.terms[1:]:
            out = out + term(x, t)
        return out

    def __eq__(self, other):
        return isinstance(other, SumCoefficient) and self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)


def as_coefficient(value) -> Any:
    """Turn a string, number, :class:`Expr`, :class:`Table` or config mapping into a coefficient."""
    if isinstance(value, (Expr, Table, SumCoefficient)):
        return value
    if isinstance(value, bool):
        raise SpecError(f"invalid coefficient {value!r}")
    if isinstance(value, (int, float, np.floating, np.integer)):
        if not math.isfinite(float(value)):
            raise SpecError(f"coefficient must be finite, got {value!r}")
        return Num(float(value))
    if isinstance(value, str):
        return parse(value)
    if isinstance(value, Mapping):
        if "values" not in value or "x" not in value:
            raise SpecError("table coefficient needs 'x' and 'values'")
        return Table(value["x"], value["values"], value.get("t"))
    raise SpecError(f"cannot interpret {value!r} as a coefficient")


def coefficient_to_config(c):
    if isinstance(c, Expr):
        return to_string(c)
    if isinstance(c, Table):
        out = {"x": c.xs.tolist(), "values": c.values.tolist()}
        if c.ts is not None:
            out["t"] = c.ts.tolist()
        return out
    raise SpecError("sums of tables and expressions cannot be serialized")


def is_zero(c) -> bool:
    return isinstance(c, Num) and c.value == 0.0


def _add(c1, c2):
    if is_zero(c2):
        return c1
    if is_zero(c1):
        return c2
    if isinstance(c1, Expr) and isinstance(c2, Expr):
        return BinOp("+", c1, c2)
    return SumCoefficient((c1, c2))


def _eval_coef(c, x, t):
    out = c(x, t)
    return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast(np.asarray(x), np.asarray(t)).shape)


# ------------------------------------------------------------------- spec


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """One linear hyperbolic problem with reflection boundary conditions."""

    n: int
    m: int
    a: Tuple[Any, ...]
    b: Tuple[Tuple[Any, ...], ...]
    p: Tuple[Tuple[float, ...], ...]
    lambda0: float
    name: str = "custom"
    params: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.n < 1:
            raise SpecError("n must be at least 1")
        if not 0 <= self.m <= self.n:
            raise SpecError(f"split index m={self.m} outside [0, {self.n}]")
        if len(self.a) != self.n:
            raise SpecError(f"expected {self.n} speeds, got {len(self.a)}")
        if len(self.b) != self.n or any(len(row) != self.n for row in self.b):
            raise SpecError(f"coupling matrix must be {self.n}x{self.n}")
        if len(self.p) != self.n or any(len(row) != self.n for row in self.p):
            raise SpecError(f"reflection matrix must be {self.n}x{self.n}")
        if not all(math.isfinite(v) for row in self.p for v in row):
            raise SpecError("reflection coefficients must be finite")
        if not (self.lambda0 > 0 and math.isfinite(self.lambda0)):
            raise SpecError("lambda0 must be a positive real")

    @classmethod
    def create(cls, a, b=None, p=None, m=None, lambda0=1.0, name="custom", params=()):
        """Build a spec from loose inputs (strings, numbers, nested lists)."""
        a = tuple(as_coefficient(v) for v in a)
        n = len(a)
        if b is None:
            b = [[0.0] * n for _ in range(n)]
        if p is None:
            p = np.zeros((n, n))
        b = tuple(tuple(as_coefficient(v) for v in row) for row in b)
        p = tuple(tuple(float(v) for v in row) for row in np.asarray(p, dtype=float).reshape(n, n))
        if m is None:
            m = n
        return cls(n=n, m=int(m), a=a, b=b, p=p, lambda0=float(lambda0), name=name,
                   params=tuple(params))

    @property
    def pmat(self) -> np.ndarray:
        return np.array(self.p, dtype=float)

    def rightward(self, j: int) -> bool:
        return j < self.m

    def exit_side(self, j: int) -> int:
        """Boundary abscissa reached when tracing component ``j`` backward (0 or 1)."""
        return 0 if j < self.m else 1

    def outflow_side(self, j: int) -> int:
        return 1 if j < self.m else 0

    def speed(self, j: int, x, t):
        return _eval_coef(self.a[j], x, t)

    def coupling(self, j: int, k: int, x, t):
        return _eval_coef(self.b[j][k], x, t)

    def speeds(self, x, t) -> np.ndarray:
        return np.stack([self.speed(j, x, t) for j in range(self.n)])

    def is_decoupled(self) -> bool:
        return all(is_zero(self.b[j][k]) for j in range(self.n) for k in range(self.n) if j != k)

    def is_autonomous(self) -> bool:
        coefs = list(self.a) + [c for row in self.b for c in row]
        return all("t" not in c.variables for c in coefs)

    def decoupled(self) -> "SystemSpec":
        """Same spec with the off-diagonal coupling removed."""
        b = tuple(tuple(self.b[j][k] if j == k else Num(0.0) for k in range(self.n)) for j in range(self.n))
        return SystemSpec(self.n, self.m, self.a, b, self.p, self.lambda0,
                          name=f"{self.name}[decoupled]", params=self.params)

    def boundary_rhs(self, right_traces: np.ndarray, left_traces: np.ndarray) -> np.ndarray:
        """``(Pu)_j`` from traces ``u_k(1, .)`` and ``u_k(0, .)`` (leading axis = component)."""
        out_traces = np.concatenate([right_traces[: self.m], left_traces[self.m:]], axis=0)
        return np.tensordot(self.pmat, out_traces, axes=(1, 0))

    def to_config(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "m": self.m,
            "lambda0": self.lambda0,
            "a": [coefficient_to_config(c) for c in self.a],
            "b": [[coefficient_to_config(c) for c in row] for row in self.b],
            "p": [list(row) for row in self.p],
        }

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], name: str = "inline") -> "SystemSpec":
        try:
            a = cfg["a"]
            lambda0 = cfg["lambda0"]
        except KeyError as exc:
            raise SpecError(f"inline system needs key {exc.args[0]!r}") from None
        if isinstance(a, (str, int, float)):
            a = [a]
        n = len(a)
        if "n" in cfg and int(cfg["n"]) != n:
            raise SpecError(f"n={cfg['n']} does not match {n} speeds")
        try:
            return cls.create(a, cfg.get("b"), cfg.get("p"), cfg.get("m", n), lambda0, name=name)
        except ExprError as exc:
            raise SpecError(f"bad coefficient expression: {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(str(exc)) from None

    def __repr__(self):
        return f"SystemSpec(name={self.name!r}, n={self.n}, m={self.m}, lambda0={self.lambda0})"


# -------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    conditions: Dict[str, bool]
    worst_margin: float
    violations: List[Tuple[str, int, float, float]] = field(default_factory=list)
    sup_norms: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.conditions.values())

    def __bool__(self):
        return self.passed


def _sample_grid(nx, nt, t_range):
    if nx < 2 or nt < 2:
        raise ValueError("validation grid needs nx, nt >= 2")
    xs = np.linspace(0.0, 1.0, nx)
    ts = np.linspace(t_range[0], t_range[1], nt)
    return np.meshgrid(xs, ts, indexing="ij")


def validate(spec: SystemSpec, nx: int = 41, nt: int = 41, t_range=(0.0, 1.0),
             max_violations: int = 200) -> ValidationReport:
    """Sample the coefficients and check the hyperbolicity floor and boundedness."""
    X, T = _sample_grid(nx, nt, t_range)
    conditions = {"evaluable": True, "hyperbolicity": True, "bounded": True}
    violations = []
    worst = math.inf
    sup_a = sup_b = 0.0
    for j in range(spec.n):
        try:
            aj = spec.speed(j, X, T)
        except ExprError as exc:
            conditions["evaluable"] = False
            violations.append((f"a[{j}] not evaluable: {exc}", j, math.nan, math.nan))
            continue
        if not np.all(np.isfinite(aj)):
            conditions["bounded"] = False
            continue
        sup_a = max(sup_a, float(np.max(np.abs(aj))))
        margin = (aj if spec.rightward(j) else -aj) - spec.lambda0
        worst = min(worst, float(margin.min()))
        bad = np.argwhere(margin < 0)
        if len(bad):
            conditions["hyperbolicity"] = False
            for ix, it in bad[: max_violations - len(violations)]:
                violations.append(("hyperbolicity", j, float(X[ix, it]), float(T[ix, it])))
    for j in range(spec.n):
        for k in range(spec.n):
            try:
                bjk = spec.coupling(j, k, X, T)
            except ExprError as exc:
                conditions["evaluable"] = False
                violations.append((f"b[{j}][{k}] not evaluable: {exc}", j, math.nan, math.nan))
                continue
            if not np.all(np.isfinite(bjk)):
                conditions["bounded"] = False
                violations.append((f"b[{j}][{k}] not finite", j, math.nan, math.nan))
                continue
            sup_b = max(sup_b, float(np.max(np.abs(bjk))))
    return ValidationReport(conditions, worst, violations, {"a": sup_a, "b": sup_b,
                                                             "p": float(np.max(np.abs(spec.pmat)))})


@dataclass
class LevyReport:
    passed: bool
    violations: List[Tuple[int, int, float, float]]
    pairs_checked: int

    def __bool__(self):
        return self.passed


def check_levy(spec: SystemSpec, tol: float = 1e-10, nx: int = 41, nt: int = 41,
               t_range=(0.0, 1.0), max_violations: int = 200) -> LevyReport:
    """Screen for coupling where two speeds coincide.

    Flags sampled points with ``|a_k - a_j| <= tol`` but ``|b_jk| > tol``.
    Passing is necessary, not sufficient, for the Levy-type factorization
    ``b_jk = beta_jk (a_k - a_j)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    X, T = _sample_grid(nx, nt, t_range)
    speeds = [spec.speed(j, X, T) for j in range(spec.n)]
    violations = []
    pairs = 0
    for j in range(spec.n):
        for k in range(spec.n):
            if j == k or is_zero(spec.b[j][k]):
                continue
            pairs += 1
            bjk = spec.coupling(j, k, X, T)
            bad = np.argwhere((np.abs(speeds[k] - speeds[j]) <= tol) & (np.abs(bjk) > tol))
            for ix, it in bad[: max(0, max_violations - len(violations))]:
                violations.append((j, k, float(X[ix, it]), float(T[ix, it])))
            if len(bad) and len(violations) >= max_violations:
                break
    return LevyReport(not violations, violations, pairs)


def perturb(spec: SystemSpec, btilde) -> SystemSpec:
    """Return the spec with coupling ``b + btilde``; speeds, reflections and split unchanged."""
    rows = list(btilde)
    if len(rows) != spec.n or any(len(row) != spec.n for row in rows):
        raise SpecError(f"perturbation must be {spec.n}x{spec.n}")
    b = tuple(
        tuple(_add(spec.b[j][k], as_coefficient(rows[j][k])) for k in range(spec.n))
        for j in range(spec.n)
    )
    return SystemSpec(spec.n, spec.m, spec.a, b, spec.p, spec.lambda0, name=spec.name, params=spec.params)


# --------------------------------------------------------------- builtins


def _fold(text: str) -> Expr:
    e = parse(text)
    if e.is_constant():
        return Num(float(evaluate(e, 0.0, 0.0)))
    return e


def _num(v: float) -> Expr:
    return Num(float(v)) if v != 0 else Num(0.0)


def _transport() -> SystemSpec:
    return SystemSpec.create(["1"], [["0"]], [[0.0]], m=1, lambda0=1.0, name="transport")


def _f1ex1() -> SystemSpec:
    # u1_t + u1_x = 0, u2_t + u2_x - u1 = 0; u1(0) = u2(1), u2(0) = 0
    return SystemSpec.create(["1", "1"], [["0", "0"], ["-1", "0"]], [[0, 1], [0, 0]],
                             m=2, lambda0=1.0, name="f1ex1")


def _ex11(nu: float) -> SystemSpec:
    # u1_t + u1_x = nu u2, u2_t - u2_x = 0; u1(0) = 0, u2(1) = u1(1)
    b = [[Num(0.0), _num(-nu)], [Num(0.0), Num(0.0)]]
    return SystemSpec.create(["1", "-1"], b, [[0, 0], [1, 0]], m=1, lambda0=1.0,
                             name="ex11", params=(("nu", nu),))


def _example(mu: float, nu: float) -> SystemSpec:
    # u1_t + u1_x + mu u1 - nu u2 = 0, u2_t - u2_x = 0; u1(0) = 0, u2(1) = u1(1)
    b = [[_num(mu), _num(-nu)], [Num(0.0), Num(0.0)]]
    return SystemSpec.create(["1", "-1"], b, [[0, 0], [1, 0]], m=1, lambda0=1.0,
                             name="example", params=(("mu", mu), ("nu", nu)))


def _positive(name, v):
    if not (v > 0 and math.isfinite(v)):
        raise SpecError(f"parameter {name} must be positive, got {v!r}")


def _reactor2(mu, K, Q, beta, theta0, theta_profile=None) -> SystemSpec:
    for key, v in (("beta", beta), ("K", K), ("Q", Q)):
        _positive(key, v)
    th = theta_profile if theta_profile is not None else repr(float(theta0))
    # beta u_t + u_x = (QK e^th - mu) u + mu v  ->  divide by beta
    b11 = _fold(f"-(({Q!r})*({K!r})*exp({th}) - ({mu!r}))/({beta!r})")
    b12 = _num(-mu / beta)
    # v_t - v_x = mu (u - v)
    b21 = _num(-mu)
    b22 = _num(mu)
    return SystemSpec.create([1.0 / beta, -1.0], [[b11, b12], [b21, b22]], [[0, 1], [0, 0]],
                             m=1, lambda0=min(1.0 / beta, 1.0), name="reactor2",
                             params=(("mu", mu), ("K", K), ("Q", Q), ("beta", beta), ("theta0", theta0)))


def _reactor3(mu, K, Q, beta, theta0, theta_profile=None, c_profile=None) -> SystemSpec:
    for key, v in (("beta", beta), ("K", K), ("Q", Q)):
        _positive(key, v)
    th = theta_profile if theta_profile is not None else repr(float(theta0))
    c0 = c_profile if c_profile is not None else "0"
    # beta u_t + u_x = (QK e^th (1 - C0) - mu) u - QK e^th v + mu w
    b11 = _fold(f"-(({Q!r})*({K!r})*exp({th})*(1 - ({c0})) - ({mu!r}))/({beta!r})")
    b12 = _fold(f"({Q!r})*({K!r})*exp({th})/({beta!r})")
    b13 = _num(-mu / beta)
    # v_t + v_x = K e^th (1 - C0) u - K e^th v
    b21 = _fold(f"-({K!r})*exp({th})*(1 - ({c0}))")
    b22 = _fold(f"({K!r})*exp({th})")
    # w_t - w_x = mu (u - w)
    b31 = _num(-mu)
    b33 = _num(mu)
    z = Num(0.0)
    b = [[b11, b12, b13], [b21, b22, z], [b31, z, b33]]
    p = [[0, 0, 1], [0, 0, 0], [0, 0, 0]]
    return SystemSpec.create([1.0 / beta, 1.0, -1.0], b, p, m=2, lambda0=min(1.0 / beta, 1.0),
                             name="reactor3",
                             params=(("mu", mu), ("K", K), ("Q", Q), ("beta", beta), ("theta0", theta0)))


def _control(a1, a2, gain=1.0, b="0", c="0") -> SystemSpec:
    _positive("a1", a1)
    _positive("a2", a2)
    # linearization at zero: u_t + a1 u_x = b u + c v, v_t - a2 v_x = (1-b) u + (1-c) v;
    # u(0) = 0, v(1) = gain * u(1)
    bx, cx = f"({b})", f"({c})"
    coup = [[_fold(f"-{bx}"), _fold(f"-{cx}")], [_fold(f"-(1 - {bx})"), _fold(f"-(1 - {cx})")]]
    return SystemSpec.create([a1, -a2], coup, [[0, 0], [gain, 0]], m=1, lambda0=min(a1, a2),
                             name="control", params=(("a1", a1), ("a2", a2), ("gain", gain)))


def _bjj(eps: float) -> SystemSpec:
    # u1_t + u1_x = 0, u2_t + u2_x = eps u2, u3_t - u3_x = 0
    # u1(0) = u3(0), u2(0) = u3(0), u3(1) = u1(1) - u2(1)
    z = Num(0.0)
    b = [[z, z, z], [z, _num(-eps), z], [z, z, z]]
    p = [[0, 0, 1], [0, 0, 1], [1, -1, 0]]
    return SystemSpec.create(["1", "1", "-1"], b, p, m=2, lambda0=1.0, name="bjj",
                             params=(("eps", eps),))


@dataclass(frozen=True)
class _Builtin:
    factory: Callable[..., SystemSpec]
    required: Tuple[str, ...]
    optional: Tuple[str, ...]
    signature: str
    description: str
    source: str


BUILTINS: Dict[str, _Builtin] = {
    "transport": _Builtin(_transport, (), (), "transport",
                          "Pure transport with zero inflow, extinct after t=1", "scalar transport"),
    "f1ex1": _Builtin(_f1ex1, (), (), "f1ex1",
                      "Levy-condition counterexample (no smoothing)", "equal speeds with coupling"),
    "ex11": _Builtin(_ex11, ("nu",), (), "ex11(ν)",
                     "Unstable under large coupling for nu > 1", "large perturbation"),
    "example": _Builtin(_example, ("mu", "nu"), (), "example(μ,ν)",
                        "Diagonal lower-order part, quasipolynomial spectrum", "stability thresholds in (mu, nu)"),
    "reactor2": _Builtin(_reactor2, ("mu", "K", "Q", "beta", "theta0"), ("theta_profile",),
                         "reactor2(μ,K,Q,β,ϑ0)", "Zero-order chemical reactor linearization",
                         "catalytic reactor with refrigerator"),
    "reactor3": _Builtin(_reactor3, ("mu", "K", "Q", "beta", "theta0"), ("theta_profile", "c_profile"),
                         "reactor3(μ,K,Q,β,ϑ0)", "First-order chemical reactor linearization",
                         "catalytic reactor with concentration"),
    "control": _Builtin(_control, ("a1", "a2"), ("gain", "b", "c"), "control(a1,a2)",
                        "Boundary control linearization", "boundary control theory"),
    "bjj": _Builtin(_bjj, ("eps",), (), "bjj(ε)",
                    "Example with diagonal perturbation", "cancellation destroyed by a diagonal term"),
}

_ALIASES = {"ν": "nu", "μ": "mu", "ε": "eps", "β": "beta", "ϑ0": "theta0", "θ0": "theta0",
            "epsilon": "eps", "theta_0": "theta0"}


def builtin(name: str, **params) -> SystemSpec:
    """Construct a built-in example system by name."""
    try:
        entry = BUILTINS[name]
    except KeyError:
        raise SpecError(f"unknown builtin {name!r}; known: {', '.join(BUILTINS)}") from None
    kwargs = {}
    for key, value in params.items():
        key = _ALIASES.get(key, key)
        if key not in entry.required and key not in entry.optional:
            raise SpecError(f"builtin {name!r} has no parameter {key!r}")
        if key in entry.required or key in ("gain",):
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise SpecError(f"parameter {key!r} must be a real number") from None
            if not math.isfinite(value):
                raise SpecError(f"parameter {key!r} must be finite")
        kwargs[key] = value
    missing = [key for key in entry.required if key not in kwargs]
    if missing:
        raise SpecError(f"builtin {name!r} requires parameters: {', '.join(missing)}")
    try:
        return entry.factory(**kwargs)
    except ExprError as exc:
        raise SpecError(f"bad profile expression for {name!r}: {exc}") from None


def list_builtins() -> List[str]:
    """One catalog row per builtin: signature, description and source example."""
    return [f"{b.signature}: {b.description} ({b.source})" for b in BUILTINS.values()]
