"""Roots of the quasipolynomial ``f(z) = z + a + b e^{-z}``.

Roots in a rectangle are isolated by the argument principle: the winding
number of ``f`` along the rectangle boundary counts the zeros inside, and
rectangles are split until each holds one zero, which is then polished by
damped Newton.  Every visited rectangle is audited afterwards: its winding
count must equal the number of polished roots that fall inside it.

For the two-component examples the eigenvalue ``λ`` relates to the root by
``z = 2λ``.  The quasipolynomial reduction divides by a factor that vanishes
at one point (``z = -μ`` for ``example(μ, ν)``, ``z = 0`` for ``ex11``), so
that point is a root of ``f`` without being an eigenvalue unless it is a
double root.  :func:`eigen_rightmost` removes it before picking the rightmost.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "QuasiPoly", "Box", "RootReport", "Classification", "WindingError",
    "gamma_root", "rightmost_root", "eigen_rightmost", "winding_number",
    "mu_nu_classify", "classify_grid", "write_classification_csv", "default_box",
    "stable_threshold", "unstable_threshold",
]

BOUNDARY_MIN = 1e-8
NEWTON_TOL = 1e-12
MAX_DEPTH = 48
_SPLIT = 0.5 + 0.0137


class WindingError(RuntimeError):
    """The boundary of a box passes too close to a root."""


@dataclass(frozen=True)
class QuasiPoly:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("quasipolynomial coefficients must be finite")

    @classmethod
    def example(cls, mu: float, nu: float) -> "QuasiPoly":
        """``example(μ, ν)`` system: ``a = μ - ν``, ``b = ν e^{-μ}``."""
        return cls(mu - nu, nu * math.exp(-mu))

    @classmethod
    def gamma_form(cls, nu: float) -> "QuasiPoly":
        """``ν(1 - e^{-γ}) = γ`` rewritten as ``γ - ν + ν e^{-γ} = 0``."""
        return cls(-nu, nu)

    def __call__(self, z):
        with np.errstate(over="ignore", invalid="ignore"):
            return z + self.a + self.b * np.exp(-z)

    def deriv(self, z):
        with np.errstate(over="ignore", invalid="ignore"):
            return 1.0 - self.b * np.exp(-z)


@dataclass(frozen=True)
class Box:
    re_lo: float
    re_hi: float
    im_lo: float
    im_hi: float

    def __post_init__(self):
        if not (self.re_lo < self.re_hi and self.im_lo < self.im_hi):
            raise ValueError(f"degenerate box {self}")

    def contains(self, z: complex, slack: float = 0.0) -> bool:
        return (self.re_lo - slack <= z.real <= self.re_hi + slack
                and self.im_lo - slack <= z.imag <= self.im_hi + slack)

    @property
    def diameter(self) -> float:
        return math.hypot(self.re_hi - self.re_lo, self.im_hi - self.im_lo)

    @property
    def center(self) -> complex:
        return complex(0.5 * (self.re_lo + self.re_hi), 0.5 * (self.im_lo + self.im_hi))

    def as_list(self) -> List[float]:
        return [self.re_lo, self.re_hi, self.im_lo, self.im_hi]


def default_box(q: QuasiPoly) -> Box:
    a, b = abs(q.a), abs(q.b)
    return Box(-max(10.0, 2 * a + 2 * b), max(2.0, a + b), -40.0, 40.0)


# ---------------------------------------------------------------- winding


def _edge_increment(q: QuasiPoly, z0: complex, z1: complex, n0: int = 64, rounds: int = 40) -> float:
    s = np.linspace(0.0, 1.0, n0)
    vals = q(z0 + s * (z1 - z0))
    for _ in range(rounds):
        if np.min(np.abs(vals)) < BOUNDARY_MIN:
            raise WindingError("root on or near the box boundary")
        steps = np.angle(vals[1:] / vals[:-1])
        bad = np.flatnonzero(np.abs(steps) > math.pi / 4)
        if bad.size == 0:
            return float(steps.sum())
        mids = 0.5 * (s[bad] + s[bad + 1])
        s = np.insert(s, bad + 1, mids)
        vals = np.insert(vals, bad + 1, q(z0 + mids * (z1 - z0)))
    raise WindingError("argument increments did not resolve")


def winding_number(q: QuasiPoly, box: Box) -> int:
    """Number of zeros of ``q`` inside ``box`` (argument principle)."""
    corners = [complex(box.re_lo, box.im_lo), complex(box.re_hi, box.im_lo),
               complex(box.re_hi, box.im_hi), complex(box.re_lo, box.im_hi)]
    total = sum(_edge_increment(q, corners[i], corners[(i + 1) % 4]) for i in range(4))
    count = total / (2 * math.pi)
    k = int(round(count))
    if abs(count - k) > 1e-3:
        raise WindingError(f"non-integer winding {count}")
    return k


# ----------------------------------------------------------------- search


def _newton(q: QuasiPoly, z: complex, mult: int = 1, maxit: int = 100) -> complex:
    # multiple roots: |f| reaches the tolerance far from the root, keep going until no progress
    tol = NEWTON_TOL if mult == 1 else 0.0
    fz = q(z)
    for _ in range(maxit):
        if abs(fz) <= tol:
            break
        d = q.deriv(z)
        if d == 0:
            break
        step = mult * fz / d
        alpha = 1.0
        while alpha > 1e-6:
            zn = z - alpha * step
            fn = q(zn)
            if abs(fn) < abs(fz):
                break
            alpha *= 0.5
        else:
            break
        z, fz = zn, fn
    return complex(z)


def _split(box: Box, frac: float) -> List[Box]:
    xr = box.re_lo + frac * (box.re_hi - box.re_lo)
    yi = box.im_lo + frac * (box.im_hi - box.im_lo)
    return [Box(box.re_lo, xr, box.im_lo, yi), Box(xr, box.re_hi, box.im_lo, yi),
            Box(box.re_lo, xr, yi, box.im_hi), Box(xr, box.re_hi, yi, box.im_hi)]


class _Search:
    def __init__(self, q: QuasiPoly):
        self.q = q
        self.visited: List[Tuple[Box, int]] = []
        self.roots: List[complex] = []
        self.failures: List[str] = []

    def run(self, box: Box, count: int, depth: int = 0):
        self.visited.append((box, count))
        if count == 0:
            return
        if count == 1 and box.diameter < 0.5:
            z = _newton(self.q, box.center)
            if box.contains(z, slack=1e-9) and abs(self.q(z)) <= 1e-10:
                self.roots.append(z)
                return
        if count >= 2 and box.diameter < 1e-2:
            # a multiple root: boundaries near it have |f| ~ dist^count, so splitting stalls
            z = _newton(self.q, box.center, mult=count)
            if box.contains(z) and abs(self.q(z)) <= 1e-10 and abs(self.q.deriv(z)) <= 1e-4:
                self.roots.extend([z] * count)
                return
        if box.diameter < 1e-9 or depth >= MAX_DEPTH:
            if box.diameter < 1e-6:
                z = _newton(self.q, box.center, mult=count)
                self.roots.extend([z] * count)
            else:
                self.failures.append(f"could not isolate {count} roots in {box.as_list()}")
            return
        for attempt in range(8):
            frac = _SPLIT + 0.031 * attempt * (-1) ** attempt
            kids = _split(box, frac)
            try:
                counts = [winding_number(self.q, k) for k in kids]
            except WindingError:
                continue
            if sum(counts) != count:
                continue
            for k, c in zip(kids, counts):
                self.run(k, c, depth + 1)
            return
        self.failures.append(f"could not split {box.as_list()} consistently")


def _real_roots(q: QuasiPoly, lo: float, hi: float, n: int = 4001) -> List[float]:
    """Sign-change scan plus bisection, and tangential roots from |f| minima."""
    xs = np.linspace(lo, hi, n)
    with np.errstate(over="ignore"):
        fx = xs + q.a + q.b * np.exp(-xs)
    out = []
    for i in np.flatnonzero(np.sign(fx[:-1]) * np.sign(fx[1:]) <= 0):
        a, b = xs[i], xs[i + 1]
        fa = fx[i]
        if fa == 0:
            out.append(float(a))
            continue
        for _ in range(200):
            m = 0.5 * (a + b)
            if m <= a or m >= b:
                break
            fm = m + q.a + q.b * math.exp(-m)
            if (fm < 0) == (fa < 0):
                a, fa = m, fm
            else:
                b = m
        out.append(float(0.5 * (a + b)))
    # double roots touch zero without a sign change
    af = np.abs(fx)
    for i in np.flatnonzero((af[1:-1] <= af[:-2]) & (af[1:-1] <= af[2:])) + 1:
        z = _newton(q, complex(xs[i]), mult=2).real
        if abs(q(z)) <= 1e-10 and lo <= z <= hi:
            out.append(float(z))
    out.sort()
    merged: List[float] = []
    for r in out:
        if not merged or abs(r - merged[-1]) > 1e-7:
            merged.append(r)
    return merged


@dataclass
class RootReport:
    """Roots of ``q`` in ``box`` (with multiplicity) and the rightmost one."""

    a: float
    b: float
    box: Box
    rightmost: Optional[complex]
    roots: List[complex]
    real_roots: List[float]
    count: int
    audit: List[dict]
    failures: List[str]
    deflated: List[complex] = field(default_factory=list)

    @property
    def audit_ok(self) -> bool:
        return not self.failures and all(e["winding"] == e["found"] for e in self.audit)

    @property
    def lam(self) -> Optional[complex]:
        return None if self.rightmost is None else self.rightmost / 2

    @property
    def max_residual(self) -> float:
        q = QuasiPoly(self.a, self.b)
        return max((abs(q(z)) for z in self.roots), default=0.0)

    def to_dict(self) -> dict:
        def c(z):
            return None if z is None else [z.real, z.imag]
        return {
            "a": self.a, "b": self.b, "box": self.box.as_list(),
            "rightmost_z": c(self.rightmost), "rightmost_lambda": c(self.lam),
            "roots": [c(z) for z in self.roots], "real_roots": self.real_roots,
            "count": self.count, "audit_ok": self.audit_ok, "failures": self.failures,
            "deflated": [c(z) for z in self.deflated], "max_residual": self.max_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _jitter(box: Box, k: int) -> Box:
    d = 1e-3 * (k + 1) * (1 + 0.37 * k)
    return Box(box.re_lo - d, box.re_hi + 0.61 * d, box.im_lo - 0.83 * d, box.im_hi + 0.29 * d)


def _pick_rightmost(roots: Sequence[complex]) -> Optional[complex]:
    if not roots:
        return None
    best = max(r.real for r in roots)
    near = [r for r in roots if r.real >= best - 1e-9]
    return min(near, key=lambda r: (abs(r.imag), -r.imag))


def rightmost_root(q: QuasiPoly, box: Optional[Box] = None, deflate: Sequence[complex] = ()) -> RootReport:
    """All roots of ``q`` in ``box`` and the one with the largest real part.

    Each point in ``deflate`` removes one matching root (within 1e-7) from
    the candidate list before the rightmost is chosen.
    """
    box = default_box(q) if box is None else box
    for k in range(6):
        try:
            total = winding_number(q, box)
            break
        except WindingError:
            box = _jitter(box, k)
    else:
        raise WindingError("every jittered box boundary passes through a root")
    search = _Search(q)
    search.run(box, total)
    roots = sorted(search.roots, key=lambda z: (-z.real, z.imag))
    audit = []
    for b, c in search.visited:
        found = sum(1 for z in roots if b.contains(z))
        audit.append({"box": b.as_list(), "winding": c, "found": found})
    real = _real_roots(q, box.re_lo, box.re_hi)
    for r in real:
        if not any(abs(z - r) < 1e-7 for z in roots):
            search.failures.append(f"real root {r} missed by the box search")
    candidates = list(roots)
    removed = []
    for d in deflate:
        for i, z in enumerate(candidates):
            if abs(z - d) < 1e-7:
                removed.append(candidates.pop(i))
                break
    return RootReport(q.a, q.b, box, _pick_rightmost(candidates), roots, real, total,
                      audit, search.failures, removed)


def eigen_rightmost(mu: float, nu: float, box: Optional[Box] = None) -> RootReport:
    """Rightmost ``z = 2λ`` among genuine eigenvalues of ``example(μ, ν)``.

    ``z = -μ`` always solves the quasipolynomial but is an eigenvalue only
    when it is a double root (``ν = 1``); one copy is removed.
    """
    return rightmost_root(QuasiPoly.example(mu, nu), box, deflate=(complex(-mu, 0.0),))


def gamma_root(nu: float) -> Optional[float]:
    """Positive solution of ``ν(1 - e^{-γ}) = γ``, or None when ``ν ≤ 1``."""
    if not math.isfinite(nu) or nu <= 1:
        return None

    def g(gam):
        return -nu * math.expm1(-gam) - gam

    lo, hi = 1e-12, float(nu)
    if g(lo) <= 0:
        return None
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------- classification


def stable_threshold(mu: float) -> float:
    return mu / (1 + math.exp(-mu))


def unstable_threshold(mu: float) -> float:
    return (mu + 1) / (1 - math.exp(-mu))


@dataclass
class Classification:
    mu: float
    nu: float
    by_threshold: str
    verdict: str
    report: RootReport

    @property
    def re_rightmost(self) -> float:
        z = self.report.rightmost
        return float("nan") if z is None else z.real


def mu_nu_classify(mu: float, nu: float, box: Optional[Box] = None) -> Classification:
    """Threshold test on ``(μ, ν)`` plus the spectral verdict.

    ``by_threshold`` is ``stable``/``unstable`` when one of the sufficient
    conditions holds and ``inconclusive`` otherwise; ``verdict`` always comes
    from the sign of the rightmost genuine root.
    """
    if not (mu > 0 and nu > 0):
        raise ValueError("mu and nu must be positive")
    if nu < stable_threshold(mu):
        by = "stable"
    elif nu > unstable_threshold(mu):
        by = "unstable"
    else:
        by = "inconclusive"
    rep = eigen_rightmost(mu, nu, box)
    z = rep.rightmost
    verdict = "stable" if z is None or z.real < 0 else "unstable"
    if by != "inconclusive":
        verdict = by
    return Classification(mu, nu, by, verdict, rep)


def classify_grid(mus: Sequence[float], nus: Sequence[float]) -> List[Classification]:
    return [mu_nu_classify(float(m), float(n)) for m in mus for n in nus]


def write_classification_csv(rows: Sequence[Classification], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", "nu", "class", "re_rightmost"])
        for r in rows:
            cls = r.verdict if r.by_threshold != "inconclusive" else f"inconclusive:{r.verdict}"
            w.writerow([repr(r.mu), repr(r.nu), cls, repr(r.re_rightmost)])
