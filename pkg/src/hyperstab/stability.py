"""Extinction tests, decay fits, perturbation sweeps and smoothing probes.

The reflection cascade ``(CP)`` acts on boundary-defined functions: ``P``
combines outgoing traces into inflow values and ``C`` transports them along
characteristics with the exponential weight ``c_j``.  For a decoupled system
``(CP)^k ≡ 0`` for some ``k`` exactly when every solution dies in finite time.
"""
from __future__ import annotations

import concurrent.futures
import json
import math
import os
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .characteristics import path_weights, trace_paths
from .solver import Field, Trajectory, evolve, grid, l2_norm
from .system import SystemSpec, check_levy, is_zero, perturb

__all__ = [
    "BoundaryEnsemble", "ExtinctionResult", "DecayFit", "SweepRow", "SmoothingReport",
    "CoupledSystemError", "DecayFitError",
    "make_probes", "apply_CP", "extinction_order", "structural_order",
    "fit_decay", "epsilon_for_gamma", "sweep", "smoothing_probe",
    "operator_D_apply", "operator_Q_apply", "representation_residual",
    "growth_bound", "empirical_cu",
]

EXTINCTION_FLOOR = 1e-14


class CoupledSystemError(ValueError):
    """The reflection cascade test only applies to decoupled systems."""


class DecayFitError(ValueError):
    """Too few usable samples in the fit window."""


# ------------------------------------------------------- reflection cascade


@dataclass
class BoundaryEnsemble:
    """``r`` probe functions sampled at ``xs`` (always containing 0 and 1) and uniform ``times``.

    ``values[r, j, ix, it]``; NaN marks points whose value would need data
    from before the stored window.
    """

    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.size < 2:
            raise ValueError("need at least 2 sample times")
        steps = np.diff(self.times)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("sample times must be uniform")
        if not (np.any(self.xs == 0.0) and np.any(self.xs == 1.0)):
            raise ValueError("sample abscissae must include both boundaries")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def window(self) -> float:
        return float(self.times[-1] - self.times[0])

    def trace(self, side: int) -> np.ndarray:
        """Boundary values ``(r, n, nt)`` at ``x = side``."""
        ix = int(np.flatnonzero(self.xs == float(side))[0])
        return self.values[:, :, ix, :]

    def sup(self) -> np.ndarray:
        """Per-probe sup norm over valid samples (NaN if none are valid)."""
        v = np.abs(self.values).reshape(self.values.shape[0], -1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmax(np.where(np.isnan(v), np.nan, v), axis=1)

    def __add__(self, other: "BoundaryEnsemble") -> "BoundaryEnsemble":
        return BoundaryEnsemble(self.times, self.xs, self.values + other.values)

    def __mul__(self, s: float) -> "BoundaryEnsemble":
        return BoundaryEnsemble(self.times, self.xs, s * self.values)

    __rmul__ = __mul__


def make_probes(spec: SystemSpec, r: int = 5, seed: int = 0, window: Optional[float] = None,
                dt: Optional[float] = None, xs: Sequence[float] = (0.0, 1.0),
                degree: int = 6, t0: float = 0.0) -> BoundaryEnsemble:
    """Random trigonometric polynomials in ``t`` (and mildly in ``x``), seeded."""
    lam = spec.lambda0
    window = 10.0 / lam if window is None else float(window)
    if window < 2.0 / lam - 1e-12:
        raise ValueError("window must cover at least 2/lambda0")
    dt = 1.0 / (32.0 * lam) if dt is None else float(dt)
    nt = int(round(window / dt)) + 1
    times = t0 + dt * np.arange(nt)
    xs = np.asarray(sorted(set(float(v) for v in xs) | {0.0, 1.0}))
    rng = np.random.default_rng(seed)
    vals = np.zeros((r, spec.n, xs.size, nt))
    omega = 2 * np.pi / window
    X, T = np.meshgrid(xs, times - t0, indexing="ij")
    for q in range(r):
        for j in range(spec.n):
            acc = np.full(X.shape, rng.normal())
            for d in range(1, degree + 1):
                ca, cb, cx = rng.normal(size=3)
                acc += (ca * np.cos(d * omega * T) + cb * np.sin(d * omega * T)) * (1 + 0.3 * cx * X)
            vals[q, j] = acc
    return BoundaryEnsemble(times, xs, vals)


class _CascadePlan:
    """Feet and weights of all backward characteristics for one sample layout."""

    def __init__(self, spec: SystemSpec, times: np.ndarray, xs: np.ndarray, h: Optional[float]):
        self.spec = spec
        dt = float(times[1] - times[0])
        h = dt if h is None else h
        X, T = np.meshgrid(xs, times, indexing="ij")
        self.shape = X.shape
        floor = T.ravel() - 2.0 / spec.lambda0 - 1.0
        self.foot_t = []
        self.weight = []
        for j in range(spec.n):
            if not np.any(spec.pmat[j]):
                self.foot_t.append(None)
                self.weight.append(None)
                continue
            paths = trace_paths(lambda x, t, j=j: spec.speed(j, x, t), X.ravel(), T.ravel(), floor, h)
            if np.any(paths.kind == 0):
                raise ValueError("characteristic did not reach the boundary; check lambda0")
            C = path_weights(spec, j, paths)
            cfoot = C[paths.nvalid - 1, np.arange(C.shape[1])]
            self.foot_t.append(paths.foot_t.reshape(self.shape))
            self.weight.append(cfoot.reshape(self.shape))


def _interp_time(series: np.ndarray, t0: float, dt: float, tq: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``series[..., nt]`` at ``tq``; NaN outside the window."""
    nt = series.shape[-1]
    s = (tq - t0) / dt
    outside = (s < -1e-9) | (s > nt - 1 + 1e-9)
    s = np.clip(s, 0, nt - 1)
    i0 = np.floor(s).astype(int)
    w = s - i0
    near = w < 1e-9
    w = np.where(near, 0.0, w)
    i1 = np.minimum(i0 + 1, nt - 1)
    a = series[..., i0]
    b = series[..., i1]
    out = np.where(near, a, (1 - w) * a + w * np.where(near, 0.0, b))
    return np.where(outside, np.nan, out)


def _require_decoupled(spec: SystemSpec):
    if not spec.is_decoupled():
        raise CoupledSystemError(
            f"{spec.name}: off-diagonal coupling present; use spec.decoupled() for the cascade test")


def apply_CP(spec: SystemSpec, ensemble: BoundaryEnsemble, h: Optional[float] = None,
             _plan: Optional[_CascadePlan] = None) -> BoundaryEnsemble:
    """One application of ``C P`` to every probe in ``ensemble``."""
    _require_decoupled(spec)
    plan = _plan or _CascadePlan(spec, ensemble.times, ensemble.xs, h)
    right = ensemble.trace(1)
    left = ensemble.trace(0)
    out_traces = np.concatenate([right[:, : spec.m], left[:, spec.m:]], axis=1)  # (r, n, nt)
    P = spec.pmat
    r = ensemble.values.shape[0]
    new = np.zeros_like(ensemble.values)
    for j in range(spec.n):
        if plan.foot_t[j] is None:
            continue
        pz = np.zeros((r, ensemble.times.size))
        for k in np.flatnonzero(P[j]):
            pz = pz + P[j, k] * out_traces[:, k]
        at_foot = _interp_time(pz, ensemble.times[0], ensemble.dt, plan.foot_t[j])
        new[:, j] = plan.weight[j][None] * at_foot
    return BoundaryEnsemble(ensemble.times, ensemble.xs, new)


def structural_order(p, warn_tol: float = 1e-15) -> Optional[int]:
    """Nilpotency index of the reflection graph (edge k→j iff p_jk ≠ 0), or None."""
    p = np.asarray(p, dtype=float)
    tiny = (p != 0) & (np.abs(p) < warn_tol)
    if tiny.any():
        warnings.warn(f"{int(tiny.sum())} reflection entries below {warn_tol:g} treated as zero")
    adj = (np.abs(p) >= warn_tol).astype(np.int64)
    n = adj.shape[0]
    power = np.eye(n, dtype=np.int64)
    for k in range(1, n + 1):
        power = ((power @ adj) > 0).astype(np.int64)
        if not power.any():
            return k
    return None


@dataclass
class ExtinctionResult:
    order: Optional[int]
    method: str
    residuals: List[float]
    structural_order: Optional[int] = None
    tol: float = 1e-8
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "order": self.order, "method": self.method, "residuals": self.residuals,
            "structural_order": self.structural_order, "tol": self.tol, "seed": self.seed,
        }, sort_keys=True, indent=2)


def extinction_order(spec: SystemSpec, kmax: int = 8, r: int = 5, tol: float = 1e-8,
                     seed: int = 0, h: Optional[float] = None) -> ExtinctionResult:
    """Least ``k ≤ kmax`` with ``(CP)^k`` vanishing on ``r`` random probes.

    ``residuals[k]`` is the worst (over probes) sup of ``(CP)^k z`` relative
    to the sup of ``z``; ``residuals[0] = 1``.
    """
    _require_decoupled(spec)
    if kmax < 1 or r < 3:
        raise ValueError("need kmax >= 1 and r >= 3")
    window = (kmax + 2) / spec.lambda0
    ens = make_probes(spec, r=r, seed=seed, window=window)
    plan = _CascadePlan(spec, ens.times, ens.xs, h)
    base = ens.sup()
    residuals = [1.0]
    order = None
    cur = ens
    for k in range(1, kmax + 1):
        cur = apply_CP(spec, cur, _plan=plan)
        sup = cur.sup()
        if np.any(np.isnan(sup)):
            raise RuntimeError("probe window too short for the requested kmax")
        res = float(np.max(sup / base))
        residuals.append(res)
        if order is None and res <= tol:
            order = k
    return ExtinctionResult(order, "probe", residuals, structural_order(spec.pmat), tol, seed)


# -------------------------------------------------------------- decay fits


@dataclass
class DecayFit:
    """``‖u(t)‖ ≈ m_hat · ‖u(t_first)‖ · exp(-gamma_hat (t - t_first))``."""

    gamma_hat: float
    m_hat: float
    r2: float
    window: Tuple[float, float]
    n_samples: int


def fit_decay(series, window: Optional[Tuple[float, float]] = None,
              lambda0: Optional[float] = None) -> DecayFit:
    """Least-squares line through ``(t, log ‖u(t)‖)``.

    ``series`` is a :class:`Trajectory` (its L² series is used) or a pair
    ``(times, norms)``.  The default window is ``[t0 + 2/Λ0, t_end]``; when
    it holds fewer than 5 usable samples (e.g. after finite-time extinction)
    all usable samples are used instead.  Samples below ``1e-14`` times the
    initial norm are dropped.
    """
    if isinstance(series, Trajectory):
        times, norms = series.step_times, series.l2
        lambda0 = series.lambda0 if lambda0 is None else lambda0
    else:
        times, norms = (np.asarray(v, dtype=float) for v in series)
    lambda0 = 1.0 if lambda0 is None else lambda0
    if times.size != norms.size:
        raise ValueError("times and norms differ in length")
    usable = np.isfinite(norms) & (norms > 1e-300) & (norms >= EXTINCTION_FLOOR * norms[0])
    explicit = window is not None
    if window is None:
        window = (float(times[0]) + 2.0 / lambda0, float(times[-1]))
    sel = usable & (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    if sel.sum() < 5 and not explicit:
        sel = usable
        if sel.any():
            window = (float(times[sel][0]), float(times[sel][-1]))
    if sel.sum() < 5:
        raise DecayFitError(f"only {int(sel.sum())} usable samples in window {window}")
    t = times[sel]
    y = np.log(norms[sel])
    slope, icpt = np.polyfit(t, y, 1)
    pred = slope * t + icpt
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    m_hat = float(np.exp(icpt + slope * times[0]) / norms[0]) if norms[0] > 0 else float("nan")
    return DecayFit(float(-slope), m_hat, r2, (float(window[0]), float(window[1])), int(sel.sum()))


def growth_bound(traj: Trajectory) -> Tuple[float, float]:
    """Empirical ``(K, ω)`` with ``‖u(t)‖ ≤ K e^{ω(t-τ)} ‖φ‖`` on the stored series.

    ``ω`` is the least-squares slope of the log-norm (floored at 0 when the
    series only decays) and ``K`` the smallest prefactor making the bound hold.
    """
    t = traj.step_times - traj.step_times[0]
    n0 = traj.l2[0]
    if n0 == 0:
        return 1.0, 0.0
    ratio = traj.l2 / n0
    ok = ratio > EXTINCTION_FLOOR
    omega = 0.0
    if ok.sum() >= 2:
        omega = max(0.0, float(np.polyfit(t[ok], np.log(ratio[ok]), 1)[0]))
    K = float(np.max(ratio * np.exp(-omega * t)))
    return max(K, 1.0), omega


def epsilon_for_gamma(c_u: float, d: float, gamma: float) -> float:
    """Unique ``ε > 0`` with ``log(c_u ε d)/d + c_u ε = -γ``.

    The left side increases strictly from ``-∞`` on ``(0, 1/(c_u d))`` and is
    positive at the right end, so plain bisection converges.
    """
    if not (c_u > 0 and d > 0 and gamma > 0):
        raise ValueError("c_u, d and gamma must be positive")

    def g(eps):
        return math.log(c_u * eps * d) / d + c_u * eps + gamma

    lo, hi = 0.0, 1.0 / (c_u * d)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) if lo > 0 else hi


def empirical_cu(spec: SystemSpec, d: float, nx: int = 201, samples: int = 5, seed: int = 0) -> float:
    """Largest observed ``‖U(t, 0)φ‖/‖φ‖`` over ``t ≤ d`` for random smooth data."""
    rng = np.random.default_rng(seed)
    x = grid(nx)
    dx = 1.0 / (nx - 1)
    amax = max(float(np.abs(spec.speed(j, x, 0.0)).max()) for j in range(spec.n))
    best = 0.0
    for _ in range(samples):
        coef = rng.normal(size=(spec.n, 4))
        vals = np.array([sum(c * np.sin((q + 1) * np.pi * x) for q, c in enumerate(row)) for row in coef])
        traj = evolve(spec, Field(vals), 0.0, d, dx / amax)
        best = max(best, float(np.max(traj.l2 / traj.l2[0])))
    return best


# ------------------------------------------------------------------ sweeps


@dataclass
class SweepRow:
    eps: float
    gamma_hat: float
    m_hat: float
    r2: float
    blowup: bool
    extinct: bool = False


def _sweep_one(args) -> SweepRow:
    spec0, direction, eps, tau, t_end, dt, values = args
    spec = perturb(spec0, [[_scaled(c, eps) for c in row] for row in direction])
    traj = evolve(spec, Field(values, tau), tau, t_end, dt)
    tail = traj.l2[-1] < EXTINCTION_FLOOR * traj.l2[0]
    if tail and not traj.diverged:
        return SweepRow(eps, math.inf, float("nan"), 1.0, False, True)
    try:
        fit = fit_decay(traj)
    except DecayFitError:
        return SweepRow(eps, float("nan"), float("nan"), 0.0, traj.diverged, False)
    return SweepRow(eps, fit.gamma_hat, fit.m_hat, fit.r2, traj.diverged, False)


def _scaled(c, eps: float):
    """``eps * c`` for a number or expression string."""
    if isinstance(c, (int, float)):
        return eps * float(c)
    return f"({eps!r})*({c})"


def sweep(spec0: SystemSpec, direction, eps_list: Sequence[float], tau: float, t_end: float,
          dt: float, phi: Field, allow_diagonal: bool = False, check_extinction: bool = True,
          workers: Optional[int] = None) -> List[SweepRow]:
    """Evolve ``perturb(spec0, ε·direction)`` for each ``ε`` and fit the decay rate.

    Rows where the norm falls below the extinction floor report
    ``gamma_hat = inf``.  ``workers`` (default from ``HYPERSTAB_WORKERS``)
    runs the evolutions in separate processes; results do not depend on it.
    """
    direction = [list(row) for row in direction]
    if len(direction) != spec0.n or any(len(row) != spec0.n for row in direction):
        raise ValueError(f"direction must be {spec0.n}x{spec0.n}")
    if not allow_diagonal:
        for j in range(spec0.n):
            c = direction[j][j]
            if not (c == 0 or (isinstance(c, str) and c.strip() in ("0", "0.0"))):
                raise ValueError("direction has a nonzero diagonal; pass allow_diagonal=True to override")
    if check_extinction:
        res = extinction_order(spec0.decoupled() if not spec0.is_decoupled() else spec0)
        if res.order is None:
            raise ValueError(f"{spec0.name}: unperturbed system does not die out in finite time")
    if workers is None:
        workers = int(os.environ.get("HYPERSTAB_WORKERS", "1"))
    jobs = [(spec0, direction, float(e), tau, t_end, dt, phi.values) for e in eps_list]
    if workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


# --------------------------------------------------------------- smoothing


@dataclass
class SmoothingReport:
    nxs: List[int]
    times: np.ndarray
    seminorms: np.ndarray          # (levels, nt)
    ratios: np.ndarray             # (levels - 1, nt): finer / coarser
    stable: np.ndarray             # (nt,) all ratios within band
    T_hat: Optional[float]
    K_hat: List[float]
    levy_ok: bool
    band: float

    @property
    def converged(self) -> bool:
        return self.T_hat is not None

    @property
    def K_spread(self) -> float:
        """Relative change of ``K̂`` between the two finest resolutions."""
        if len(self.K_hat) < 2 or not all(np.isfinite(self.K_hat[-2:])):
            return math.inf
        return abs(self.K_hat[-1] - self.K_hat[-2]) / max(abs(self.K_hat[-2]), 1e-300)


def smoothing_probe(spec: SystemSpec, phi: Callable[[np.ndarray], np.ndarray], tau: float,
                    t_end: float, dt: float, refinements: int = 3, nx: int = 201,
                    band: float = 0.2) -> SmoothingReport:
    """Track the C¹ seminorm of the solution at nested resolutions.

    ``phi(x)`` returns an ``(n, len(x))`` array; resolution ``k`` uses
    ``(nx - 1) 2^k + 1`` points and step ``dt / 2^k``.  A time counts as
    resolution-stable when every finer/coarser seminorm ratio lies within
    ``1 ± band``; ``T_hat`` is the earliest time after which all recorded
    times are stable.  ``K_hat[k]`` is the largest seminorm over ``[T_hat, t_end]``
    divided by the L² norm of the data at that resolution.
    """
    if refinements < 2:
        raise ValueError("need at least 2 resolutions")
    levy_ok = bool(check_levy(spec).passed)
    nxs, series, phinorm = [], [], []
    common = None
    for k in range(refinements):
        nk = (nx - 1) * 2 ** k + 1
        data = Field(np.atleast_2d(phi(grid(nk))), tau)
        traj = evolve(spec, data, tau, t_end, dt / 2 ** k, save_every=10 ** 9)
        stride = 2 ** k
        sem = traj.c1[::stride]
        times = traj.step_times[::stride]
        if common is None:
            common = times
        n = min(len(common), len(sem))
        common = common[:n]
        series = [s[:n] for s in series] + [sem[:n]]
        nxs.append(nk)
        phinorm.append(l2_norm(data))
    sem = np.array(series)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = sem[1:] / sem[:-1]
    stable = np.all(np.abs(ratios - 1.0) <= band, axis=0)
    T_hat = None
    if stable[-1]:
        bad = np.flatnonzero(~stable)
        first = 0 if bad.size == 0 else bad[-1] + 1
        T_hat = float(common[first])
    if T_hat is None:
        K_hat = [math.inf] * len(nxs)
    else:
        sel = common >= T_hat - 1e-12
        K_hat = [float(sem[k, sel].max() / phinorm[k]) if phinorm[k] > 0 else 0.0 for k in range(len(nxs))]
    return SmoothingReport(nxs, common, sem, ratios, stable, T_hat, K_hat, levy_ok, band)


# ------------------------------------------------ integral representation


def _traj_sampler(traj: Trajectory):
    """Bilinear interpolation of a trajectory saved at every step."""
    if len(traj.times) != len(traj.step_times):
        raise ValueError("trajectory must store every step (save_every=1)")
    vals = traj.values  # (nt, n, nx)
    t0, dt = traj.step_times[0], traj.dt
    nt, _, nx = vals.shape
    dx = 1.0 / (nx - 1)

    def sample(k, X, T):
        s = np.clip((T - t0) / dt, 0, nt - 1)
        i0 = np.minimum(np.floor(s).astype(int), nt - 2)
        wt = s - i0
        q = np.clip(X / dx, 0, nx - 1)
        m0 = np.minimum(np.floor(q).astype(int), nx - 2)
        wx = q - m0
        f = vals[:, k, :]
        lo = (1 - wx) * f[i0, m0] + wx * f[i0, m0 + 1]
        hi = (1 - wx) * f[i0 + 1, m0] + wx * f[i0 + 1, m0 + 1]
        return (1 - wt) * lo + wt * hi

    return sample


def _representation_terms(spec: SystemSpec, traj: Trajectory, times, h):
    if traj.t_end - traj.tau < 1.0 / spec.lambda0 - 1e-12:
        raise ValueError("time slab shorter than one transit time 1/lambda0")
    times = np.atleast_1d(np.asarray(traj.step_times[-1:] if times is None else times, dtype=float))
    h = traj.dt if h is None else h
    sample = _traj_sampler(traj)
    nx = traj.nx
    x = grid(nx)
    X0, T0 = np.meshgrid(x, times, indexing="ij")
    X0, T0 = X0.ravel(), T0.ravel()
    Q = np.zeros((times.size, spec.n, nx))
    D = np.zeros((times.size, spec.n, nx))
    P = spec.pmat
    st, t_start, dt = traj.step_times, traj.tau, traj.dt
    for j in range(spec.n):
        paths = trace_paths(lambda xx, tt, j=j: spec.speed(j, xx, tt), X0, T0, t_start, h)
        C = path_weights(spec, j, paths)
        valid = paths.valid
        Xs = np.where(valid, paths.xs, 0.0)
        Ts = np.where(valid, paths.ts, t_start)
        cols = np.arange(X0.size)
        cfoot = C[paths.nvalid - 1, cols]
        fx, ft = paths.foot_x, paths.foot_t
        q = np.empty(X0.size)
        inner = paths.kind == 0
        q[inner] = sample(j, fx[inner], np.full(inner.sum(), t_start))
        if (~inner).any():
            s = np.clip((ft[~inner] - t_start) / dt, 0, len(st) - 1)
            i0 = np.minimum(np.floor(s).astype(int), len(st) - 2)
            w = s - i0
            pu = np.zeros((~inner).sum())
            for k in np.flatnonzero(P[j]):
                tr = traj.right[:, k] if k < spec.m else traj.left[:, k]
                pu += P[j, k] * ((1 - w) * tr[i0] + w * tr[i0 + 1])
            q[~inner] = pu
        Q[:, j, :] = (cfoot * q).reshape(nx, times.size).T

        g = np.zeros_like(Xs)
        for k in range(spec.n):
            if k != j and not is_zero(spec.b[j][k]):
                g += spec.coupling(j, k, Xs, Ts) * sample(k, Xs, Ts)
        seg = np.where(valid[1:], Ts[:-1] - Ts[1:], 0.0)
        f = np.where(valid, np.nan_to_num(C) * g, 0.0)
        integral = np.sum(0.5 * (f[1:] + f[:-1]) * seg, axis=0)
        D[:, j, :] = (-integral).reshape(nx, times.size).T
    return times, Q, D


def operator_D_apply(spec: SystemSpec, traj: Trajectory, times=None, h: Optional[float] = None) -> np.ndarray:
    """Coupling integral along characteristics for the gridded ``traj``; shape ``(nt, n, nx)``."""
    return _representation_terms(spec, traj, times, h)[2]


def operator_Q_apply(spec: SystemSpec, traj: Trajectory, times=None, h: Optional[float] = None) -> np.ndarray:
    """Boundary-or-initial value carried along characteristics; shape ``(nt, n, nx)``."""
    return _representation_terms(spec, traj, times, h)[1]


def representation_residual(spec: SystemSpec, traj: Trajectory, times=None,
                            h: Optional[float] = None) -> float:
    """``max |u - Qu - Du|`` over the grid at the given stored times."""
    times, Q, D = _representation_terms(spec, traj, times, h)
    u = np.array([traj.field_at(t).values for t in times])
    return float(np.abs(u - Q - D).max())
