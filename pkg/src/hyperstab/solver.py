"""Semi-Lagrangian method-of-characteristics solver.

Each time step traces every grid node back along its characteristic over one
step.  If the foot stays inside ``[0, 1]`` the new value is the weighted,
linearly interpolated old value; if the curve leaves through a boundary the
reflection condition supplies the value at the crossing time, interpolated
linearly between the old and new outgoing traces.  The coupling integral
along the curve uses old-level values (one explicit Picard sweep).

The update is linear in the old values, so one step is assembled as a sparse
matrix.  For autonomous systems that matrix is built once and reused.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .characteristics import path_weights, trace_paths
from .expr import Expr, parse
from .system import SystemSpec, is_zero

__all__ = [
    "Field", "Trajectory", "CompatibilityReport", "CFLError",
    "evolve", "l2_norm", "c1_seminorm", "check_compatibility",
    "grid", "rough_profile", "BLOWUP_LEVEL",
]

BLOWUP_LEVEL = 1e12
_SNAP = 1e-9


class CFLError(ValueError):
    """Time step too large for a characteristic to stay within one cell."""


def grid(nx: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, nx)


@dataclass
class Field:
    """Samples of ``u_j(x_i, t)`` on the uniform grid ``x_i = i / (nx - 1)``."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def x(self) -> np.ndarray:
        return grid(self.nx)

    @classmethod
    def from_functions(cls, funcs: Sequence, nx: int, time: float = 0.0) -> "Field":
        """Sample one function of ``x`` per component (callables or expression strings)."""
        x = grid(nx)
        rows = []
        for f in funcs:
            if isinstance(f, str):
                f = parse(f)
            if isinstance(f, Expr):
                rows.append(np.broadcast_to(f(x, time), x.shape))
            elif callable(f):
                rows.append(np.broadcast_to(np.asarray(f(x), dtype=float), x.shape))
            else:
                rows.append(np.full(nx, float(f)))
        return cls(np.array(rows, dtype=float), time)


def rough_profile(name: str, x: np.ndarray, x0: float = 0.5) -> np.ndarray:
    """Named non-smooth initial profiles: ``step`` (jump at ``x0``) and ``sawtooth``."""
    if name == "step":
        return np.where(x >= x0, 1.0, 0.0)
    if name == "sawtooth":
        # 1-periodic, jump of -1 at x0
        return (x - x0) - np.floor(x - x0) - 0.5
    raise ValueError(f"unknown rough profile {name!r}")


def _l2_from_values(v: np.ndarray, dx: float) -> float:
    sq = v * v
    total = sq[:, 1:-1].sum() + 0.5 * (sq[:, 0].sum() + sq[:, -1].sum())
    return math.sqrt(total * dx)


def _c1_from_values(v: np.ndarray, dx: float) -> float:
    d = np.empty_like(v)
    d[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * dx)
    d[:, 0] = (v[:, 1] - v[:, 0]) / dx
    d[:, -1] = (v[:, -1] - v[:, -2]) / dx
    return float(np.abs(d).max() + np.abs(v).max())


def l2_norm(f) -> float:
    """Trapezoid approximation of ``(sum_j ∫ u_j^2 dx)^(1/2)``."""
    v = f.values if isinstance(f, Field) else np.atleast_2d(np.asarray(f, dtype=float))
    if v.shape[1] < 2:
        raise ValueError("need at least 2 grid points")
    return _l2_from_values(v, 1.0 / (v.shape[1] - 1))


def c1_seminorm(f) -> float:
    """Max centered-difference slope plus max value, over all components."""
    v = f.values if isinstance(f, Field) else np.atleast_2d(np.asarray(f, dtype=float))
    if v.shape[1] < 3:
        raise ValueError("need at least 3 grid points")
    return _c1_from_values(v, 1.0 / (v.shape[1] - 1))


@dataclass
class Trajectory:
    """Stored solution fields plus per-step boundary traces and norms.

    ``times``/``values`` hold the saved fields (every ``save_every`` steps);
    ``step_times``, ``left``, ``right``, ``l2`` and ``c1`` are recorded at
    every step.  ``left[s, j]`` is ``u_j(0, step_times[s])``.
    """

    times: np.ndarray
    values: np.ndarray
    step_times: np.ndarray
    left: np.ndarray
    right: np.ndarray
    l2: np.ndarray
    c1: np.ndarray
    dt: float
    lambda0: float = 1.0
    diverged: bool = False
    diverged_at: Optional[float] = None
    spec_name: str = ""

    @property
    def fields(self) -> List[Field]:
        return [Field(v, t) for v, t in zip(self.values, self.times)]

    @property
    def final(self) -> Field:
        return Field(self.values[-1], float(self.times[-1]))

    @property
    def tau(self) -> float:
        return float(self.step_times[0])

    @property
    def t_end(self) -> float:
        return float(self.step_times[-1])

    @property
    def nx(self) -> int:
        return self.values.shape[2]

    def field_at(self, t: float) -> Field:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"no stored field at t={t}")
        return Field(self.values[i], float(self.times[i]))

    def write_csv(self, path) -> None:
        """Long-format export: ``time, x, component, value``."""
        x = grid(self.nx)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "x", "component", "value"])
            for t, v in zip(self.times, self.values):
                for j in range(v.shape[0]):
                    for xi, val in zip(x, v[j]):
                        w.writerow([repr(float(t)), repr(float(xi)), j + 1, repr(float(val))])

    def write_norms_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "l2", "c1_seminorm"])
            for t, a, b in zip(self.step_times, self.l2, self.c1):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


@dataclass
class CompatibilityReport:
    order0_residual: float
    order1_residual: float


# --------------------------------------------------------------- stepping


def _interp_weights(X: np.ndarray, dx: float, nx: int):
    s = X / dx
    idx = np.floor(s)
    w = s - idx
    up = w > 1 - _SNAP
    idx = np.where(up, idx + 1, idx)
    w = np.where(up | (w < _SNAP), 0.0, w)
    idx = idx.astype(int)
    top = idx >= nx - 1
    idx = np.where(top, nx - 2, idx)
    w = np.where(top, 1.0, w)
    bottom = idx < 0
    idx = np.where(bottom, 0, idx)
    w = np.where(bottom, 0.0, w)
    return idx, w


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
        keep = vals != 0
        self.rows.append(rows[keep].ravel())
        self.cols.append(cols[keep].ravel())
        self.vals.append(vals[keep].ravel())

    def matrix(self, size):
        if not self.rows:
            return sp.csr_matrix((size, size))
        return sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(size, size),
        )


def step_matrix(spec: SystemSpec, nx: int, t_n: float, dt: float, h: Optional[float] = None):
    """Sparse matrix advancing flattened values ``u[j * nx + i]`` from ``t_n`` to ``t_n + dt``."""
    h = dt if h is None else h
    x = grid(nx)
    dx = 1.0 / (nx - 1)
    size = spec.n * nx
    t1 = t_n + dt
    P = spec.pmat
    M = _Triplets()
    B = _Triplets()
    for j in range(spec.n):
        paths = trace_paths(lambda xx, tt, j=j: spec.speed(j, xx, tt), x, np.full(nx, t1), t_n, h)
        C = path_weights(spec, j, paths)
        valid = paths.valid
        X = np.where(valid, paths.xs, 0.0)
        T = np.where(valid, paths.ts, t_n)
        seg = np.where(valid[1:], T[:-1] - T[1:], 0.0)
        beta = np.zeros_like(X)
        beta[:-1] += 0.5 * seg
        beta[1:] += 0.5 * seg
        rows = j * nx + np.arange(nx)

        for k in range(spec.n):
            if k == j or is_zero(spec.b[j][k]):
                continue
            coef = np.where(valid, -beta * np.nan_to_num(C) * spec.coupling(j, k, X, T), 0.0)
            idx, w = _interp_weights(X, dx, nx)
            M.add(rows[None, :], k * nx + idx, coef * (1 - w))
            M.add(rows[None, :], k * nx + idx + 1, coef * w)

        cfoot = C[paths.nvalid - 1, np.arange(nx)]
        inner = paths.kind == 0
        idx, w = _interp_weights(paths.foot_x, dx, nx)
        M.add(rows[inner], j * nx + idx[inner], (cfoot * (1 - w))[inner])
        M.add(rows[inner], j * nx + idx[inner] + 1, (cfoot * w)[inner])

        bnd = ~inner
        if bnd.any():
            s = np.clip((paths.foot_t[bnd] - t_n) / dt, 0.0, 1.0)
            for k in range(spec.n):
                if P[j, k] == 0:
                    continue
                col = k * nx + (nx - 1 if k < spec.m else 0)
                M.add(rows[bnd], col, cfoot[bnd] * (1 - s) * P[j, k])
                B.add(rows[bnd], col, cfoot[bnd] * s * P[j, k])
    Mm = M.matrix(size)
    Bm = B.matrix(size)
    return (Mm + Bm @ Mm).tocsr()


def _max_speed(spec: SystemSpec, nx: int, tau: float, t_end: float) -> float:
    x = grid(nx)
    ts = np.linspace(tau, t_end, 33) if t_end > tau else np.array([tau])
    X, T = np.meshgrid(x, ts, indexing="ij")
    return float(max(np.abs(spec.speed(j, X, T)).max() for j in range(spec.n)))


def evolve(spec: SystemSpec, phi: Field, tau: float, t_end: float, dt: float,
           h: Optional[float] = None, save_every: int = 1,
           blowup: float = BLOWUP_LEVEL) -> Trajectory:
    """Evolve ``phi`` given at time ``tau`` up to ``t_end`` with steps ``dt``.

    If ``t_end - tau`` is not a whole number of steps, ``dt`` is reduced to the
    nearest step that fits.  Stepping stops early when any value exceeds
    ``blowup`` in magnitude; the partial trajectory is returned with
    ``diverged`` set.
    """
    if phi.n != spec.n:
        raise ValueError(f"initial data has {phi.n} components, system has {spec.n}")
    nx = phi.nx
    if nx < 3:
        raise ValueError("need nx >= 3")
    if t_end < tau:
        raise ValueError("t_end must not precede tau")
    if dt <= 0 or save_every < 1:
        raise ValueError("dt must be positive and save_every >= 1")
    span = t_end - tau
    ratio = span / dt
    nsteps = int(round(ratio))
    if abs(ratio - nsteps) > 1e-9 * max(1.0, ratio):
        nsteps = int(math.ceil(ratio))
        dt = span / nsteps
    dx = 1.0 / (nx - 1)
    amax = _max_speed(spec, nx, tau, t_end)
    if dt * amax > dx * (1 + 1e-12):
        raise CFLError(f"dt={dt:g} exceeds dx/max|a| = {dx / amax:g}")

    autonomous = spec.is_autonomous()
    A = step_matrix(spec, nx, tau, dt, h) if autonomous and nsteps else None

    u = phi.values.ravel().copy()
    step_times = [tau]
    left = [phi.values[:, 0].copy()]
    right = [phi.values[:, -1].copy()]
    l2 = [_l2_from_values(phi.values, dx)]
    c1 = [_c1_from_values(phi.values, dx)]
    times = [tau]
    saved = [phi.values.copy()]
    diverged = False
    diverged_at = None
    for step in range(nsteps):
        t_n = tau + step * dt
        t1 = t_end if step == nsteps - 1 else tau + (step + 1) * dt
        Ak = A if autonomous else step_matrix(spec, nx, t_n, dt, h)
        new = Ak @ u
        peak = np.abs(new).max()
        if not np.isfinite(peak):
            diverged, diverged_at = True, t1
            break
        u = new
        v = u.reshape(spec.n, nx)
        step_times.append(t1)
        left.append(v[:, 0].copy())
        right.append(v[:, -1].copy())
        l2.append(_l2_from_values(v, dx))
        c1.append(_c1_from_values(v, dx))
        last = step == nsteps - 1 or peak > blowup
        if (step + 1) % save_every == 0 or last:
            times.append(t1)
            saved.append(v.copy())
        if peak > blowup:
            diverged, diverged_at = True, t1
            break
    return Trajectory(
        times=np.array(times), values=np.array(saved), step_times=np.array(step_times),
        left=np.array(left), right=np.array(right), l2=np.array(l2), c1=np.array(c1),
        dt=dt, lambda0=spec.lambda0, diverged=diverged, diverged_at=diverged_at,
        spec_name=spec.name,
    )


def check_compatibility(spec: SystemSpec, phi: Field, tau: float) -> CompatibilityReport:
    """Residuals of the zero- and first-order corner compatibility conditions."""
    v = phi.values
    if v.shape[1] < 3:
        raise ValueError("need nx >= 3")
    x = phi.x
    dx = 1.0 / (phi.nx - 1)

    def residual(w):
        rhs = spec.boundary_rhs(w[:, -1], w[:, 0])
        lhs = np.array([w[j, 0] if spec.rightward(j) else w[j, -1] for j in range(spec.n)])
        return float(np.abs(lhs - rhs).max())

    dphi = np.gradient(v, dx, axis=1, edge_order=2)
    psi = np.empty_like(v)
    for j in range(spec.n):
        acc = spec.speed(j, x, tau) * dphi[j]
        for k in range(spec.n):
            if not is_zero(spec.b[j][k]):
                acc = acc + spec.coupling(j, k, x, tau) * v[k]
        psi[j] = -acc
    return CompatibilityReport(residual(v), residual(psi))
