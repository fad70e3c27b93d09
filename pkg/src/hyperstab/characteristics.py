"""Characteristic curves and the exponential weights along them.

Characteristics are traced in time, ``dx/dθ = a_j(x, θ)``, backward from a
point ``(x, t)`` with a fixed-step classical RK4 integrator.  A curve stops
either on the initial line ``θ = t_floor`` or where it leaves ``[0, 1]``; the
crossing inside the last step is located by bisection on the step length.

The weight ``c_j`` is ``exp(-∫ b_jj dθ)`` along the curve, which is the same
integral as ``exp ∫ (b_jj / a_j) dη`` in the space parametrization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .system import SystemSpec

__all__ = [
    "ExitEvent", "Paths", "TraceError",
    "trace_back", "trace_forward", "trace_paths", "path_weights",
    "weight_c", "weight_d", "INITIAL", "LEFT", "RIGHT",
]

INITIAL = "initial_time"
LEFT = "left_boundary"
RIGHT = "right_boundary"
_KINDS = (INITIAL, LEFT, RIGHT)

X_TOL = 1e-12


class TraceError(ArithmeticError):
    """The speed evaluated to a non-finite value while tracing."""


@dataclass(frozen=True)
class ExitEvent:
    """Where a backward characteristic leaves the domain.

    ``path`` is an ``(L, 2)`` array of ``(x, θ)`` nodes starting at the traced
    point and ending at the foot.
    """

    kind: str
    foot_x: float
    foot_t: float
    path: np.ndarray

    @property
    def start(self):
        return float(self.path[0, 0]), float(self.path[0, 1])


@dataclass
class Paths:
    """Vectorized tracing result for ``N`` start points.

    ``xs`` and ``ts`` have shape ``(L + 1, N)``; row 0 holds the start points
    and column ``i`` is valid up to row ``nvalid[i] - 1`` (the foot), NaN after.
    ``kind`` is 0 (initial line), 1 (x = 0) or 2 (x = 1).
    """

    xs: np.ndarray
    ts: np.ndarray
    nvalid: np.ndarray
    kind: np.ndarray

    @property
    def foot_x(self) -> np.ndarray:
        return self.xs[self.nvalid - 1, np.arange(self.xs.shape[1])]

    @property
    def foot_t(self) -> np.ndarray:
        return self.ts[self.nvalid - 1, np.arange(self.ts.shape[1])]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.xs.shape[0])[:, None] < self.nvalid[None, :]


def _speed(speed_fn, x, t):
    a = np.asarray(speed_fn(x, t), dtype=float)
    if not np.all(np.isfinite(a)):
        raise TraceError("speed evaluated to a non-finite value")
    return np.broadcast_to(a, np.shape(x))


def _rk4(speed_fn, x, t, h):
    """One RK4 step of dx/dθ = a(x, θ) from θ = t to θ = t + h (h may be negative)."""
    k1 = _speed(speed_fn, x, t)
    k2 = _speed(speed_fn, x + 0.5 * h * k1, t + 0.5 * h)
    k3 = _speed(speed_fn, x + 0.5 * h * k2, t + 0.5 * h)
    k4 = _speed(speed_fn, x + h * k3, t + h)
    return x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def _bisect_crossing(speed_fn, x, t, h, target):
    """Fractions σ in (0, 1] with RK4(x, t, -σh) within X_TOL of ``target``."""
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    sigma = hi.copy()
    xe = _rk4(speed_fn, x, t, -h)
    done = np.abs(xe - target) <= X_TOL
    inside_sign = np.sign(x - target)
    for _ in range(200):
        if done.all():
            break
        mid = 0.5 * (lo + hi)
        xm = _rk4(speed_fn, x, t, -mid * h)
        hit = np.abs(xm - target) <= X_TOL
        sigma = np.where(~done & hit, mid, sigma)
        done = done | hit
        still_in = np.sign(xm - target) == inside_sign
        lo = np.where(still_in, mid, lo)
        hi = np.where(still_in, hi, mid)
        # once the bracket collapses below rounding the crossing is as good as it gets
        collapsed = ~done & (hi - lo <= 1e-16)
        sigma = np.where(collapsed, hi, sigma)
        done = done | collapsed
    return sigma


def trace_paths(speed_fn, x0, t0, t_floor, h: float) -> Paths:
    """Trace ``dx/dθ = speed_fn(x, θ)`` backward from every ``(x0[i], t0[i])``.

    ``t_floor`` may be a scalar or per-point array.  Each curve takes steps of
    ``h`` (the last one shortened to land on ``t_floor``) until it reaches the
    initial line or leaves ``[0, 1]``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x0, dtype=float).ravel()
    t = np.array(t0, dtype=float).ravel()
    N = x.size
    floor = np.broadcast_to(np.asarray(t_floor, dtype=float), t.shape).astype(float)
    kind = np.zeros(N, dtype=int)
    hist_x = [x.copy()]
    hist_t = [t.copy()]
    nvalid = np.ones(N, dtype=int)

    a0 = _speed(speed_fn, x, t)
    on_left = (x <= X_TOL) & (a0 > 0)
    on_right = (x >= 1 - X_TOL) & (a0 < 0)
    kind[on_left] = 1
    kind[on_right] = 2
    hist_x[0] = np.where(on_left, 0.0, np.where(on_right, 1.0, x))
    active = ~(on_left | on_right) & (t > floor)

    cur_x = hist_x[0].copy()
    cur_t = t.copy()
    while active.any():
        idx = np.flatnonzero(active)
        xa, ta = cur_x[idx], cur_t[idx]
        remaining = ta - floor[idx]
        hh = np.minimum(h, remaining)
        xn = _rk4(speed_fn, xa, ta, -hh)
        tn = np.where(hh == remaining, floor[idx], ta - hh)

        left = xn <= X_TOL
        right = xn >= 1 - X_TOL
        out = left | right
        if out.any():
            target = np.where(left[out], 0.0, 1.0)
            sigma = _bisect_crossing(speed_fn, xa[out], ta[out], hh[out], target)
            xn[out] = target
            tn[out] = np.where(sigma == 1.0, tn[out], ta[out] - sigma * hh[out])
            k = np.where(left[out], 1, 2)
            kind[idx[out]] = k

        new_x = np.full(N, np.nan)
        new_t = np.full(N, np.nan)
        new_x[idx] = xn
        new_t[idx] = tn
        hist_x.append(new_x)
        hist_t.append(new_t)
        nvalid[idx] += 1
        cur_x[idx] = xn
        cur_t[idx] = tn
        finished = out | (tn <= floor[idx])
        active[idx[finished]] = False

    return Paths(np.array(hist_x), np.array(hist_t), nvalid, kind)


def path_weights(spec: SystemSpec, j: int, paths: Paths) -> np.ndarray:
    """``c_j`` at every path node relative to the start point (1 at row 0).

    Trapezoid rule in time on the stored polyline; NaN past each foot.
    """
    xs = np.where(paths.valid, paths.xs, 0.0)
    ts = np.where(paths.valid, paths.ts, 0.0)
    bjj = spec.coupling(j, j, xs, ts)
    seg = 0.5 * (bjj[1:] + bjj[:-1]) * (ts[:-1] - ts[1:])
    seg = np.where(paths.valid[1:], seg, 0.0)
    integral = np.vstack([np.zeros((1, xs.shape[1])), np.cumsum(seg, axis=0)])
    return np.where(paths.valid, np.exp(-integral), np.nan)


def _as_event(paths: Paths, i: int = 0) -> ExitEvent:
    L = paths.nvalid[i]
    path = np.column_stack([paths.xs[:L, i], paths.ts[:L, i]])
    return ExitEvent(_KINDS[paths.kind[i]], float(path[-1, 0]), float(path[-1, 1]), path)


def _speed_fn(spec: SystemSpec, j: int):
    return lambda x, t: spec.speed(j, x, t)


def trace_back(spec: SystemSpec, j: int, x: float, t: float, t_floor: float, h: float) -> ExitEvent:
    """Trace the ``j``-th characteristic backward from ``(x, t)`` to where it exits."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    if not t > t_floor:
        raise ValueError("need t > t_floor")
    if not 0 <= j < spec.n:
        raise IndexError(f"component {j} out of range")
    return _as_event(trace_paths(_speed_fn(spec, j), [x], [t], t_floor, h))


def trace_forward(spec: SystemSpec, j: int, x: float, t: float, t_end: float, h: float) -> float:
    """Integrate the ``j``-th characteristic forward in time from ``(x, t)`` to ``t_end``.

    No boundary handling; used to check reversibility of :func:`trace_back`.
    """
    fn = _speed_fn(spec, j)
    xv = np.array([float(x)])
    tv = float(t)
    while tv < t_end:
        step = min(h, t_end - tv)
        xv = _rk4(fn, xv, np.array([tv]), step)
        tv = t_end if step == t_end - tv else tv + step
    return float(xv[0])


def weight_c(spec: SystemSpec, j: int, event: ExitEvent, x: float, t: float) -> float:
    """``c_j`` at the foot of ``event`` seen from ``(x, t)``."""
    start = event.path[0]
    if abs(start[0] - x) > 1e-9 or abs(start[1] - t) > 1e-9:
        raise ValueError("event was not traced from (x, t)")
    xs, ts = event.path[:, 0], event.path[:, 1]
    bjj = spec.coupling(j, j, xs, ts)
    integral = float(np.sum(0.5 * (bjj[1:] + bjj[:-1]) * (ts[:-1] - ts[1:])))
    return float(np.exp(-integral))


def weight_d(spec: SystemSpec, j: int, xi: float, x: float, t: float, path: np.ndarray) -> float:
    """``d_j(ξ, x, t) = c_j(ξ, x, t) / a_j(ξ, ω_j(ξ, x, t))`` for ``ξ`` on ``path``."""
    path = np.asarray(path, dtype=float)
    xs, ts = path[:, 0], path[:, 1]
    if abs(xs[0] - x) > 1e-9 or abs(ts[0] - t) > 1e-9:
        raise ValueError("path does not start at (x, t)")
    lo, hi = min(xs[0], xs[-1]), max(xs[0], xs[-1])
    if not lo - 1e-12 <= xi <= hi + 1e-12:
        raise ValueError(f"xi={xi} is not on the path")
    if len(xs) == 1:
        theta = ts[0]
        integral = 0.0
    else:
        # x is strictly monotone along a characteristic
        d = xs - xi
        seg = int(np.flatnonzero(d[:-1] * d[1:] <= 0)[0])
        dx = xs[seg + 1] - xs[seg]
        frac = 0.0 if dx == 0 else (xi - xs[seg]) / dx
        theta = ts[seg] + frac * (ts[seg + 1] - ts[seg])
        bjj = spec.coupling(j, j, xs, ts)
        integral = float(np.sum(0.5 * (bjj[1:seg + 1] + bjj[:seg]) * (ts[:seg] - ts[1:seg + 1])))
        b_xi = float(spec.coupling(j, j, xi, theta))
        integral += 0.5 * (bjj[seg] + b_xi) * (ts[seg] - theta)
    return float(np.exp(-integral) / spec.speed(j, xi, theta))
