"""Config-driven experiment runner.

    hyperstab ACTION --config PATH [--out PREFIX] [--seed N]
    hyperstab list

Configs are YAML mappings.  A minimal one::

    system: {builtin: transport}
    grid: {nx: 401, cfl: 1.0}
    time: {tau: 0.0, t_end: 1.5}
    initial: ["sin(pi*x)"]

Exit status is 0 when the action ran (including runs that blew up, which
are recorded in the outputs) and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import spectral, stability
from .expr import ExprError, parse
from .solver import CFLError, Field, evolve, grid, rough_profile
from .system import SpecError, SystemSpec, builtin, list_builtins

ACTIONS = ("simulate", "extinction", "decay", "sweep", "spectrum", "smoothing", "classify")
TOP_KEYS = {"action", "system", "grid", "time", "initial", "params", "seed", "output"}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        self.key = key
        self.line = line
        super().__init__(message)


# ------------------------------------------------------------- loading


def _line_map(node, prefix="", out=None) -> Dict[str, int]:
    """Key path (``a.b.0``) → 1-based source line, from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}.{i}" if prefix else str(i)
            out[path] = v.start_mark.line + 1
            _line_map(v, path, out)
    return out


class Config:
    """Parsed config plus source locations for error messages."""

    def __init__(self, data: Dict[str, Any], lines: Dict[str, int], source: str):
        self.data = data
        self.lines = lines
        self.source = source

    @classmethod
    def load(cls, path) -> "Config":
        text = Path(path).read_text(encoding="utf-8")
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            line = mark.line + 1 if mark is not None else None
            raise ConfigError("", f"YAML syntax error: {exc.problem}", line) from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("", "top level must be a mapping", 1)
        return cls(data, _line_map(node) if node is not None else {}, str(path))

    def error(self, key: str, message: str) -> ConfigError:
        line = None
        k = key
        while k and line is None:
            line = self.lines.get(k)
            k = k.rpartition(".")[0]
        return ConfigError(key, message, line)

    def get(self, key: str, default=None, required: bool = False):
        cur: Any = self.data
        for part in key.split("."):
            if isinstance(cur, dict) and part in cur:
                cur = cur[part]
            elif isinstance(cur, list) and part.isdigit() and int(part) < len(cur):
                cur = cur[int(part)]
            else:
                if required:
                    raise self.error(key, "missing required key")
                return default
        return cur

    def number(self, key: str, default=None, required: bool = False, positive: bool = False,
               integer: bool = False):
        v = self.get(key, default, required)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.error(key, f"expected a number, got {v!r}")
        if not math.isfinite(float(v)):
            raise self.error(key, "must be finite")
        if integer:
            if float(v) != int(v):
                raise self.error(key, f"expected an integer, got {v!r}")
            v = int(v)
        else:
            v = float(v)
        if positive and v <= 0:
            raise self.error(key, "must be positive")
        return v

    def numbers(self, key: str, default=None, required: bool = False) -> Optional[List[float]]:
        v = self.get(key, default, required)
        if v is None:
            return None
        if not isinstance(v, list) or not v:
            raise self.error(key, "expected a non-empty list of numbers")
        return [self.number(f"{key}.{i}") for i in range(len(v))]


# ---------------------------------------------------------- config parts


def _system(cfg: Config) -> SystemSpec:
    sysd = cfg.get("system", required=True)
    if not isinstance(sysd, dict):
        raise cfg.error("system", "expected a mapping with 'builtin' or 'inline'")
    if ("builtin" in sysd) == ("inline" in sysd):
        raise cfg.error("system", "give exactly one of 'builtin' or 'inline'")
    try:
        if "builtin" in sysd:
            params = sysd.get("params") or {}
            if not isinstance(params, dict):
                raise cfg.error("system.params", "expected a mapping")
            spec = builtin(str(sysd["builtin"]), **params)
        else:
            inline = sysd["inline"]
            if not isinstance(inline, dict):
                raise cfg.error("system.inline", "expected a mapping")
            spec = SystemSpec.from_config(inline)
    except SpecError as exc:
        raise cfg.error("system", str(exc)) from None
    if sysd.get("decoupled"):
        spec = spec.decoupled()
    return spec


def _grid(cfg: Config, spec: SystemSpec, tau: float, t_end: float):
    nx = cfg.number("grid.nx", required=True, integer=True)
    if nx < 3:
        raise cfg.error("grid.nx", "need nx >= 3")
    dx = 1.0 / (nx - 1)
    dt = cfg.number("grid.dt", positive=True)
    cfl = cfg.number("grid.cfl", positive=True)
    if (dt is None) == (cfl is None):
        raise cfg.error("grid", "give exactly one of 'dt' or 'cfl'")
    if dt is None:
        x = grid(nx)
        ts = np.linspace(tau, max(t_end, tau), 33)
        X, T = np.meshgrid(x, ts)
        amax = max(float(np.abs(spec.speed(j, X, T)).max()) for j in range(spec.n))
        dt = cfl * dx / amax
    return nx, dt


def _time(cfg: Config):
    tau = cfg.number("time.tau", default=0.0)
    t_end = cfg.number("time.t_end", required=True)
    if t_end < tau:
        raise cfg.error("time.t_end", "must not precede tau")
    return tau, t_end


def _profile(cfg: Config, key: str, item):
    """Callable ``x -> values`` for one component of the initial data."""
    if isinstance(item, bool):
        raise cfg.error(key, "expected an expression or rough-profile mapping")
    if isinstance(item, (int, float)):
        return lambda x, v=float(item): np.full_like(x, v)
    if isinstance(item, str):
        try:
            e = parse(item)
        except ExprError as exc:
            raise cfg.error(key, f"bad expression: {exc}") from None
        return lambda x, e=e: np.broadcast_to(e(x, 0.0), x.shape).astype(float)
    if isinstance(item, dict):
        name = item.get("rough")
        if name not in ("step", "sawtooth"):
            raise cfg.error(key, "rough profile must be 'step' or 'sawtooth'")
        x0 = item.get("x0", 0.5)
        if isinstance(x0, bool) or not isinstance(x0, (int, float)):
            raise cfg.error(f"{key}.x0", "expected a number")
        factor = _profile(cfg, f"{key}.times", item.get("times", 1.0))
        return lambda x: factor(x) * rough_profile(name, x, float(x0))
    raise cfg.error(key, "expected an expression or rough-profile mapping")


def _initial(cfg: Config, spec: SystemSpec):
    items = cfg.get("initial", required=True)
    if not isinstance(items, list):
        items = [items]
    if len(items) != spec.n:
        raise cfg.error("initial", f"need {spec.n} components, got {len(items)}")
    fns = [_profile(cfg, f"initial.{i}", it) for i, it in enumerate(items)]

    def phi(x):
        return np.array([f(x) for f in fns], dtype=float)

    return phi


# ------------------------------------------------------------- outputs


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_rows(path: Path, header: Sequence[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _f(v: float) -> str:
    return f"{v:.6g}"


def _z(z: complex) -> str:
    # roundoff-level imaginary parts are not printed
    if abs(z.imag) <= 1e-10 * max(1.0, abs(z.real)):
        return _f(z.real)
    return f"{_f(z.real)}{z.imag:+.6g}j"


# ------------------------------------------------------------- actions


def _simulate_common(cfg: Config, spec: SystemSpec):
    tau, t_end = _time(cfg)
    nx, dt = _grid(cfg, spec, tau, t_end)
    phi = _initial(cfg, spec)
    save_every = cfg.number("params.save_every", default=1, integer=True)
    try:
        traj = evolve(spec, Field(phi(grid(nx)), tau), tau, t_end, dt, save_every=max(1, save_every))
    except CFLError as exc:
        raise cfg.error("grid", str(exc)) from None
    return traj


def act_simulate(cfg, spec, prefix: Path, seed):
    traj = _simulate_common(cfg, spec)
    traj.write_csv(f"{prefix}_trajectory.csv")
    traj.write_norms_csv(f"{prefix}_norms.csv")
    K, omega = stability.growth_bound(traj)
    summary = {"system": spec.name, "final_time": traj.t_end, "final_l2": float(traj.l2[-1]),
               "initial_l2": float(traj.l2[0]), "diverged": traj.diverged,
               "diverged_at": traj.diverged_at, "dt": traj.dt, "K_hat": K, "omega_hat": omega}
    _dump_json(summary, Path(f"{prefix}_summary.json"))
    flag = " BLOWUP" if traj.diverged else ""
    return f"simulate {spec.name}: t={_f(traj.t_end)} l2={traj.l2[-1]:.3e}{flag}"


def act_decay(cfg, spec, prefix, seed):
    traj = _simulate_common(cfg, spec)
    traj.write_norms_csv(f"{prefix}_norms.csv")
    window = cfg.numbers("params.window")
    if window is not None and len(window) != 2:
        raise cfg.error("params.window", "expected [start, end]")
    try:
        fit = stability.fit_decay(traj, tuple(window) if window else None)
    except stability.DecayFitError as exc:
        _dump_json({"error": str(exc), "diverged": traj.diverged}, Path(f"{prefix}_decay.json"))
        return f"decay {spec.name}: fit failed ({exc})"
    out = {"gamma_hat": fit.gamma_hat, "m_hat": fit.m_hat, "r2": fit.r2, "window": list(fit.window),
           "n_samples": fit.n_samples, "diverged": traj.diverged}
    _dump_json(out, Path(f"{prefix}_decay.json"))
    flag = " BLOWUP" if traj.diverged else ""
    return f"gamma_hat={_f(fit.gamma_hat)} r2={fit.r2:.6f}{flag}"


def act_extinction(cfg, spec, prefix, seed):
    note = ""
    if not spec.is_decoupled():
        spec = spec.decoupled()
        note = " (decoupled part)"
    kmax = cfg.number("params.kmax", default=8, integer=True)
    r = cfg.number("params.r", default=5, integer=True)
    tol = cfg.number("params.tol", default=1e-8, positive=True)
    if kmax < 1 or r < 3:
        raise cfg.error("params", "need kmax >= 1 and r >= 3")
    res = stability.extinction_order(spec, kmax=kmax, r=r, tol=tol, seed=seed)
    Path(f"{prefix}_extinction.json").write_text(res.to_json() + "\n", encoding="utf-8")
    if res.order is None:
        return f"extinction order: none up to kmax={kmax}{note}"
    return f"extinction order k={res.order}{note}"


def act_sweep(cfg, spec, prefix, seed):
    tau, t_end = _time(cfg)
    nx, dt = _grid(cfg, spec, tau, t_end)
    phi = _initial(cfg, spec)
    eps = cfg.numbers("params.eps", required=True)
    direction = cfg.get("params.direction", required=True)
    if (not isinstance(direction, list) or len(direction) != spec.n
            or any(not isinstance(row, list) or len(row) != spec.n for row in direction)):
        raise cfg.error("params.direction", f"expected a {spec.n}x{spec.n} matrix")
    allow = bool(cfg.get("params.allow_diagonal", False))
    try:
        rows = stability.sweep(spec, direction, eps, tau, t_end, dt, Field(phi(grid(nx)), tau),
                               allow_diagonal=allow)
    except (ValueError, SpecError) as exc:
        raise cfg.error("params", str(exc)) from None
    _write_rows(Path(f"{prefix}_sweep.csv"), ["eps", "gamma_hat", "m_hat", "r2", "blowup", "extinct"],
                [(r.eps, r.gamma_hat, r.m_hat, r.r2, int(r.blowup), int(r.extinct)) for r in rows])
    parts = [f"{_f(r.eps)}:{'extinct' if r.extinct else _f(r.gamma_hat)}" for r in rows]
    return "sweep gamma_hat " + " ".join(parts)


def _box(cfg):
    v = cfg.numbers("params.box")
    if v is None:
        return None
    if len(v) != 4:
        raise cfg.error("params.box", "expected [re_lo, re_hi, im_lo, im_hi]")
    try:
        return spectral.Box(*v)
    except ValueError as exc:
        raise cfg.error("params.box", str(exc)) from None


def act_spectrum(cfg, spec, prefix, seed):
    box = _box(cfg)
    mu, nu = cfg.number("params.mu"), cfg.number("params.nu")
    a, b = cfg.number("params.a"), cfg.number("params.b")
    gnu = cfg.number("params.gamma_nu")
    out: Dict[str, Any] = {}
    if mu is not None and nu is not None:
        rep = spectral.rightmost_root(spectral.QuasiPoly.example(mu, nu), box)
        eig = spectral.eigen_rightmost(mu, nu, box)
        out = {"quasi": rep.to_dict(), "eigen": eig.to_dict(), "mu": mu, "nu": nu}
        z, ze = rep.rightmost, eig.rightmost
        line = f"rightmost z={_z(z)} (lambda={_f(z.real / 2)})"
        if ze is not None:
            line += f"; eigen rightmost z={_z(ze)} (lambda={_f(ze.real / 2)})"
    elif a is not None and b is not None:
        rep = spectral.rightmost_root(spectral.QuasiPoly(a, b), box)
        out = {"quasi": rep.to_dict()}
        z = rep.rightmost
        line = "no roots in box" if z is None else f"rightmost z={_z(z)} (lambda={_f(z.real / 2)})"
    elif gnu is not None:
        g = spectral.gamma_root(gnu)
        rep = spectral.rightmost_root(spectral.QuasiPoly.gamma_form(gnu), box, deflate=(0j,))
        out = {"gamma": g, "lambda": None if g is None else g / 2, "quasi": rep.to_dict()}
        line = "gamma: none (nu <= 1)" if g is None else f"gamma={_f(g)} lambda={_f(g / 2)}"
    else:
        raise cfg.error("params", "spectrum needs mu and nu, a and b, or gamma_nu")
    _dump_json(out, Path(f"{prefix}_spectrum.json"))
    return line


def act_classify(cfg, spec, prefix, seed):
    mus = cfg.numbers("params.mus") or [cfg.number("params.mu", required=True)]
    nus = cfg.numbers("params.nus") or [cfg.number("params.nu", required=True)]
    if any(v <= 0 for v in mus + nus):
        raise cfg.error("params", "mu and nu must be positive")
    rows = spectral.classify_grid(mus, nus)
    spectral.write_classification_csv(rows, f"{prefix}_classification.csv")
    if len(rows) == 1:
        r = rows[0]
        return f"mu={_f(r.mu)} nu={_f(r.nu)}: {r.by_threshold} by threshold, {r.verdict} by spectrum"
    counts = {k: sum(1 for r in rows if r.verdict == k) for k in ("stable", "unstable")}
    return f"classified {len(rows)} points: {counts['stable']} stable, {counts['unstable']} unstable"


def act_smoothing(cfg, spec, prefix, seed):
    tau, t_end = _time(cfg)
    nx, dt = _grid(cfg, spec, tau, t_end)
    phi = _initial(cfg, spec)
    refinements = cfg.number("params.refinements", default=3, integer=True)
    band = cfg.number("params.band", default=0.2, positive=True)
    if refinements < 2:
        raise cfg.error("params.refinements", "need at least 2")
    rep = stability.smoothing_probe(spec, phi, tau, t_end, dt, refinements=refinements, nx=nx, band=band)
    header = ["time"] + [f"c1_nx{n}" for n in rep.nxs]
    _write_rows(Path(f"{prefix}_smoothing.csv"), header,
                [[float(t)] + [float(v) for v in rep.seminorms[:, i]] for i, t in enumerate(rep.times)])
    _dump_json({"nxs": rep.nxs, "T_hat": rep.T_hat, "K_hat": rep.K_hat, "levy_ok": rep.levy_ok,
                "band": rep.band, "final_ratios": [float(r) for r in rep.ratios[:, -1]]},
               Path(f"{prefix}_smoothing.json"))
    if rep.T_hat is None:
        ratios = " ".join(_f(float(r)) for r in rep.ratios[:, -1])
        return f"smoothing: no resolution-stable time (final ratios {ratios}; levy={'ok' if rep.levy_ok else 'fails'})"
    return f"smoothing: T_hat={_f(rep.T_hat)} K_hat={_f(rep.K_hat[-1])}"


HANDLERS = {
    "simulate": act_simulate, "extinction": act_extinction, "decay": act_decay,
    "sweep": act_sweep, "spectrum": act_spectrum, "smoothing": act_smoothing,
    "classify": act_classify,
}
_NO_SYSTEM = {"spectrum", "classify"}


def run(action: str, config_path, out: Optional[str] = None, seed: Optional[int] = None) -> str:
    """Execute one config; returns the summary line.  Raises ConfigError."""
    cfg = Config.load(config_path)
    unknown = sorted(set(cfg.data) - TOP_KEYS)
    if unknown:
        raise cfg.error(unknown[0], f"unknown key {unknown[0]!r}")
    declared = cfg.get("action")
    if declared is not None and declared != action:
        raise cfg.error("action", f"config is for action {declared!r}, not {action!r}")
    if seed is None:
        seed = cfg.number("seed", default=0, integer=True)
    prefix = out or cfg.get("output") or str(Path(config_path).with_suffix(""))
    prefix_path = Path(prefix)
    prefix_path.parent.mkdir(parents=True, exist_ok=True)
    spec = None
    if action not in _NO_SYSTEM or cfg.get("system") is not None:
        spec = _system(cfg)
    try:
        return HANDLERS[action](cfg, spec, prefix_path, seed)
    except (SpecError, ExprError) as exc:
        raise cfg.error("system", str(exc)) from None


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="hyperstab", description=__doc__.split("\n")[0])
    parser.add_argument("action", choices=ACTIONS + ("list",))
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--out", help="output path prefix")
    parser.add_argument("--seed", type=int, help="override the config seed")
    args = parser.parse_args(argv)

    if args.action == "list":
        for row in list_builtins():
            print(row)
        return 0
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return 2
    try:
        summary = run(args.action, args.config, args.out, args.seed)
    except FileNotFoundError as exc:
        print(f"{args.config}: cannot read config: {exc.strerror}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        where = f"{args.config}:{exc.line}" if exc.line else args.config
        key = f" [{exc.key}]" if exc.key else ""
        print(f"{where}:{key} {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
