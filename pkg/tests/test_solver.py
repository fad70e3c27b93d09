import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperstab.solver import (
    CFLError, Field, check_compatibility, c1_seminorm, evolve, grid, l2_norm, rough_profile,
)
from hyperstab.system import SystemSpec, builtin


def field(funcs, nx, time=0.0):
    return Field.from_functions(funcs, nx, time)


# ------------------------------------------------------------------ norms


def test_l2_constant_and_zero():
    assert l2_norm(Field(np.ones((1, 11)))) == pytest.approx(1.0, abs=1e-15)
    assert l2_norm(Field(np.zeros((2, 11)))) == 0.0


def test_l2_sine():
    assert l2_norm(field(["sin(pi*x)"], 1001)) == pytest.approx(math.sqrt(0.5), abs=1e-5)


def test_c1_examples():
    assert c1_seminorm(Field(np.zeros((1, 5)))) == 0.0
    assert c1_seminorm(field(["x"], 21)) == pytest.approx(2.0, abs=1e-12)
    x = grid(101)
    step = Field(rough_profile("step", x, 0.5)[None, :])
    assert c1_seminorm(step) >= 50


def test_field_rejects_nonfinite():
    with pytest.raises(ValueError):
        Field(np.array([[0.0, np.nan, 1.0]]))


# ------------------------------------------------------------ compatibility


def test_compatibility_zero_data():
    rep = check_compatibility(builtin("ex11", nu=1.0), Field(np.zeros((2, 11))), 0.0)
    assert rep.order0_residual == 0.0 and rep.order1_residual == 0.0


def test_compatibility_transport_sine():
    rep = check_compatibility(builtin("transport"), field(["sin(pi*x)"], 101), 0.0)
    assert rep.order0_residual == pytest.approx(0.0, abs=1e-15)


def test_compatibility_ex11_linear_data():
    rep = check_compatibility(builtin("ex11", nu=0.0), field(["x", "1"], 51), 0.0)
    assert rep.order0_residual == 0.0


def test_compatibility_detects_mismatch():
    rep = check_compatibility(builtin("transport"), field(["1 + x"], 51), 0.0)
    assert rep.order0_residual == pytest.approx(1.0)
    # psi = -phi' = -1 at x = 0 while the inflow value of psi must be 0
    assert rep.order1_residual == pytest.approx(1.0, abs=1e-9)


# --------------------------------------------------------------- transport


def test_transport_exact_on_grid():
    nx = 201
    dx = 1.0 / (nx - 1)
    tr = evolve(builtin("transport"), field(["sin(pi*x)"], nx), 0.0, 0.75, dx)
    x = grid(nx)
    for t, v in zip(tr.times, tr.values):
        exact = np.where(x > t, np.sin(np.pi * (x - t)), 0.0)
        assert np.abs(v[0] - exact).max() <= 1e-10


def test_transport_extinct_after_one():
    nx = 101
    tr = evolve(builtin("transport"), field(["exp(x)*cos(5*x)"], nx), 0.0, 1.5, 1.0 / (nx - 1))
    assert tr.l2[-1] <= 1e-10


def test_transport_convergence_first_order():
    # half-CFL steps: linear interpolation error accumulates at first order
    spec = builtin("transport")
    errs = []
    for nx in (101, 201, 401):
        dx = 1.0 / (nx - 1)
        tr = evolve(spec, field(["exp(-40*(x-0.3)*(x-0.3))"], nx), 0.0, 0.4, 0.5 * dx)
        x = grid(nx)
        exact = np.exp(-40 * (x - 0.7) ** 2)
        errs.append(np.abs(tr.values[-1, 0] - exact).max())
    assert errs[0] / errs[1] >= 1.8
    assert errs[1] / errs[2] >= 1.8


def test_f1ex1_closed_form():
    # u1 = phi(x - t), u2 = x phi(x - t) while x > t
    errs = []
    for nx in (101, 201):
        dx = 1.0 / (nx - 1)
        tr = evolve(builtin("f1ex1"), field(["sin(pi*x)", "x*sin(pi*x)"], nx), 0.0, 0.5, dx)
        x = grid(nx)
        t = tr.times[-1]
        ahead = x > t + 0.05
        phi = np.sin(np.pi * (x - t))[ahead]
        u = tr.values[-1][:, ahead]
        err = max(np.abs(u[0] - phi).max(), np.abs(u[1] - x[ahead] * phi).max())
        errs.append(err)
    assert errs[0] < 0.05
    assert errs[0] / errs[1] >= 1.8


# ------------------------------------------------------------ step control


def test_cfl_violation():
    with pytest.raises(CFLError):
        evolve(builtin("transport"), field(["x"], 11), 0.0, 1.0, 0.2)


def test_step_adjusted_to_fit():
    tr = evolve(builtin("transport"), field(["x"], 11), 0.0, 1.0, 0.09)
    assert tr.step_times[-1] == 1.0
    assert np.allclose(np.diff(tr.step_times), tr.dt)
    assert tr.dt <= 0.09


def test_small_grid_rejected():
    with pytest.raises(ValueError):
        evolve(builtin("transport"), Field(np.zeros((1, 2))), 0.0, 1.0, 0.5)


def test_blowup_is_flagged():
    nx = 101
    tr = evolve(builtin("ex11", nu=2.0), field(["sin(pi*x)", "0"], nx), 0.0, 60.0, 1.0 / (nx - 1),
                save_every=100)
    assert tr.diverged
    assert tr.diverged_at < 60.0
    assert np.abs(tr.values[-1]).max() > 1e12


def test_boundary_traces_satisfy_reflection():
    spec = builtin("bjj", eps=0.5)
    nx = 81
    tr = evolve(spec, field(["sin(pi*x)", "x", "cos(pi*x)"], nx), 0.0, 3.0, 1.0 / (nx - 1))
    for s in range(1, len(tr.step_times)):
        rhs = spec.boundary_rhs(tr.right[s], tr.left[s])
        lhs = np.array([tr.left[s, 0], tr.left[s, 1], tr.right[s, 2]])
        assert np.abs(lhs - rhs).max() <= 1e-12


# ----------------------------------------------------------- properties


REACTOR = dict(mu=1.0, K=1.0, Q=1.0, beta=0.5, theta0=0.0)
NONAUTO = SystemSpec.create(["1 + 0.3*sin(pi*x)*cos(t)", "-1"],
                            [["0.2", "-0.5*exp(-t)"], ["0.1*x", "0"]], [[0, 0.5], [0.7, 0]],
                            m=1, lambda0=0.7)


@pytest.mark.parametrize("spec", [builtin("ex11", nu=0.8), builtin("reactor2", **REACTOR), NONAUTO],
                         ids=["ex11", "reactor2", "nonautonomous"])
@pytest.mark.parametrize("split", [0.25, 0.5, 1.25])
def test_evolution_family_law(spec, split):
    nx = 81
    amax = max(abs(spec.speed(j, 0.5, 0.0)) for j in range(spec.n))
    dt = 1.0 / (nx - 1) / (1.3 * amax)
    dt = 2.0 / math.ceil(2.0 / dt)
    phi = field(["sin(pi*x)", "x*x"], nx)
    s = dt * round(split / dt)
    whole = evolve(spec, phi, 0.0, 2.0, dt)
    first = evolve(spec, phi, 0.0, s, dt)
    second = evolve(spec, first.final, s, 2.0, dt)
    assert np.abs(whole.values[-1] - second.values[-1]).max() <= 1e-12


def test_time_dependent_path_matches_autonomous():
    # '0*t' forces the per-step rebuild; results must agree with the cached step matrix
    a = builtin("ex11", nu=0.7)
    b = SystemSpec.create(["1 + 0*t", "-1"], [["0", "-0.7"], ["0", "0"]], [[0, 0], [1, 0]], m=1)
    assert not b.is_autonomous()
    phi = field(["sin(pi*x)", "x"], 41)
    ua = evolve(a, phi, 0.0, 2.0, 0.025).values[-1]
    ub = evolve(b, phi, 0.0, 2.0, 0.025).values[-1]
    assert np.abs(ua - ub).max() <= 1e-13


def _dissipative_spec():
    return SystemSpec.create(["1", "0.5", "-0.75"], m=2, lambda0=0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_dissipative_norm_nonincreasing(seed):
    rng = np.random.default_rng(seed)
    nx = 101
    vals = rng.normal(size=(3, nx))
    vals[0, 0] = vals[1, 0] = vals[2, -1] = 0.0
    tr = evolve(_dissipative_spec(), Field(vals), 0.0, 2.5, 1.0 / (nx - 1))
    assert np.all(np.diff(tr.l2) <= 1e-12)


@pytest.mark.parametrize("spec, k", [
    (builtin("reactor2", **{**REACTOR, "beta": 1.0}).decoupled(), 2),
    (builtin("bjj", eps=0.0), 3),
    (builtin("transport"), 1),
    (builtin("control", a1=1.0, a2=1.0).decoupled(), 2),
], ids=["reactor2", "bjj", "transport", "control"])
def test_finite_time_extinction(spec, k):
    nx = 101
    dt = 1.0 / (nx - 1)
    rng = np.random.default_rng(3)
    phi = Field(rng.normal(size=(spec.n, nx)))
    tr = evolve(spec, phi, 0.0, k / spec.lambda0 + 1.0, dt)
    after = tr.step_times >= k / spec.lambda0 + 2 * dt - 1e-12
    assert np.all(tr.l2[after] <= 1e-8 * tr.l2[0])


def test_exponential_bound_is_finite_for_builtins():
    from hyperstab.stability import growth_bound
    nx = 81
    for spec in [builtin("ex11", nu=0.5), builtin("example", mu=1.0, nu=0.5),
                 builtin("reactor3", **REACTOR), builtin("control", a1=1.0, a2=0.5)]:
        phi = Field(np.vstack([np.sin(np.pi * grid(nx))] * spec.n))
        amax = max(abs(spec.speed(j, 0.5, 0.0)) for j in range(spec.n))
        tr = evolve(spec, phi, 0.0, 5.0, 1.0 / (nx - 1) / amax)
        K, omega = growth_bound(tr)
        assert not tr.diverged
        assert math.isfinite(K) and math.isfinite(omega)


# ----------------------------------------------------------------- export


def test_csv_exports(tmp_path):
    tr = evolve(builtin("ex11", nu=0.5), field(["sin(pi*x)", "0"], 11), 0.0, 0.3, 0.1)
    p = tmp_path / "traj.csv"
    tr.write_csv(p)
    raw = p.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["time", "x", "component", "value"]
    assert len(rows) == 1 + len(tr.times) * 2 * 11
    q = tmp_path / "norms.csv"
    tr.write_norms_csv(q)
    rows = list(csv.reader(q.open()))
    assert rows[0] == ["time", "l2", "c1_seminorm"]
    assert float(rows[1][1]) == tr.l2[0]
