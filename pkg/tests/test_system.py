import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperstab.expr import Num
from hyperstab.system import (
    BUILTINS, SpecError, SystemSpec, Table, builtin, check_levy, list_builtins,
    perturb, validate,
)

REACTOR = dict(mu=1.0, K=1.0, Q=1.0, beta=0.5, theta0=0.0)


def all_builtins():
    return [
        builtin("transport"),
        builtin("f1ex1"),
        builtin("ex11", nu=2.0),
        builtin("example", mu=1.0, nu=0.5),
        builtin("reactor2", **REACTOR),
        builtin("reactor3", **REACTOR),
        builtin("control", a1=1.0, a2=0.5),
        builtin("bjj", eps=0.0),
        builtin("bjj", eps=0.5),
    ]


def test_scalar_constant_speed_passes():
    s = SystemSpec.create(["1"], m=1, lambda0=1.0)
    assert validate(s).passed


def test_sign_change_fails_with_located_violations():
    s = SystemSpec.create(["x-t"], m=1, lambda0=0.1)
    rep = validate(s, t_range=(0.0, 1.0))
    assert not rep.passed
    assert not rep.conditions["hyperbolicity"]
    assert rep.violations
    for _, j, x, t in rep.violations:
        assert x - t < 0.1 + 1e-12
    assert rep.worst_margin < 0


def test_ex11_validates():
    assert validate(builtin("ex11", nu=2.0)).passed


@pytest.mark.parametrize("spec", all_builtins(), ids=lambda s: s.name)
def test_every_builtin_validates(spec):
    assert validate(spec, t_range=(0.0, 5.0)).passed


def test_levy_fails_only_for_f1ex1():
    for spec in all_builtins():
        assert check_levy(spec).passed == (spec.name != "f1ex1"), spec.name


def test_f1ex1_fails_levy_at_all_points():
    rep = check_levy(builtin("f1ex1"), nx=11, nt=11, max_violations=10 ** 6)
    assert len(rep.violations) == 11 * 11


def test_decoupled_passes_levy():
    spec = SystemSpec.create(["1", "1"], [["0", "0"], ["0", "0"]], m=2)
    assert check_levy(spec).passed


def test_reactor3_with_equal_speeds_fails_levy():
    spec = builtin("reactor3", **{**REACTOR, "beta": 1.0})
    assert not check_levy(spec).passed


def test_perturb_zero_is_identity():
    s = builtin("transport")
    t = perturb(s, [[0]])
    assert t.b == s.b and t.a == s.a and t.p == s.p


def test_perturb_dimension_mismatch():
    with pytest.raises(SpecError):
        perturb(builtin("transport"), [[0, 0], [0, 0]])


def _coefficients_equal(s1, s2):
    x = np.linspace(0, 1, 7)
    t = np.linspace(-1, 2, 7)
    X, T = np.meshgrid(x, t)
    for j in range(s1.n):
        np.testing.assert_allclose(s1.speed(j, X, T), s2.speed(j, X, T), rtol=0, atol=1e-14)
        for k in range(s1.n):
            np.testing.assert_allclose(s1.coupling(j, k, X, T), s2.coupling(j, k, X, T), rtol=0, atol=1e-14)
    assert s1.p == s2.p and s1.m == s2.m


def test_perturb_recovers_ex11():
    nu = 1.7
    _coefficients_equal(perturb(builtin("ex11", nu=0.0), [[0, -nu], [0, 0]]), builtin("ex11", nu=nu))


def test_perturb_recovers_example():
    _coefficients_equal(perturb(builtin("example", mu=1.3, nu=0.0), [[0, -0.4], [0, 0]]),
                        builtin("example", mu=1.3, nu=0.4))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8))
def test_perturb_is_additive(vals):
    s = builtin("example", mu=1.0, nu=0.5)
    B1 = [[vals[0], vals[1]], [vals[2], vals[3]]]
    B2 = [[vals[4], vals[5]], [vals[6], f"{vals[7]!r}*x"]]
    both = [[f"{B1[j][k]!r} + {B2[j][k]}" if isinstance(B2[j][k], str) else B1[j][k] + B2[j][k]
             for k in range(2)] for j in range(2)]
    _coefficients_equal(perturb(perturb(s, B1), B2), perturb(s, both))


def test_bjj_reflection_rows():
    s = builtin("bjj", eps=0.0)
    assert s.n == 3 and s.m == 2
    assert s.pmat.tolist() == [[0, 0, 1], [0, 0, 1], [1, -1, 0]]


def test_transport_builtin():
    s = builtin("transport")
    assert (s.n, s.m) == (1, 1)
    assert s.speed(0, 0.3, 0.0) == 1.0
    assert s.b[0][0] == Num(0.0)
    assert s.pmat.tolist() == [[0.0]]


def test_ex11_builtin():
    s = builtin("ex11", nu=2.0)
    assert s.coupling(0, 1, 0.5, 0.0) == -2.0
    assert s.pmat[1, 0] == 1.0


def test_reactor2_weight_factor():
    # c1 along the path from x back to x = 0 equals exp(∫_0^x b11 dη) in the speed-normalized form
    s = builtin("reactor2", mu=0.7, K=1.3, Q=0.9, beta=0.5, theta0=0.2)
    b11 = s.coupling(0, 0, 0.0, 0.0)
    assert math.isclose(b11, -(0.9 * 1.3 * math.exp(0.2) - 0.7) / 0.5)


def test_greek_aliases_and_errors():
    assert builtin("ex11", **{"ν": 2.0}).params == (("nu", 2.0),)
    with pytest.raises(SpecError):
        builtin("nosuch")
    with pytest.raises(SpecError):
        builtin("ex11")
    with pytest.raises(SpecError):
        builtin("ex11", nu=1.0, mu=2.0)
    with pytest.raises(SpecError):
        builtin("reactor2", mu=1, K=1, Q=1, beta=0, theta0=0)


def test_reactor_profile_override():
    s = builtin("reactor2", **REACTOR, theta_profile="0.1*x")
    assert "x" in s.b[0][0].variables


def test_catalog_rows():
    rows = list_builtins()
    assert len(rows) == len(BUILTINS)
    assert any(r.startswith("bjj(ε): Example with diagonal perturbation") for r in rows)
    assert any(r.startswith("f1ex1: Levy-condition counterexample") for r in rows)
    assert any("control(a1,a2)" in r for r in rows)


def test_spec_validation_errors():
    with pytest.raises(SpecError):
        SystemSpec.create(["1"], m=2)
    with pytest.raises(SpecError):
        SystemSpec.create(["1"], lambda0=0.0)
    with pytest.raises(SpecError):
        SystemSpec.create(["1", "-1"], b=[["0"]])


def test_config_round_trip():
    s = builtin("reactor3", **REACTOR)
    again = SystemSpec.from_config(s.to_config())
    _coefficients_equal(s, again)


def test_table_coefficient():
    tab = Table([0.0, 1.0], [1.0, 3.0])
    s = SystemSpec.create([tab], m=1, lambda0=1.0)
    assert s.speed(0, 0.5, 0.0) == 2.0
    assert validate(s).passed
    tt = Table([0.0, 1.0], [[1.0, 1.0], [2.0, 4.0]], ts=[0.0, 1.0])
    assert tt(1.0, 0.5) == pytest.approx(2.5)


def test_autonomy_and_decoupling():
    s = builtin("reactor2", **REACTOR)
    assert s.is_autonomous() and not s.is_decoupled()
    d = s.decoupled()
    assert d.is_decoupled()
    assert not SystemSpec.create(["1 + t"], m=1).is_autonomous()
