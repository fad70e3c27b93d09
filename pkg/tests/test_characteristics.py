import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperstab.characteristics import (
    INITIAL, LEFT, RIGHT, TraceError, trace_back, trace_forward, weight_c, weight_d,
)
from hyperstab.system import SystemSpec, builtin


def scalar(a, b="0"):
    return SystemSpec.create([a], [[b]], m=1 if not a.startswith("-") else 0, lambda0=0.5)


def test_unit_speed_hits_left_boundary():
    ev = trace_back(scalar("1"), 0, 0.7, 2.0, 0.0, 0.05)
    assert ev.kind == LEFT
    assert ev.foot_x == 0.0
    assert ev.foot_t == pytest.approx(1.3, abs=1e-10)


def test_unit_speed_reaches_initial_line():
    ev = trace_back(scalar("1"), 0, 0.7, 0.5, 0.0, 0.05)
    assert ev.kind == INITIAL
    assert ev.foot_t == 0.0
    assert ev.foot_x == pytest.approx(0.2, abs=1e-10)


def test_leftward_speed_hits_right_boundary():
    spec = builtin("ex11", nu=0.0)
    ev = trace_back(spec, 1, 0.3, 2.0, 0.0, 0.05)
    assert ev.kind == RIGHT
    assert ev.foot_x == 1.0
    assert ev.foot_t == pytest.approx(1.3, abs=1e-10)


def test_path_runs_backward():
    ev = trace_back(scalar("1 + 0.5*sin(3*x)"), 0, 0.9, 3.0, 0.0, 0.01)
    assert np.all(np.diff(ev.path[:, 1]) < 0)
    assert ev.path[0, 0] == 0.9 and ev.path[0, 1] == 3.0


def test_zero_diagonal_weight_is_one():
    s = scalar("1")
    ev = trace_back(s, 0, 0.6, 2.0, 0.0, 0.1)
    assert weight_c(s, 0, ev, 0.6, 2.0) == 1.0


@pytest.mark.parametrize("x", [0.1, 0.45, 0.9])
def test_constant_diagonal_weight(x):
    kappa = 0.8
    s = scalar("1", repr(kappa))
    ev = trace_back(s, 0, x, 3.0, 0.0, 0.01)
    assert weight_c(s, 0, ev, x, 3.0) == pytest.approx(math.exp(-kappa * x), abs=1e-10)


def test_reactor2_weight_matches_closed_form():
    mu, K, Q, beta, th = 0.7, 1.3, 0.9, 0.5, 0.2
    s = builtin("reactor2", mu=mu, K=K, Q=Q, beta=beta, theta0=th)
    x = 0.6
    ev = trace_back(s, 0, x, 4.0, 0.0, 0.01)
    expected = math.exp((Q * K * math.exp(th) - mu) * x)
    assert weight_c(s, 0, ev, x, 4.0) == pytest.approx(expected, abs=1e-8)


def test_variable_diagonal_weight():
    # b11 = x with a = 1: c = exp(-∫_0^x η dη) = exp(-x^2/2)
    s = scalar("1", "x")
    ev = trace_back(s, 0, 0.8, 2.0, 0.0, 0.01)
    assert weight_c(s, 0, ev, 0.8, 2.0) == pytest.approx(math.exp(-0.32), abs=1e-8)


@pytest.mark.parametrize("a, expected", [("1", 1.0), ("-1", -1.0), ("2", 0.5)])
def test_weight_d_simple(a, expected):
    s = scalar(a)
    j = 0
    x = 0.5
    ev = trace_back(s, j, x, 0.2, 0.0, 0.05)
    xi = 0.5 * (ev.path[0, 0] + ev.path[-1, 0])
    assert weight_d(s, j, xi, x, 0.2, ev.path) == pytest.approx(expected, abs=1e-14)


def test_weight_d_includes_diagonal_decay():
    s = scalar("1", "1")
    ev = trace_back(s, 0, 0.8, 2.0, 0.0, 0.01)
    assert weight_d(s, 0, 0.3, 0.8, 2.0, ev.path) == pytest.approx(math.exp(-0.5), abs=1e-8)


def test_nonfinite_speed_raises():
    s = SystemSpec.create(["exp(1000*t) + 1"], m=1, lambda0=1.0)
    with pytest.raises(TraceError):
        trace_back(s, 0, 0.5, 1.0, 0.0, 0.1)


def test_bad_inputs():
    s = scalar("1")
    with pytest.raises(ValueError):
        trace_back(s, 0, 1.5, 1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        trace_back(s, 0, 0.5, 0.0, 0.0, 0.1)


def test_exit_side_after_one_transit():
    s = builtin("control", a1=1.0, a2=0.5)
    for j in range(2):
        for x in np.linspace(0, 1, 9):
            ev = trace_back(s, j, float(x), 10.0, 10.0 - 1.0 / s.lambda0 - 0.01, 0.02)
            assert ev.kind == (LEFT if j < s.m else RIGHT)


VARSPEED = SystemSpec.create(["1 + 0.5*sin(3*x + t)", "-(1 + 0.3*x*x)"], m=1, lambda0=0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.1, 0.9), st.sampled_from([0.05, 0.02]))
def test_reversibility(x, dt, h):
    t = 3.0
    for j in range(2):
        ev = trace_back(VARSPEED, j, x, t, t - dt, h)
        if ev.kind != INITIAL:
            continue
        back = trace_forward(VARSPEED, j, ev.foot_x, ev.foot_t, t, h)
        assert abs(back - x) <= 10 * h ** 4


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.01, 1.0), st.floats(-1.0, 1.0))
def test_constant_speed_affine_feet(x, span, speed_sign):
    c = 0.5 + 1.5 * abs(speed_sign)
    a = c if speed_sign >= 0 else -c
    s = SystemSpec.create([repr(a)], m=1 if a > 0 else 0, lambda0=0.5)
    t = 1.0 + span
    ev = trace_back(s, 0, x, t, 1.0, 0.03)
    xf = x - a * span
    if 0.0 < xf < 1.0:
        assert ev.kind == INITIAL
        assert ev.foot_x == pytest.approx(xf, abs=1e-10)
    else:
        edge = 0.0 if a > 0 else 1.0
        assert ev.foot_x == edge
        assert ev.foot_t == pytest.approx(t - (x - edge) / a, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.2, 0.8))
def test_flow_semigroup(x, frac):
    h = 0.02
    t, floor = 3.0, 2.2
    s_mid = floor + frac * (t - floor)
    direct = trace_back(VARSPEED, 0, x, t, floor, h)
    first = trace_back(VARSPEED, 0, x, t, s_mid, h)
    if first.kind != INITIAL or direct.kind != INITIAL:
        return
    second = trace_back(VARSPEED, 0, first.foot_x, s_mid, floor, h)
    if second.kind == INITIAL:
        assert abs(second.foot_x - direct.foot_x) <= 10 * h ** 4
