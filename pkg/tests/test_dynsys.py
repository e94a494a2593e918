import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp
from scipy.integrate._ivp.rk import RK45

from koopman_uq import dynsys
from koopman_uq.dynsys import (
    FAILED,
    T_MAX,
    TERMINAL,
    ClosedFormMap,
    DiscreteMap,
    Event,
    IntegrationError,
    OdeSystem,
    SystemMap,
    integrate,
    integrate_batch,
    iterate_discrete,
    locate_event,
)
from koopman_uq.scenarios import BouncingBallParams, ball_map

G = 9.807


def decay_map(**kw):
    return SystemMap(OdeSystem(lambda t, y, p: -y, 1), t_max=1.0, **kw)


def test_linear_decay():
    res = integrate(decay_map(rtol=1e-8, atol=1e-8), [1.0])
    assert res.status == T_MAX
    assert res.t == 1.0
    assert abs(res.state[0] - math.exp(-1)) < 1e-6


def free_fall_map(t_max=10.0):
    ground = Event(lambda t, y, p: y[:, 0], None, terminal=True, direction=-1)
    return SystemMap(OdeSystem(lambda t, y, p: np.column_stack([y[:, 1], np.full(len(y), -G)]), 2),
                     (ground,), t_max=t_max)


def test_free_fall_impact_time():
    m = free_fall_map()
    res = integrate(m, [50.0, 0.0])
    assert res.status == TERMINAL
    tol_t = 1e-10 * m.t_max
    assert abs(res.t - math.sqrt(100 / G)) <= tol_t
    assert res.event_log[0][1] == 0


def test_ball_two_bounces_at_alpha_09():
    prm = BouncingBallParams()
    res = integrate(ball_map(prm), [0, 2, 50, 0, 1], [G, 0.9])
    ground = [e for e in res.event_log if e[1] == 0]
    assert len(ground) == 2
    assert res.status == TERMINAL
    assert abs(res.state[0] - 25.0) < 1e-9


def test_locate_event_linear():
    f = lambda t, mask: t - 0.5
    t, fv, ok = locate_event(f, np.array([0.0]), np.array([1.0]), np.array([-0.5]), np.array([0.5]), 1e-12)
    assert ok.all() and abs(t[0] - 0.5) <= 1e-12


def test_locate_event_parabola():
    root = math.sqrt(100 / G)
    f = lambda t, mask: 50 - 0.5 * G * t * t
    t, _, ok = locate_event(f, np.array([0.0]), np.array([4.0]), np.array([50.0]), np.array([50 - 8 * G]), 1e-10)
    assert ok.all() and abs(t[0] - root) <= 1e-10


def test_locate_event_unreachable_value_tolerance_converges_at_resolution():
    f = lambda t, mask: 1e6 * (t - 1 / 3)
    t, _, ok = locate_event(f, np.array([0.0]), np.array([1.0]), np.array([-1e6 / 3]), np.array([2e6 / 3]),
                            0.0, 1e-30)
    assert ok.all() and abs(t[0] - 1 / 3) < 1e-15


def test_grazing_and_direction_filter():
    # y = (t - 1/2)^2 touches zero without crossing
    graze = SystemMap(OdeSystem(lambda t, y, p: 2 * (t[:, None] - 0.5) * np.ones_like(y), 1),
                      (Event(lambda t, y, p: y[:, 0], None, True, -1),), t_max=1.0)
    res = integrate(graze, [0.25])
    assert res.status == T_MAX and res.event_log == []
    # rising crossing of t - 1/2 ignored by a falling-only event
    clock = SystemMap(OdeSystem(lambda t, y, p: np.ones_like(y), 1),
                      (Event(lambda t, y, p: y[:, 0] - 0.5, None, True, -1),), t_max=1.0)
    assert integrate(clock, [0.0]).event_log == []
    rising = SystemMap(OdeSystem(lambda t, y, p: np.ones_like(y), 1),
                       (Event(lambda t, y, p: y[:, 0] - 0.5, None, True, 1),), t_max=1.0)
    res = integrate(rising, [0.0])
    assert res.status == TERMINAL and abs(res.t - 0.5) < 1e-10


def test_iterate_discrete_examples():
    assert iterate_discrete(lambda y: y / 2, 8.0, 3) == 1.0
    assert iterate_discrete(lambda y: y, 0.123, 100) == 0.123
    y = Fraction(1, 2)
    for _ in range(4):
        y = Fraction(7, 2) * y * (1 - y)
    assert iterate_discrete(lambda y: 3.5 * y * (1 - y), 0.5, 4) == pytest.approx(float(y), rel=1e-15)
    with pytest.raises(ValueError):
        iterate_discrete(lambda y: y, 1.0, -1)
    with pytest.raises(IntegrationError), np.errstate(over="ignore"):
        iterate_discrete(lambda y: y * y * 1e100, 10.0, 5)


def test_discrete_and_closed_form_maps():
    dm = DiscreteMap(lambda y, p: p * y * (1 - y), 4, 1, 1)
    res = dm.simulate(np.array([[0.5]]), np.array([[3.5]]))
    assert res.states[0, 0] == pytest.approx(iterate_discrete(lambda y: 3.5 * y * (1 - y), 0.5, 4))
    cf = ClosedFormMap(lambda x, p: 1 / x, 1)
    with np.errstate(divide="ignore"):
        out = cf.simulate(np.array([[2.0], [0.0]]), None)
    assert out.states[0, 0] == 0.5 and out.status[1] == FAILED


def test_tableau_matches_reference_pair():
    assert np.allclose(dynsys._C[:6], RK45.C, rtol=0, atol=1e-16)
    for i in range(1, 6):
        assert np.allclose(dynsys._A[i][:i], RK45.A[i, :i], atol=1e-16)
    assert np.allclose(dynsys._B[:6], RK45.B, atol=1e-16)
    assert np.allclose(dynsys._E, -RK45.E, atol=1e-16) or np.allclose(dynsys._E, RK45.E, atol=1e-16)


def fixed_step(f, y0, T, n):
    h = T / n
    y, t = np.array(y0, dtype=float), 0.0
    for _ in range(n):
        k = []
        for i in range(7):
            yi = y + h * sum(dynsys._A[i][j] * k[j] for j in range(i)) if i else y
            k.append(f(t + dynsys._C[i] * h, yi))
        y = y + h * sum(dynsys._B[j] * k[j] for j in range(7))
        t += h
    return y


def test_observed_order():
    f = lambda t, y: np.array([y[1], -y[0] + 0.3 * math.cos(t)])
    ref = solve_ivp(f, (0, 2), [1.0, 0.0], method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1]
    errs = [np.linalg.norm(fixed_step(f, [1.0, 0.0], 2.0, n) - ref) for n in (10, 20, 40)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 4.8


def test_batch_matches_single_runs():
    prm = BouncingBallParams()
    m = ball_map(prm)
    alphas = np.linspace(0.84, 1.0, 15)
    x0 = np.tile([0, 2, 50, 0, 1.0], (15, 1))
    p = np.column_stack([np.full(15, G), alphas])
    batch = integrate_batch(m, x0, p)
    for i in range(15):
        single = integrate(m, x0[i], p[i])
        assert np.array_equal(batch.states[i], single.state)
        assert batch.times[i] == single.t


def lotka(t, y, p):
    return np.column_stack([y[:, 0] - y[:, 0] * y[:, 1], -y[:, 1] + y[:, 0] * y[:, 1]])


@pytest.mark.parametrize("tol", [1e-5, 1e-7, 1e-9])
def test_self_convergence(tol):
    m = SystemMap(OdeSystem(lotka, 2), t_max=5.0, rtol=tol, atol=tol)
    a = integrate(m, [2.0, 1.0]).state
    b = integrate(m.with_tolerances(tol / 2, tol / 2), [2.0, 1.0]).state
    ref = solve_ivp(lambda t, y: lotka(t, y[None], None)[0], (0, 5), [2.0, 1.0], method="DOP853",
                    rtol=1e-13, atol=1e-13).y[:, -1]
    assert np.max(np.abs(a - b)) < tol * max(1.0, np.max(np.abs(a))) * 10
    assert np.max(np.abs(b - ref)) < 100 * tol


def test_reversibility():
    tol = 1e-9
    fwd = SystemMap(OdeSystem(lotka, 2), t_max=3.0, rtol=tol, atol=tol)
    bwd = SystemMap(OdeSystem(lambda t, y, p: -lotka(t, y, p), 2), t_max=3.0, rtol=tol, atol=tol)
    end = integrate(fwd, [2.0, 1.0]).state
    back = integrate(bwd, end).state
    assert np.max(np.abs(back - [2.0, 1.0])) < 10 * tol * 10


def test_energy_between_bounces():
    prm = BouncingBallParams()
    res = integrate(ball_map(prm, 1e-10, 1e-10), [0, 2, 50, 0, 1], [G, 0.9], record=True)
    tr = res.trajectory
    z, zd = tr.states[:, 2], tr.states[:, 3]
    energy = 0.5 * zd**2 + G * z
    bounce_times = [t for t, e in res.event_log if e == 0]
    edges = [0.0] + bounce_times + [res.t + 1]
    for a, b in zip(edges[:-1], edges[1:]):
        seg = (tr.times > a) & (tr.times < b)
        if seg.sum() > 1:
            e = energy[seg]
            assert np.ptp(e) < 1e-8 * max(1.0, np.max(np.abs(e)))


def test_ball_settles_without_chattering():
    prm = BouncingBallParams(xdot0=0.5, z0=10.0)
    res = integrate(ball_map(prm), [0, 0.5, 10, 0, 1], [G, 0.5])
    assert res.status == TERMINAL
    assert res.state[2] == 0.0
    assert len(res.event_log) < 40


def test_blow_up_is_flagged():
    m = SystemMap(OdeSystem(lambda t, y, p: y * y, 1), t_max=2.0)
    res = integrate_batch(m, np.array([[1.0], [0.1]]))
    assert res.status[0] == FAILED and res.status[1] == T_MAX
    assert res.states[1, 0] == pytest.approx(0.1 / (1 - 0.2), rel=1e-7)
    with pytest.raises(IntegrationError):
        integrate(m, [1.0])


@given(st.floats(0.1, 5.0), st.floats(0.1, 3.0))
def test_decay_vectorised(y0, k):
    m = SystemMap(OdeSystem(lambda t, y, p: -p[:, :1] * y, 1, 1), t_max=1.0, rtol=1e-10, atol=1e-12)
    res = integrate(m, [y0], [k])
    assert res.state[0] == pytest.approx(y0 * math.exp(-k), rel=1e-8)


def test_invalid_maps():
    with pytest.raises(ValueError):
        SystemMap(OdeSystem(lotka, 2), t_max=0.0)
    with pytest.raises(ValueError):
        Event(lambda t, y, p: y[:, 0], direction=2)
