import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_uq.dynsys import identity_map
from koopman_uq.koopman import Coordinate, Observable, UncertaintyProblem
from koopman_uq.optuu import (
    Constraint,
    Decision,
    OptProblem,
    ball_opt_problem,
    expected_objective,
    gradient,
    optimize,
)
from koopman_uq.prob import TruncatedNormal, Uniform
from koopman_uq.scenarios import DecayParams, WienerParams, decay_problem, wiener_problem

SQUARE = Observable(lambda y, t: y[:, 0] ** 2, 1)
X = Observable.component(0)


def shifted(density_of_u):
    def bind(u):
        return UncertaintyProblem(identity_map(1), (Coordinate("state", 0, density_of_u(float(u[0]))),), (0.0,))

    return bind


def convex_problem(init=3.0):
    # X - u with X ~ TN(0, 1, -8, 8)
    bind = shifted(lambda u: TruncatedNormal(-u, 1.0, -u - 8, -u + 8))
    return OptProblem((Decision("u", -5.0, 5.0, init),), bind, SQUARE, rtol=1e-8, atol=1e-10)


def constrained_problem():
    # X + u with X ~ TN(0, 0.1, -1, 1)
    bind = shifted(lambda u: TruncatedNormal(u, 0.1, u - 1, u + 1))
    return OptProblem((Decision("u", -5.0, 5.0, 0.0),), bind, X, (Constraint(SQUARE, 1.0),), rtol=1e-8, atol=1e-10)


def test_expected_objective_examples():
    p = ball_opt_problem(bounds=((-10.0, 5.0), (1.0, 3.0), (10.0, 60.0)), init=(0.0, 2.0, 50.0))
    assert expected_objective(p, [0.0, 2.0, 50.0], 1e-6)[0] == pytest.approx(36.008628, abs=1e-4)
    one = OptProblem(p.decisions, p.bind, Observable.constant(1.0))
    for u in ([2.0, 2.0, 50.0], [-5.0, 1.5, 20.0]):
        assert expected_objective(one, u)[0] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=10)
@given(st.floats(-4.0, 4.0))
def test_second_raw_moment_of_shifted_normal(u):
    bind = shifted(lambda c: TruncatedNormal(c, 1.0, c - 8, c + 8))
    p = OptProblem((Decision("u", -5.0, 5.0, 0.0),), bind, SQUARE, rtol=1e-10, atol=1e-12)
    assert expected_objective(p, [u])[0] == pytest.approx(u * u + 1, rel=1e-8, abs=1e-9)


def test_outside_box_rejected():
    with pytest.raises(ValueError):
        expected_objective(convex_problem(), [6.0])
    with pytest.raises(ValueError):
        Decision("u", 1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        Decision("u", 0.0, 1.0, 2.0)


@settings(max_examples=10)
@given(st.floats(-4.5, 4.5))
def test_quadratic_gradient(u):
    # (u - 3)^2 plus a constant from a narrow uniform
    bind = shifted(lambda c: Uniform(c - 3 - 1e-3, c - 3 + 1e-3))
    p = OptProblem((Decision("u", -5.0, 5.0, 0.0),), bind, SQUARE, rtol=1e-10, atol=1e-12)
    assert gradient(p, [u], h=1e-5)[0] == pytest.approx(2 * (u - 3), abs=1e-4)


def test_constant_gradient_is_zero():
    p = ball_opt_problem()
    one = OptProblem(p.decisions, p.bind, Observable.constant(2.5))
    assert np.all(gradient(one, [-10.0, 2.0, 30.0]) == 0.0)


def third_derivatives(p, u, H, rtol):
    out = []
    for i in range(len(u)):
        e = np.zeros(len(u))
        e[i] = H[i]
        f = [expected_objective(p, u + k * e, rtol)[0] for k in (-2, -1, 1, 2)]
        out.append((f[3] - 2 * f[2] + 2 * f[1] - f[0]) / (2 * H[i] ** 3))
    return np.array(out)


def richardson_ratio(p, u, h, rtol, with_value=True):
    """|grad_h - grad_{h/2}| / (10 step^2 scale), per coordinate; <= 1 passes."""
    u = np.asarray(u, dtype=float)
    g1, g2 = gradient(p, u, h, rtol), gradient(p, u, h / 2, rtol)
    step = h * np.maximum(1.0, np.abs(u))
    f3 = np.abs(third_derivatives(p, u, 10 * step, rtol / 10))
    scale = np.maximum(1.0, f3)
    if with_value:
        scale = np.maximum(scale, abs(expected_objective(p, u, rtol / 10)[0]))
    return np.abs(g1 - g2) / (10 * step**2 * scale)


def test_richardson_ball_nominal():
    p = ball_opt_problem(bounds=((-10.0, 5.0), (1.0, 3.0), (10.0, 60.0)), init=(0.0, 2.0, 50.0))
    assert np.all(richardson_ratio(p, [0.0, 2.0, 50.0], 1e-5, 1e-10) <= 1.0)


def test_richardson_ball_interior():
    rng = np.random.default_rng(11)
    p = ball_opt_problem()
    u = np.array([rng.uniform(-20, -1), rng.uniform(2.0, 2.95), rng.uniform(30, 49)])
    assert np.all(richardson_ratio(p, u, 1e-3, 1e-10, with_value=False) <= 1.0)


def decay_opt(stiff=False):
    def bind(u):
        if stiff:
            prm = DecayParams(T=0.25, k_density=Uniform(u[1] - 10, u[1] + 10))
        else:
            prm = DecayParams(y0_density=Uniform(u[0] - 0.5, u[0] + 0.5),
                              k_density=TruncatedNormal(u[1], 0.2, u[1] - 0.8, u[1] + 1.0))
        return decay_problem(prm)

    hi = 40.0 if stiff else 2.0
    return OptProblem((Decision("y0", 0.5, 1.5, 1.0), Decision("k", 0.5, hi, 1.0)), bind, X, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stiff", [False, True])
def test_richardson_decay(stiff):
    rng = np.random.default_rng(5 + stiff)
    u = np.array([rng.uniform(0.7, 1.3), rng.uniform(25, 35) if stiff else rng.uniform(0.8, 1.6)])
    assert np.all(richardson_ratio(decay_opt(stiff), u, 1e-3, 1e-10) <= 1.0)


def test_richardson_wiener():
    p = OptProblem((Decision("T", 0.5, 2.0, 1.0),), lambda u: wiener_problem(WienerParams(T=float(u[0]), K=2)),
                   SQUARE, rtol=1e-6, atol=1e-8)
    assert np.all(richardson_ratio(p, [1.3], 1e-2, 1e-6) <= 1.0)


def test_convex_minimum():
    r = optimize(convex_problem())
    assert r.converged
    assert abs(r.u_star[0]) <= 1e-3
    assert r.objective_value == pytest.approx(1.0, abs=1e-6)


def test_constrained_toy():
    var = TruncatedNormal(0.0, 0.1, -1.0, 1.0).raw_moment(2)
    exact = -math.sqrt(1 - var)
    r = optimize(constrained_problem())
    assert r.converged, r.message
    # the decision-change stop gives accuracy of order xtol_rel
    assert r.u_star[0] == pytest.approx(exact, rel=2e-3)
    assert 1.0 - 1e-2 <= r.constraint_values[0] <= 1.0 + 1e-6

    tight = optimize(constrained_problem(), xtol_rel=1e-6)
    assert tight.converged, tight.message
    assert tight.u_star[0] == pytest.approx(exact, abs=1e-6)
    assert tight.constraint_values[0] == pytest.approx(1.0, abs=1e-6)
    assert tight.constraint_values[0] <= 1.0 + 1e-6
    # stationarity of 1 + lam * 2 u
    assert tight.multipliers[0] == pytest.approx(-1 / (2 * exact), rel=1e-3)


def test_infeasible_reported():
    bind = shifted(lambda u: TruncatedNormal(u, 0.1, u - 1, u + 1))
    p = OptProblem((Decision("u", 2.0, 5.0, 3.0),), bind, X, (Constraint(SQUARE, 1.0),), rtol=1e-8, atol=1e-10)
    r = optimize(p, max_outer=5)
    assert not r.converged and "no feasible point" in r.message
    assert r.u_star[0] == pytest.approx(2.0, abs=1e-6)


def test_trace_monotone_and_inside_box():
    seen = []
    p = ball_opt_problem()
    orig = p.bind

    def bind(u):
        seen.append(np.array(u, dtype=float))
        return orig(u)

    p = OptProblem(p.decisions, bind, p.objective, rtol=p.rtol)
    r = optimize(p, max_iter=8)
    vals = [f for _, f, _ in r.trace]
    assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(vals, vals[1:]))
    lo, hi = p.lo, p.hi
    assert all(np.all(u >= lo) and np.all(u <= hi) for u in seen)
    assert np.all(r.u_star >= lo) and np.all(r.u_star <= hi)
    assert r.n_objective_evals > 0 and r.n_gradient_evals > 0


def test_iteration_limit_not_converged():
    r = optimize(ball_opt_problem(), max_iter=2)
    assert not r.converged and r.message == "iteration limit"
    assert r.to_dict(["x0", "xdot0", "z0"])["iterations"] <= 2
