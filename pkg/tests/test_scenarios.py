import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from koopman_uq.dynsys import integrate_batch
from koopman_uq.koopman import koopman_expectation
from koopman_uq.prob import TruncatedNormal, Uniform
from koopman_uq.scenarios import (
    BouncingBallParams,
    DecayParams,
    SCENARIOS,
    analytic_expectation,
    ball_map,
    bounce_count,
    bounce_parameter,
    decay_expectation,
    expectation_polynomial,
    get_scenario,
    height_polynomial,
    impact_height,
    impact_height_cubic,
    two_bounce_threshold,
    validity_range,
)

PRM = BouncingBallParams()
THRESHOLD = two_bounce_threshold(PRM)
GRID = np.linspace(THRESHOLD, 1.0, 51)[1:]


def simulate(alphas, prm=PRM):
    alphas = np.asarray(alphas, dtype=float)
    k = alphas.size
    x0 = np.tile([prm.x0, prm.xdot0, prm.z0, prm.zdot0, 1.0], (k, 1))
    p = np.column_stack([np.full(k, prm.g_accel), alphas])
    return integrate_batch(ball_map(prm, 1e-11, 1e-11), x0, p, on_failure="raise")


def test_frozen_constants():
    assert bounce_parameter(0.9, PRM) == pytest.approx(2.6765, abs=1e-4)
    assert THRESHOLD == pytest.approx(0.8066208810589438, abs=1e-12)
    assert bounce_parameter(THRESHOLD, PRM) == pytest.approx(3.0, abs=1e-10)


def test_bounce_count_examples():
    assert bounce_count(0.9, PRM) == 2
    assert bounce_count(THRESHOLD + 1e-9, PRM) == 2
    assert bounce_count(THRESHOLD - 1e-6, PRM) == 3
    assert bounce_count(1.0, PRM) == 2
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(ValueError):
            bounce_count(bad, PRM)


def test_unit_restitution_limit():
    b1 = math.sqrt(PRM.g_accel / (8 * PRM.z0)) * PRM.flight_time + 0.5
    assert bounce_parameter(1.0, PRM) == pytest.approx(b1, rel=1e-14)
    assert bounce_parameter(1 - 1e-9, PRM) == pytest.approx(b1, rel=1e-6)


def test_counts_and_heights_match_simulation():
    res = simulate(GRID)
    ground = np.array([sum(1 for _, e in log if e == 0) for log in res.event_logs])
    assert np.array_equal(ground, [bounce_count(a, PRM) for a in GRID])
    h = np.array([impact_height(a, PRM) for a in GRID])
    assert np.max(np.abs(res.states[:, 2] - h)) <= 1e-6
    assert np.allclose(res.states[:, 0], PRM.target[0], atol=1e-9)


def test_three_bounce_side_matches_simulation():
    alphas = np.linspace(0.7, THRESHOLD, 12)[:-1]
    res = simulate(alphas)
    h = np.array([impact_height(a, PRM) for a in alphas])
    assert np.max(np.abs(res.states[:, 2] - h)) <= 1e-6


def test_cubic_equals_general_formula():
    lo, hi = validity_range(PRM, 2)
    a = np.linspace(lo, hi, 200)[1:]
    general = np.array([impact_height(x, PRM) for x in a])
    assert np.max(np.abs(impact_height_cubic(a, PRM) - general)) <= 1e-10
    assert np.max(np.abs(height_polynomial(2, PRM)(a) - general)) <= 1e-10


def test_height_continuous_at_validity_edge():
    left = height_polynomial(3, PRM)(THRESHOLD)
    right = height_polynomial(2, PRM)(THRESHOLD)
    assert left == pytest.approx(right, abs=1e-9)
    assert impact_height(THRESHOLD - 1e-12, PRM) == pytest.approx(impact_height(THRESHOLD + 1e-12, PRM), abs=1e-8)


def test_polynomial_recombination():
    rng = np.random.default_rng(17)
    poly = expectation_polynomial(PRM, 2)
    assert poly.degree() == 6
    for a in rng.uniform(THRESHOLD + 1e-6, 1.0, 20):
        assert poly(a) == pytest.approx((impact_height(a, PRM) - 25.0) ** 2, rel=1e-9, abs=1e-9)


def test_degenerate_density_limit():
    a = 0.9
    point = (impact_height(a, PRM) - 25.0) ** 2
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        errs.append(abs(analytic_expectation(PRM, Uniform(a - eps, a + eps)) - point))
    rates = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(abs(r - 2) < 0.05 for r in rates)


def test_scenario_oracles():
    assert get_scenario("bouncing_ball").oracle() == pytest.approx(36.00862821426199, rel=1e-12)
    assert get_scenario("bouncing_ball_optimized").oracle() == pytest.approx(0.08383646365018649, rel=1e-10)
    assert get_scenario("bouncing_ball").oracle() == pytest.approx(36.008, abs=1e-3)


def test_support_violation():
    with pytest.raises(ValueError):
        analytic_expectation(PRM, Uniform(0.75, 0.95))
    with pytest.raises(ValueError):
        bounce_count(0.9, BouncingBallParams(zdot0=1.0))


def test_params_invariants():
    with pytest.raises(ValueError):
        BouncingBallParams(x0=30.0)
    with pytest.raises(ValueError):
        BouncingBallParams(xdot0=0.0)
    with pytest.raises(ValueError):
        BouncingBallParams(z0=-1.0)


@settings(max_examples=15)
@given(st.floats(0.3, 3.0), st.floats(0.5, 1.5))
def test_decay_oracle_matches_quadrature(T, mu):
    prm = DecayParams(T=T, k_density=TruncatedNormal(mu, 0.2, mu - 0.5, mu + 0.5))
    sc = get_scenario("exp_decay")
    prob, g = sc.build(prm, 1e-10, 1e-10)
    r = koopman_expectation(prob, g, 1e-8, 1e-10)
    assert r.value[0] == pytest.approx(decay_expectation(prm), rel=1e-7)


def test_overrides():
    sc = get_scenario("bouncing_ball", {"z0": 40.0})
    assert sc.params.z0 == 40.0
    with pytest.raises(ValueError):
        get_scenario("bouncing_ball", {"nope": 1})
    with pytest.raises(ValueError):
        get_scenario("missing")
    assert set(SCENARIOS) >= {"bouncing_ball", "bouncing_ball_optimized", "exp_decay", "stiff_decay", "wiener_kl"}
