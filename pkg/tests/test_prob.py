import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from koopman_uq.prob import (
    ProductDensity,
    SupportBox,
    TruncatedNormal,
    Uniform,
    density_from_config,
)

ALPHA = TruncatedNormal(0.9, 0.02, 0.84, 1.0)


def scipy_truncnorm(d):
    return stats.truncnorm((d.lo - d.mu) / d.sigma, (d.hi - d.mu) / d.sigma, loc=d.mu, scale=d.sigma)


def quad_moment(d, k):
    ref = scipy_truncnorm(d)
    val, _ = integrate.quad(lambda x: x**k * ref.pdf(x), d.lo, d.hi, epsabs=0, epsrel=1e-13, limit=200,
                            points=[d.mu] if d.lo < d.mu < d.hi else None)
    absval, _ = integrate.quad(lambda x: abs(x) ** k * ref.pdf(x), d.lo, d.hi, epsabs=0, epsrel=1e-13, limit=200)
    return val, absval


def test_pdf_outside_support_is_zero():
    assert ALPHA.pdf(0.82) == 0.0
    assert ALPHA.pdf(1.0000001) == 0.0


def test_uniform_pdf():
    assert Uniform(0, 1).pdf(0.5) == 1.0


def test_truncated_normal_pdf_at_mode():
    norm, _ = integrate.quad(lambda x: stats.norm.pdf(x, 0.9, 0.02), 0.84, 1.0, epsabs=0, epsrel=1e-13)
    expected = stats.norm.pdf(0.9, 0.9, 0.02) / norm
    assert ALPHA.pdf(0.9) == pytest.approx(expected, rel=1e-12)


def test_symmetric_moments():
    d = TruncatedNormal(0, 1, -20, 20)
    assert abs(d.raw_moment(1)) < 1e-15
    assert d.raw_moment(2) == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("k", range(1, 7))
def test_alpha_moments_match_quadrature(k):
    q, _ = quad_moment(ALPHA, k)
    assert ALPHA.raw_moment(k) == pytest.approx(q, rel=1e-10)


GRID = [
    (0.0, 1.0, -1.0, 2.0),
    (0.0, 1.0, 0.5, 3.0),
    (2.0, 0.5, 2.2, 4.0),
    (-1.0, 3.0, -2.0, 10.0),
    (0.9, 0.02, 0.84, 1.0),
    (5.0, 2.0, -3.0, 4.0),
    (0.0, 1.0, -8.0, 8.0),
    (1.0, 0.1, 0.0, 1.05),
]


@pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
@pytest.mark.parametrize("mu,sigma,lo,hi", GRID)
def test_moment_grid(mu, sigma, lo, hi):
    d = TruncatedNormal(mu, sigma, lo, hi)
    for k in range(1, 7):
        q, qa = quad_moment(d, k)
        assert abs(d.raw_moment(k) - q) <= 1e-10 * max(abs(q), qa), (k, d.raw_moment(k), q)


@pytest.mark.parametrize("k", [0, 7, 2.0])
def test_moment_order_checked(k):
    with pytest.raises(ValueError):
        ALPHA.raw_moment(k)


def test_normalisation_integrates_to_one():
    for d in [ALPHA, Uniform(-2, 5), TruncatedNormal.standard(3.0, 0.5), TruncatedNormal(0, 1, 1, 3)]:
        lo, hi = d.support.lo[0], d.support.hi[0]
        val, _ = integrate.quad(lambda x: d.pdf(x), lo, hi, epsabs=0, epsrel=1e-13, limit=200)
        assert val == pytest.approx(1.0, abs=1e-10)


def test_standard_cutoff_mass():
    d = TruncatedNormal.standard(0, 1)
    dropped = 2 * stats.norm.sf(8.0)
    assert dropped < 1.3e-15
    assert d.normalization == pytest.approx(1.0 - dropped, abs=1e-16)


@given(st.integers(0, 2**32 - 1))
def test_samples_inside_support(seed):
    rng = np.random.default_rng(seed)
    assert 0.0 <= Uniform(0, 1).sample(rng) <= 1.0
    x = ALPHA.sample(rng, 100)
    assert np.all((x >= 0.84) & (x <= 1.0))


def test_sample_mean_statistical():
    n = 1_000_000
    x = ALPHA.sample(np.random.default_rng(12345), n)
    sd = math.sqrt(ALPHA.raw_moment(2) - ALPHA.raw_moment(1) ** 2)
    assert abs(x.mean() - ALPHA.raw_moment(1)) <= 4 * sd / math.sqrt(n)


def test_upper_tail_ppf_is_accurate():
    d = TruncatedNormal(0, 1, 6, 7)
    ref = scipy_truncnorm(d)
    u = np.linspace(0.01, 0.99, 9)
    assert np.allclose(d.ppf(u), ref.ppf(u), rtol=1e-10)


def test_product_pdf_exact():
    marg = [ALPHA, Uniform(-1, 2), TruncatedNormal(0, 1, -3, 3)]
    prod = ProductDensity(marg)
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0.8, 1.02, 1000), rng.uniform(-1.5, 2.5, 1000), rng.uniform(-4, 4, 1000)])
    expected = np.array([marg[0].pdf(p[0]) * marg[1].pdf(p[1]) * marg[2].pdf(p[2]) for p in pts])
    assert np.array_equal(prod.pdf_batch(pts), expected)
    assert prod.support == SupportBox((0.84, -1.0, -3.0), (1.0, 2.0, 3.0))


@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(0.1, 5), st.floats(0.1, 5))
def test_pdf_nonnegative_and_zero_outside(mu, sigma, dl, dh):
    d = TruncatedNormal(mu, sigma, mu - dl, mu + dh)
    xs = np.linspace(mu - dl - 1, mu + dh + 1, 101)
    p = d.pdf_batch(xs.reshape(-1, 1))
    assert np.all(p >= 0)
    outside = (xs < d.lo) | (xs > d.hi)
    assert np.all(p[outside] == 0)


def test_config_round_trip():
    for d in [ALPHA, Uniform(0.5, 1.5)]:
        assert density_from_config(d.to_config()) == d
    with pytest.raises(ValueError):
        density_from_config({"type": "uniform", "lo": 0, "hi": 1, "extra": 3})
    with pytest.raises(ValueError):
        density_from_config({"type": "cauchy"})


@pytest.mark.parametrize("args", [(0, 0, -1, 1), (0, 1, 1, 1), (0, 1, 2, 1), (0, 1, 40, 41)])
def test_invalid_truncated_normal(args):
    with pytest.raises(ValueError):
        TruncatedNormal(*args)
