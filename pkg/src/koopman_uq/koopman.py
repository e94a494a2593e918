"""Koopman expectations: E[g(S(X))] with X ~ f0, by quadrature over supp f0.

The pulled-back observable ``g o S`` is evaluated pointwise by simulating the
system map at each quadrature node; one simulation serves every component of
a vector-valued observable.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import quad
from .dynsys import SystemMap
from .prob import Density, ProductDensity, SupportBox


class DegenerateObservableError(ValueError):
    """An observable has zero variance where a correlation needs it positive."""


@dataclass(frozen=True)
class Observable:
    """Vectorised observable ``fn(states (n, dim), times (n,)) -> (n, dim_out)``."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dim_out: int = 1
    labels: tuple = ()

    def __post_init__(self):
        if self.dim_out < 1:
            raise ValueError("dim_out must be at least 1")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"g{i}" for i in range(self.dim_out)))

    def __call__(self, states, times=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if times is None:
            times = np.zeros(states.shape[0])
        out = np.asarray(self.fn(states, np.asarray(times, dtype=float)), dtype=float)
        return out.reshape(states.shape[0], self.dim_out)

    @classmethod
    def component(cls, index: int, label: str | None = None) -> "Observable":
        return cls(lambda y, t: y[:, index], 1, (label or f"y{index}",))

    @classmethod
    def constant(cls, c: float = 1.0) -> "Observable":
        return cls(lambda y, t: np.full(y.shape[0], float(c)), 1, (repr(c),))

    @classmethod
    def stack(cls, observables: Sequence["Observable"]) -> "Observable":
        obs = tuple(observables)

        def fn(y, t):
            return np.column_stack([o(y, t) for o in obs])

        labels = tuple(l for o in obs for l in o.labels)
        return cls(fn, sum(o.dim_out for o in obs), labels)

    def affine(self, a: float, b: float = 0.0) -> "Observable":
        return Observable(lambda y, t: a * self(y, t) + b, self.dim_out, tuple(f"{a}*{l}+{b}" for l in self.labels))


@dataclass(frozen=True)
class Coordinate:
    """One uncertain input: initial-state component or parameter, with its density."""

    kind: str
    index: int
    density: Density

    def __post_init__(self):
        if self.kind not in ("state", "param"):
            raise ValueError("coordinate kind must be 'state' or 'param'")
        if self.density.dim != 1:
            raise ValueError("coordinate densities must be one-dimensional")


@dataclass(frozen=True)
class UncertaintyProblem:
    """Binds uncertain coordinates of a system map to independent densities.

    Uncertain parameters are substituted directly rather than appended as
    extra states with zero dynamics; the two are equivalent.
    """

    map: object
    uncertain: tuple
    x0: tuple
    params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "uncertain", tuple(self.uncertain))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        if len(self.x0) != self.map.dim:
            raise ValueError(f"x0 has {len(self.x0)} entries, map state has {self.map.dim}")
        if len(self.params) != self.map.n_params:
            raise ValueError(f"params has {len(self.params)} entries, map expects {self.map.n_params}")
        seen = set()
        for c in self.uncertain:
            key = (c.kind, c.index)
            limit = self.map.dim if c.kind == "state" else self.map.n_params
            if not 0 <= c.index < limit:
                raise ValueError(f"{c.kind} index {c.index} out of range")
            if key in seen:
                raise ValueError(f"coordinate {key} bound twice")
            seen.add(key)

    @property
    def dim(self) -> int:
        return len(self.uncertain)

    @property
    def density(self) -> ProductDensity:
        return ProductDensity([c.density for c in self.uncertain])

    @property
    def support(self) -> SupportBox:
        return self.density.support

    def inputs(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Expand ``(n, dim)`` uncertain points into initial states and parameters."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        n = pts.shape[0]
        x0 = np.tile(np.asarray(self.x0), (n, 1))
        p = np.tile(np.asarray(self.params), (n, 1)) if self.params else np.zeros((n, 0))
        for j, c in enumerate(self.uncertain):
            (x0 if c.kind == "state" else p)[:, c.index] = pts[:, j]
        return x0, p

    def with_map(self, new_map) -> "UncertaintyProblem":
        from dataclasses import replace

        return replace(self, map=new_map)


@dataclass(frozen=True)
class ExpectationResult:
    value: np.ndarray
    error: np.ndarray
    evals: int
    wall_time: float
    converged: bool
    n_regions: int = 1

    def __float__(self):
        return float(self.value[0])


@dataclass(frozen=True)
class Statistic:
    value: float
    error: float
    expectation: ExpectationResult

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class Moments:
    """Central moments of orders ``2..n`` (the first central moment is 0)."""

    orders: tuple
    values: np.ndarray
    errors: np.ndarray
    mean: float
    expectation: ExpectationResult

    def __getitem__(self, order: int) -> float:
        if order == 1:
            return 0.0
        return float(self.values[self.orders.index(order)])


def _simulate(m, x0, p):
    res = m.simulate(x0, p)
    res.raise_on_failure(np.hstack([x0, p]))
    return res.states, res.times


def koopman_apply(system, g: Observable) -> Callable[[np.ndarray], np.ndarray]:
    """Return the pulled-back observable ``x -> g(S(x))`` (vectorised over rows).

    ``system`` is either an :class:`UncertaintyProblem` (``x`` are points in
    its uncertain coordinates) or a bare map (``x`` are initial states).
    """
    if isinstance(system, UncertaintyProblem):
        prob = system

        def pulled(points):
            x0, p = prob.inputs(points)
            y, t = _simulate(prob.map, x0, p)
            return g(y, t)

        return pulled

    m = system

    def pulled_map(x):
        x0 = np.array(x, dtype=float, ndmin=2)
        if x0.shape[1] != m.dim and m.dim == 1:
            x0 = x0.reshape(-1, 1)
        p = np.zeros((x0.shape[0], m.n_params))
        y, t = _simulate(m, x0, p)
        return g(y, t)

    return pulled_map


def coupled_ode_tolerance(quad_rtol: float) -> float:
    return min(1e-8, quad_rtol / 100)


def _with_coupled_tolerance(prob: UncertaintyProblem, rtol: float) -> UncertaintyProblem:
    """Tighten ODE and event tolerances of an ODE map to match the quadrature.

    Event times follow the ODE tolerance down to 1e-14 (relative to the
    horizon); otherwise event-location jitter would dominate the integrand
    noise at tight quadrature tolerances.
    """
    m = prob.map
    if isinstance(m, SystemMap):
        tol = coupled_ode_tolerance(rtol)
        ev = max(1e-14, min(m.event_tol, tol / 100))
        span = m.t_max - m.t0
        ev_t = m.event_tol_t if m.event_tol_t is not None else 1e-10 * span
        ev_t = max(1e-14 * span, min(ev_t, ev * span))
        if m.rtol > tol or m.atol > tol or ev < m.event_tol or ev_t < (m.event_tol_t or 1e-10 * span):
            return prob.with_map(replace(m, rtol=min(m.rtol, tol), atol=min(m.atol, tol), event_tol=ev, event_tol_t=ev_t))
    return prob


def koopman_expectation(prob: UncertaintyProblem, g: Observable, rtol: float = 1e-6, atol: float = 1e-6,
                        max_evals: int = 1_000_000, workers: Optional[int] = None,
                        couple_tolerances: bool = True) -> ExpectationResult:
    """E[g(S(X))] for X ~ f0 by h-adaptive quadrature over the support of f0.

    With ``couple_tolerances`` the ODE tolerances of an ODE map are tightened
    to ``min(1e-8, rtol/100)`` so that integrand noise stays below the
    quadrature error estimate.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    if prob.dim == 0:
        raise ValueError("problem has no uncertain coordinates")
    if couple_tolerances:
        prob = _with_coupled_tolerance(prob, rtol)
    pulled = koopman_apply(prob, g)
    dens = prob.density

    def integrand(points):
        pts = np.asarray(points, dtype=float).reshape(-1, prob.dim)
        return pulled(pts) * dens.pdf_batch(pts)[:, None]

    box = prob.support
    t0 = time.perf_counter()
    res = quad.integrate_nd(integrand, box.lo, box.hi, rtol=rtol, atol=atol, max_evals=max_evals, workers=workers)
    wall = time.perf_counter() - t0
    return ExpectationResult(res.value, res.error, res.evals, wall, res.converged, res.n_regions)


# -- decomposition of statistics into mean observables ------------------------

@dataclass(frozen=True)
class Monomial:
    """Product of powers of base random variables, e.g. ``z1^1 z2^1``."""

    powers: tuple

    @property
    def label(self) -> str:
        if len(self.powers) == 1:
            k = self.powers[0]
            return "z" if k == 1 else f"z^{k}"
        parts = []
        for i, k in enumerate(self.powers, start=1):
            if k == 1:
                parts.append(f"z{i}")
            elif k > 1:
                parts.append(f"z{i}^{k}")
        return " ".join(parts)


def mean_observable_decomposition(stat: str, n: int | None = None) -> tuple[Monomial, ...]:
    """Mean observables whose expectations determine a statistic.

    ``"central_moment"`` (order ``n``) needs z..z^n; ``"covariance"`` needs
    z1, z2, z1 z2; ``"correlation"`` additionally needs z1^2 and z2^2.
    """
    if stat == "central_moment":
        if n is None or n < 2:
            raise ValueError("central moments need an order n >= 2")
        return tuple(Monomial((k,)) for k in range(1, n + 1))
    if n is not None:
        raise ValueError(f"{stat} takes no order")
    if stat == "covariance":
        return (Monomial((1, 0)), Monomial((0, 1)), Monomial((1, 1)))
    if stat == "correlation":
        return (Monomial((1, 0)), Monomial((2, 0)), Monomial((0, 1)), Monomial((0, 2)), Monomial((1, 1)))
    raise ValueError(f"unknown statistic {stat!r}")


def monomial_observable(monomials: Sequence[Monomial], bases: Sequence[Observable]) -> Observable:
    """Vector observable evaluating each monomial of the scalar ``bases``."""
    for b in bases:
        if b.dim_out != 1:
            raise ValueError("base observables must be scalar")
    monos = tuple(monomials)

    def fn(y, t):
        z = [b(y, t)[:, 0] for b in bases]
        cols = []
        for mono in monos:
            col = np.ones(y.shape[0])
            for zi, k in zip(z, mono.powers):
                if k:
                    col = col * zi**k
            cols.append(col)
        return np.column_stack(cols)

    return Observable(fn, len(monos), tuple(m.label for m in monos))


def central_from_raw(raw: Sequence[float], n: int) -> float:
    """Binomial recombination of raw moments ``raw[k-1] = E[Z^k]`` into E[(Z-EZ)^n].

    The sum is formed in exact rational arithmetic from the float inputs,
    which removes cancellation in the recombination itself.
    """
    mu = Fraction(float(raw[0]))
    total = Fraction(0)
    for k in range(0, n + 1):
        ek = Fraction(1) if k == 0 else Fraction(float(raw[k - 1]))
        total += math.comb(n, k) * (-mu) ** (n - k) * ek
    return float(total)


def _central_error(raw, err, n):
    mu = raw[0]
    # first-order propagation through the recombination
    sens_mu = sum(math.comb(n, k) * (n - k) * (-1) ** (n - k) * mu ** (n - k - 1) * (1.0 if k == 0 else raw[k - 1])
                  for k in range(0, n))
    out = abs(sens_mu) * err[0]
    for k in range(2, n + 1):
        out += abs(math.comb(n, k) * (-mu) ** (n - k)) * err[k - 1]
    return out


def central_moments(prob: UncertaintyProblem, g: Observable, n: int, rtol: float = 1e-6, atol: float = 1e-6,
                    **kw) -> Moments:
    """Central moments 2..n of the scalar random variable g(S(X))."""
    if not 2 <= n <= 8:
        raise ValueError("moment order must be in 2..8")
    monos = mean_observable_decomposition("central_moment", n)
    res = koopman_expectation(prob, monomial_observable(monos, [g]), rtol, atol, **kw)
    raw = [float(v) for v in res.value]
    err = [float(e) for e in res.error]
    orders = tuple(range(2, n + 1))
    vals = np.array([central_from_raw(raw, k) for k in orders])
    errs = np.array([_central_error(raw, err, k) for k in orders])
    return Moments(orders, vals, errs, raw[0], res)


def covariance(prob: UncertaintyProblem, g1: Observable, g2: Observable, rtol: float = 1e-6, atol: float = 1e-6,
               **kw) -> Statistic:
    monos = mean_observable_decomposition("covariance")
    res = koopman_expectation(prob, monomial_observable(monos, [g1, g2]), rtol, atol, **kw)
    e1, e2, e12 = (float(v) for v in res.value)
    d1, d2, d12 = (float(v) for v in res.error)
    value = float(Fraction(e12) - Fraction(e1) * Fraction(e2))
    return Statistic(value, d12 + abs(e2) * d1 + abs(e1) * d2, res)


def correlation(prob: UncertaintyProblem, g1: Observable, g2: Observable, rtol: float = 1e-6, atol: float = 1e-6,
                **kw) -> Statistic:
    monos = mean_observable_decomposition("correlation")
    res = koopman_expectation(prob, monomial_observable(monos, [g1, g2]), rtol, atol, **kw)
    e1, e11, e2, e22, e12 = (Fraction(float(v)) for v in res.value)
    d1, d11, d2, d22, d12 = (float(v) for v in res.error)
    cov = float(e12 - e1 * e2)
    var1 = float(e11 - e1 * e1)
    var2 = float(e22 - e2 * e2)
    var1_err = d11 + 2 * abs(float(e1)) * d1
    var2_err = d22 + 2 * abs(float(e2)) * d2
    if var1 <= var1_err or var2 <= var2_err or var1 <= 0 or var2 <= 0:
        raise DegenerateObservableError(
            f"variance not resolved above its error (var1={var1:.3g}+-{var1_err:.3g}, var2={var2:.3g}+-{var2_err:.3g})"
        )
    rho = cov / math.sqrt(var1 * var2)
    cov_err = d12 + abs(float(e2)) * d1 + abs(float(e1)) * d2
    err = abs(rho) * (cov_err / max(abs(cov), 1e-300) + 0.5 * var1_err / var1 + 0.5 * var2_err / var2)
    if abs(rho) > 1.0:
        if abs(rho) - 1.0 > err:
            warnings.warn(f"correlation {rho!r} exceeds 1 by more than its error {err:.3g}; clamping", RuntimeWarning)
        rho = math.copysign(1.0, rho)
    return Statistic(rho, err, res)


# -- Frobenius-Perron push-forward (1-D check) -----------------------------------

class PushforwardDensity(Density):
    """Density of S(X) for X ~ f and a strictly monotone, differentiable S."""

    def __init__(self, forward, inverse, inverse_derivative, base: Density):
        self.forward = forward
        self.inverse = inverse
        self.inverse_derivative = inverse_derivative
        self.base = base
        lo, hi = base.support.lo[0], base.support.hi[0]
        a, b = float(forward(np.array([lo]))[0]), float(forward(np.array([hi]))[0])
        self._support = SupportBox((min(a, b),), (max(a, b),))

    @property
    def support(self) -> SupportBox:
        return self._support

    def _pdf_rows(self, x):
        v = x[:, 0]
        pre = self.inverse(v)
        dens = self.base._pdf_rows(pre.reshape(-1, 1)) * np.abs(self.inverse_derivative(v))
        inside = (v >= self._support.lo[0]) & (v <= self._support.hi[0])
        return np.where(inside, dens, 0.0)

    def ppf(self, u):
        y = self.forward(self.base.ppf(u))
        return y


def fp_pushforward_1d(forward, inverse, inverse_derivative, f: Density, check_points: int = 257) -> PushforwardDensity:
    """P_S f(x) = f(S^-1(x)) |dS^-1/dx| for a strictly monotone map S."""
    if f.dim != 1:
        raise ValueError("push-forward is implemented for 1-D densities only")
    lo, hi = f.support.lo[0], f.support.hi[0]
    xs = np.linspace(lo, hi, check_points)
    ys = np.asarray(forward(xs), dtype=float)
    dy = np.diff(ys)
    if not (np.all(dy > 0) or np.all(dy < 0)):
        raise ValueError("map is not strictly monotone on the support")
    back = np.asarray(inverse(ys), dtype=float)
    if not np.allclose(back, xs, rtol=1e-9, atol=1e-9 * max(1.0, abs(lo), abs(hi))):
        raise ValueError("supplied inverse does not invert the map")
    return PushforwardDensity(forward, inverse, inverse_derivative, f)
