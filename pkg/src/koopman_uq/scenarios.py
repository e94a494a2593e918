"""Built-in scenarios, foremost the bouncing ball with its closed-form oracle.

Ball state is ``(x, xdot, z, zdot, airborne)`` with parameters ``(g, alpha)``.
The ball is thrown horizontally towards a wall at ``x = x*``; ground impacts
reverse ``zdot`` scaled by the restitution coefficient ``alpha``.  The map
returns the state at wall impact, and the observable of interest is the
squared vertical miss ``(z - z*)^2``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Polynomial
from scipy import optimize

from .dynsys import Event, OdeSystem, SystemMap
from .koopman import Coordinate, Observable, UncertaintyProblem
from .prob import Density, TruncatedNormal, Uniform, density_from_config

G_DEFAULT = 9.807
REST_SPEED = 1e-3

# Minimiser of the expected squared miss over the flight time T = (x* - x0)/xdot0
# on the face xdot0 = 3, z0 = 50 of the design box.
OPTIMIZED_FLIGHT_TIME = 10.283583268
OPTIMIZED_X0 = 25.0 - 3.0 * OPTIMIZED_FLIGHT_TIME


@dataclass(frozen=True)
class BouncingBallParams:
    x0: float = 0.0
    xdot0: float = 2.0
    z0: float = 50.0
    zdot0: float = 0.0
    g_accel: float = G_DEFAULT
    target: tuple = (25.0, 25.0)
    alpha_density: Density = TruncatedNormal(0.9, 0.02, 0.84, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        if not self.target[0] > self.x0:
            raise ValueError("the wall must lie ahead of the ball (x* > x0)")
        if not self.xdot0 > 0:
            raise ValueError("xdot0 must be positive for the wall to be reached")
        if not self.z0 > 0:
            raise ValueError("z0 must be positive")
        if not self.g_accel > 0:
            raise ValueError("g_accel must be positive")

    @property
    def flight_time(self) -> float:
        """T: time to reach the wall."""
        return (self.target[0] - self.x0) / self.xdot0

    @property
    def impact_speed(self) -> float:
        """A: vertical speed at the first ground impact."""
        return math.sqrt(2.0 * self.g_accel * self.z0)

    @property
    def bounce_period(self) -> float:
        """B: duration of a full flight launched at speed A (twice the first fall time)."""
        return math.sqrt(8.0 * self.z0 / self.g_accel)

    def to_config(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["target"] = list(self.target)
        d["alpha_density"] = self.alpha_density.to_config()
        return d

    @classmethod
    def from_config(cls, cfg: dict) -> "BouncingBallParams":
        cfg = dict(cfg)
        known = {f.name for f in fields(cls)}
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown bouncing-ball keys: {sorted(extra)}")
        if "alpha_density" in cfg and isinstance(cfg["alpha_density"], dict):
            cfg["alpha_density"] = density_from_config(cfg["alpha_density"])
        return cls(**cfg)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


def _require_rest_start(prm: BouncingBallParams) -> None:
    if prm.zdot0 != 0.0:
        raise ValueError("the closed-form ball formulas assume zdot0 = 0")


def bounce_parameter(alpha: float, prm: BouncingBallParams) -> float:
    """b(alpha) = log(1 - (1 - alpha)(T/B + 1/2)) / log(alpha); inf if the ball settles first.

    The n-th ground impact happens at B((1 - alpha^n)/(1 - alpha) - 1/2), so
    n impacts precede the wall exactly when n <= b(alpha).
    """
    alpha = _check_alpha(alpha)
    c = prm.flight_time / prm.bounce_period + 0.5
    if alpha == 1.0:
        return c
    arg = -(1.0 - alpha) * c
    if arg <= -1.0:
        return math.inf
    return math.log1p(arg) / math.log1p(alpha - 1.0)


def bounce_count(alpha: float, prm: BouncingBallParams) -> int:
    """Number of ground impacts before the wall, floor(b(alpha))."""
    _require_rest_start(prm)
    b = bounce_parameter(alpha, prm)
    if math.isinf(b):
        raise ValueError(f"at alpha={alpha} the ball comes to rest before reaching the wall")
    return int(math.floor(b))


def _impact_time(alpha: float, n: int, B: float) -> float:
    if n == 0:
        return 0.0
    return B * (0.5 + math.fsum(alpha**i for i in range(1, n)))


def impact_height(alpha: float, prm: BouncingBallParams) -> float:
    """Height H(alpha) at which the ball meets the wall."""
    n = bounce_count(alpha, prm)
    T, g = prm.flight_time, prm.g_accel
    if n == 0:
        return prm.z0 - 0.5 * g * T * T
    tr = T - _impact_time(alpha, n, prm.bounce_period)
    return alpha**n * prm.impact_speed * tr - 0.5 * g * tr * tr


def impact_height_cubic(alpha, prm: BouncingBallParams):
    """Two-bounce closed form -AB a^3 + (AC - gB^2/2) a^2 + gBC a - gC^2/2, C = T - B/2."""
    A, B, g = prm.impact_speed, prm.bounce_period, prm.g_accel
    C = prm.flight_time - 0.5 * B
    a = np.asarray(alpha, dtype=float)
    return -A * B * a**3 + (A * C - 0.5 * g * B * B) * a**2 + g * B * C * a - 0.5 * g * C * C


def height_polynomial(n: int, prm: BouncingBallParams) -> Polynomial:
    """H(alpha) as a polynomial, valid where exactly n impacts occur."""
    _require_rest_start(prm)
    T, g, A, B = prm.flight_time, prm.g_accel, prm.impact_speed, prm.bounce_period
    if n == 0:
        return Polynomial([prm.z0 - 0.5 * g * T * T])
    # t_r = T - B/2 - B (alpha + ... + alpha^(n-1))
    tr = Polynomial([T - 0.5 * B] + [-B] * (n - 1))
    return Polynomial([0.0] * n + [A]) * tr - 0.5 * g * tr * tr


def validity_range(prm: BouncingBallParams, n: int = 2) -> tuple[float, float]:
    """Interval (lo, hi] of alpha on which exactly n impacts precede the wall.

    b is non-increasing in alpha, so the lower edge solves b = n + 1 and the
    upper edge solves b = n (or is 1 when b(1) >= n).
    """
    _require_rest_start(prm)
    c = prm.flight_time / prm.bounce_period + 0.5
    b1 = bounce_parameter(1.0, prm)
    if b1 >= n + 1:
        raise ValueError(f"at least {math.floor(b1)} impacts occur for every alpha; n={n} is never realised")
    # b blows up as alpha decreases to 1 - 1/c (or to 0 when c <= 1)
    a_min = (1.0 - 1.0 / c if c > 1 else 0.0) + 1e-12
    f = lambda a, k: bounce_parameter(a, prm) - k
    lo = optimize.brentq(f, a_min, 1.0, args=(n + 1,), xtol=1e-15)
    hi = 1.0 if b1 >= n else optimize.brentq(f, lo, 1.0, args=(n,), xtol=1e-15)
    return lo, hi


def two_bounce_threshold(prm: BouncingBallParams) -> float:
    """Smallest alpha with at most two impacts, from b(alpha) = 3."""
    return validity_range(prm, 2)[0]


def expectation_polynomial(prm: BouncingBallParams, n: int) -> Polynomial:
    z_star = prm.target[1]
    h = height_polynomial(n, prm) - z_star
    return h * h


def analytic_expectation(prm: BouncingBallParams, density: Optional[Density] = None) -> float:
    """E[(H(alpha) - z*)^2] as a weighted sum of raw moments of the alpha density.

    Requires the density support to sit inside a range of constant bounce
    count n with a polynomial of degree at most 6 (n <= 2).
    """
    dens = prm.alpha_density if density is None else density
    if not hasattr(dens, "raw_moment"):
        raise TypeError("density must provide closed-form raw moments")
    lo_s, hi_s = dens.support.lo[0], dens.support.hi[0]
    n = bounce_count(hi_s, prm)
    lo_v, hi_v = validity_range(prm, n)
    if not (lo_s > lo_v and hi_s <= hi_v):
        raise ValueError(
            f"alpha support [{lo_s}, {hi_s}] leaves the {n}-impact range ({lo_v:.6g}, {hi_v:.6g}]"
        )
    poly = expectation_polynomial(prm, n)
    coef = poly.coef
    if len(coef) > 7:
        raise ValueError(f"{n} impacts give a degree-{len(coef) - 1} polynomial; raw moments go to 6 only")
    return math.fsum([coef[0]] + [coef[k] * dens.raw_moment(k) for k in range(1, len(coef))])


# -- simulation model ----------------------------------------------------------

def _ball_drift(t, y, p):
    out = np.zeros_like(y)
    out[:, 0] = y[:, 1]
    out[:, 2] = y[:, 3]
    out[:, 3] = -p[:, 0] * y[:, 4]
    return out


def _ground_condition(t, y, p):
    return y[:, 2]


def _bounce(t, y, p):
    y = y.copy()
    y[:, 3] = -p[:, 1] * y[:, 3]
    # below the rest speed the remaining hops (apex ~5e-8 m) are not worth
    # resolving one by one, so the ball is put to rest on the ground
    rest = np.abs(y[:, 3]) < REST_SPEED
    y[rest, 2] = 0.0
    y[rest, 3] = 0.0
    y[rest, 4] = 0.0
    return y


def ball_map(prm: BouncingBallParams, rtol: float = 1e-8, atol: float = 1e-8) -> SystemMap:
    x_wall = prm.target[0]
    wall = Event(lambda t, y, p: y[:, 0] - x_wall, None, terminal=True, direction=1)
    ground = Event(_ground_condition, _bounce, terminal=False, direction=-1)
    t_max = 1.5 * prm.flight_time + 10.0
    return SystemMap(OdeSystem(_ball_drift, 5, 2), (ground, wall), t_max=t_max, rtol=rtol, atol=atol)


def ball_problem(prm: BouncingBallParams, rtol: float = 1e-8, atol: float = 1e-8) -> UncertaintyProblem:
    alpha_nominal = prm.alpha_density.ppf(np.array([0.5]))[0]
    return UncertaintyProblem(
        ball_map(prm, rtol, atol),
        (Coordinate("param", 1, prm.alpha_density),),
        (prm.x0, prm.xdot0, prm.z0, prm.zdot0, 1.0),
        (prm.g_accel, float(alpha_nominal)),
    )


def squared_miss(z_star: float = 25.0) -> Observable:
    return Observable(lambda y, t: (y[:, 2] - z_star) ** 2, 1, ("(z-z*)^2",))


def wall_height() -> Observable:
    return Observable.component(2, "z")


# -- exponential decay ---------------------------------------------------------

@dataclass(frozen=True)
class DecayParams:
    """y' = -k y on [0, T] with uncertain y0 and k."""

    T: float = 1.0
    y0_density: Density = Uniform(0.5, 1.5)
    k_density: Density = TruncatedNormal(1.0, 0.2, 0.2, 2.0)

    def to_config(self) -> dict:
        return {"T": self.T, "y0_density": self.y0_density.to_config(), "k_density": self.k_density.to_config()}

    @classmethod
    def from_config(cls, cfg: dict) -> "DecayParams":
        cfg = dict(cfg)
        extra = set(cfg) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown decay keys: {sorted(extra)}")
        for key in ("y0_density", "k_density"):
            if isinstance(cfg.get(key), dict):
                cfg[key] = density_from_config(cfg[key])
        return cls(**cfg)


def decay_problem(prm: DecayParams, rtol: float = 1e-8, atol: float = 1e-8) -> UncertaintyProblem:
    m = SystemMap(OdeSystem(lambda t, y, p: -p[:, :1] * y, 1, 1), t_max=prm.T, rtol=rtol, atol=atol)
    return UncertaintyProblem(
        m,
        (Coordinate("state", 0, prm.y0_density), Coordinate("param", 0, prm.k_density)),
        (1.0,),
        (1.0,),
    )


def _exp_moment(d: Density, s: float) -> float:
    """E[exp(s K)] for a truncated normal or uniform K."""
    if isinstance(d, Uniform):
        if s == 0:
            return 1.0
        return (math.exp(s * d.hi) - math.exp(s * d.lo)) / (s * (d.hi - d.lo))
    if isinstance(d, TruncatedNormal):
        from scipy.special import ndtr

        a, b = (d.lo - d.mu) / d.sigma, (d.hi - d.mu) / d.sigma
        num = ndtr(b - d.sigma * s) - ndtr(a - d.sigma * s)
        return math.exp(d.mu * s + 0.5 * d.sigma**2 * s * s) * num / d.normalization
    raise TypeError("no closed-form exponential moment for this density")


def decay_expectation(prm: DecayParams) -> float:
    """E[y0 exp(-k T)] = E[y0] E[exp(-T k)] by independence."""
    return prm.y0_density.raw_moment(1) * _exp_moment(prm.k_density, -prm.T)


# -- registry ------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """A named problem: parameters, a builder and optionally a closed-form value."""

    name: str
    description: str
    params: object
    build: Callable  # (params, ode_rtol, ode_atol) -> (UncertaintyProblem, Observable)
    analytic: Optional[Callable] = None

    def with_overrides(self, overrides: dict | None) -> "Scenario":
        if not overrides:
            return self
        cfg = self.params.to_config()
        unknown = set(overrides) - set(cfg)
        if unknown:
            raise ValueError(f"unknown parameter overrides for {self.name}: {sorted(unknown)}")
        cfg.update(overrides)
        return replace(self, params=type(self.params).from_config(cfg))

    def problem(self, ode_rtol: float = 1e-8, ode_atol: float = 1e-8):
        return self.build(self.params, ode_rtol, ode_atol)

    def oracle(self) -> float:
        if self.analytic is None:
            raise ValueError(f"scenario {self.name} has no closed-form oracle")
        return self.analytic(self.params)


def _build_ball(prm, rtol, atol):
    return ball_problem(prm, rtol, atol), squared_miss(prm.target[1])


def _build_decay(prm, rtol, atol):
    return decay_problem(prm, rtol, atol), Observable.component(0, "y(T)")


@dataclass(frozen=True)
class WienerParams:
    """y' = W'(t), y(0) = 0, with W a truncated KL expansion on [0, T]."""

    T: float = 1.0
    K: int = 4

    def to_config(self) -> dict:
        return {"T": self.T, "K": self.K}

    @classmethod
    def from_config(cls, cfg: dict) -> "WienerParams":
        extra = set(cfg) - {"T", "K"}
        if extra:
            raise ValueError(f"unknown wiener keys: {sorted(extra)}")
        return cls(float(cfg.get("T", 1.0)), int(cfg.get("K", 4)))


def wiener_problem(prm: WienerParams, rtol: float = 1e-8, atol: float = 1e-8):
    from .noise import KLNoise, noisy_problem

    m = SystemMap(OdeSystem(lambda t, y, p: np.zeros_like(y), 1, 0), t_max=prm.T, rtol=rtol, atol=atol)
    base = UncertaintyProblem(m, (), (0.0,), ())
    return noisy_problem(base, KLNoise(prm.T, prm.K), lambda t, y, p: 1.0)


def _build_wiener(prm, rtol, atol):
    return wiener_problem(prm, rtol, atol), Observable(lambda y, t: y[:, 0] ** 2, 1, ("y(T)^2",))


def _wiener_oracle(prm):
    from .noise import kl_variance

    return kl_variance(prm.K, prm.T)


SCENARIOS = {
    "bouncing_ball": Scenario(
        "bouncing_ball",
        "ball thrown at a wall with uncertain restitution; E[(z - z*)^2] at wall impact",
        BouncingBallParams(),
        _build_ball,
        analytic_expectation,
    ),
    "bouncing_ball_optimized": Scenario(
        "bouncing_ball_optimized",
        "bouncing ball at the optimised launch (x0, xdot0, z0) = (25 - 3 T*, 3, 50)",
        BouncingBallParams(x0=OPTIMIZED_X0, xdot0=3.0, z0=50.0),
        _build_ball,
        analytic_expectation,
    ),
    "exp_decay": Scenario(
        "exp_decay",
        "y' = -k y with uncertain y0 and k; E[y(T)]",
        DecayParams(),
        _build_decay,
        decay_expectation,
    ),
    "stiff_decay": Scenario(
        "stiff_decay",
        "fast decay, k ~ U(20, 40): the pushed-forward density piles up near 0 while E[y(T)] stays smooth",
        DecayParams(T=0.25, y0_density=Uniform(0.5, 1.5), k_density=Uniform(20.0, 40.0)),
        _build_decay,
        decay_expectation,
    ),
    "wiener_kl": Scenario(
        "wiener_kl",
        "y' = W'(t) with a 4-term KL path; E[y(T)^2]",
        WienerParams(),
        _build_wiener,
        _wiener_oracle,
    ),
}


def get_scenario(name: str, overrides: dict | None = None) -> Scenario:
    try:
        sc = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return sc.with_overrides(overrides)
