"""Probability densities on finite boxes.

Every density here has a finite support box; unbounded normals are cut at
``NORMAL_CUTOFF`` standard deviations, where the dropped mass is below 1e-15.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import special

NORMAL_CUTOFF = 8.0
MAX_RAW_MOMENT = 6

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(x: float) -> float:
    if math.isinf(x):
        return 0.0
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _mass_between(a: float, b: float) -> float:
    """P(a < Z < b) for a standard normal Z, accurate in both tails."""
    if a >= 0.0:
        return 0.5 * (math.erfc(a / math.sqrt(2.0)) - math.erfc(b / math.sqrt(2.0)))
    if b <= 0.0:
        return 0.5 * (math.erfc(-b / math.sqrt(2.0)) - math.erfc(-a / math.sqrt(2.0)))
    return 1.0 - 0.5 * (math.erfc(-a / math.sqrt(2.0)) + math.erfc(b / math.sqrt(2.0)))


@dataclass(frozen=True)
class SupportBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lo and hi must be non-empty and of equal length")
        for a, b in zip(lo, hi):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError("support box must be finite")
            if not a < b:
                raise ValueError(f"empty support interval [{a}, {b}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return math.prod(b - a for a, b in zip(self.lo, self.hi))

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((x >= lo) & (x <= hi), axis=1)


class Density:
    """Base for 1-D marginals and product densities.

    Subclasses provide ``support``, ``pdf`` (vectorised over rows of an
    ``(n, dim)`` array) and ``ppf`` (inverse CDF on ``(n, dim)`` uniforms).
    """

    dim = 1

    @property
    def support(self) -> SupportBox:
        raise NotImplementedError

    def _pdf_rows(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def ppf(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, x) -> float:
        """Density at a single point (a scalar is accepted for 1-D densities)."""
        arr = np.atleast_1d(np.asarray(x, dtype=float))
        if arr.shape != (self.dim,):
            raise ValueError(f"point of shape {arr.shape} does not match density dimension {self.dim}")
        return float(self._pdf_rows(arr.reshape(1, -1))[0])

    def pdf_batch(self, x) -> np.ndarray:
        """Density at each row of an ``(n, dim)`` array."""
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 1 and self.dim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ValueError(f"points of shape {arr.shape} do not match density dimension {self.dim}")
        return self._pdf_rows(arr)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Inverse-CDF draws; exactly ``dim`` uniforms are consumed per point."""
        m = 1 if n is None else n
        u = rng.random((m, self.dim))
        x = self.ppf(u)
        return x[0] if n is None else x

    def to_config(self) -> Any:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(Density):
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid uniform support [{self.lo}, {self.hi}]")

    @property
    def support(self) -> SupportBox:
        return SupportBox((self.lo,), (self.hi,))

    def _pdf_rows(self, x):
        v = x[:, 0]
        inside = (v >= self.lo) & (v <= self.hi)
        return np.where(inside, 1.0 / (self.hi - self.lo), 0.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return self.lo + u * (self.hi - self.lo)

    def raw_moment(self, k: int) -> float:
        _check_order(k)
        return (self.hi ** (k + 1) - self.lo ** (k + 1)) / ((k + 1) * (self.hi - self.lo))

    def to_config(self):
        return {"type": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class TruncatedNormal(Density):
    """Normal(mu, sigma) restricted to [lo, hi] and renormalised."""

    mu: float
    sigma: float
    lo: float
    hi: float
    _a: float = field(init=False, repr=False, compare=False)
    _b: float = field(init=False, repr=False, compare=False)
    _mass: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be positive and finite")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"invalid truncation interval [{self.lo}, {self.hi}]")
        a = (self.lo - self.mu) / self.sigma
        b = (self.hi - self.mu) / self.sigma
        mass = _mass_between(a, b)
        if not mass > 0.0:
            raise ValueError("truncation interval carries no probability mass")
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_b", b)
        object.__setattr__(self, "_mass", mass)

    @classmethod
    def standard(cls, mu: float = 0.0, sigma: float = 1.0) -> "TruncatedNormal":
        """A nominally unbounded normal, cut at the default cutoff."""
        return cls(mu, sigma, mu - NORMAL_CUTOFF * sigma, mu + NORMAL_CUTOFF * sigma)

    @property
    def support(self) -> SupportBox:
        return SupportBox((self.lo,), (self.hi,))

    @property
    def normalization(self) -> float:
        return self._mass

    def _pdf_rows(self, x):
        v = x[:, 0]
        z = (v - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) * (_INV_SQRT_2PI / (self.sigma * self._mass))
        return np.where((v >= self.lo) & (v <= self.hi), dens, 0.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        a, b = self._a, self._b
        if a > 0.0:
            # upper tail: work with survival probabilities to keep precision
            sa, sb = special.ndtr(-a), special.ndtr(-b)
            z = -special.ndtri(sa - u * (sa - sb))
        else:
            ca, cb = special.ndtr(a), special.ndtr(b)
            z = special.ndtri(ca + u * (cb - ca))
        return np.clip(self.mu + self.sigma * z, self.lo, self.hi)

    def raw_moment(self, k: int) -> float:
        """E[X^k] from the integration-by-parts recurrence

        m_k = mu m_{k-1} + (k-1) sigma^2 m_{k-2}
              - sigma (hi^{k-1} phi(b) - lo^{k-1} phi(a)) / Z
        """
        _check_order(k)
        a, b, s, mass = self._a, self._b, self.sigma, self._mass
        pa, pb = _phi(a), _phi(b)
        prev, cur = 0.0, 1.0  # m_{-1} (unused weight), m_0
        for j in range(1, k + 1):
            edge = (self.hi ** (j - 1) * pb - self.lo ** (j - 1) * pa) / mass
            nxt = self.mu * cur + (j - 1) * s * s * prev - s * edge
            prev, cur = cur, nxt
        return cur

    def mean(self) -> float:
        return self.raw_moment(1)

    def to_config(self):
        return {"type": "truncated_normal", "mu": self.mu, "sigma": self.sigma, "lo": self.lo, "hi": self.hi}


def _check_order(k: int) -> None:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_RAW_MOMENT:
        raise ValueError(f"moment order must be an integer in 1..{MAX_RAW_MOMENT}, got {k!r}")


class ProductDensity(Density):
    """Independent product of 1-D marginals."""

    def __init__(self, marginals: Sequence[Density]):
        if not marginals:
            raise ValueError("need at least one marginal")
        for m in marginals:
            if m.dim != 1:
                raise ValueError("marginals must be one-dimensional")
        self.marginals = tuple(marginals)
        self.dim = len(self.marginals)
        self._support = SupportBox(
            tuple(m.support.lo[0] for m in self.marginals),
            tuple(m.support.hi[0] for m in self.marginals),
        )

    @property
    def support(self) -> SupportBox:
        return self._support

    def _pdf_rows(self, x):
        out = self.marginals[0]._pdf_rows(x[:, 0:1])
        for i, m in enumerate(self.marginals[1:], start=1):
            out = out * m._pdf_rows(x[:, i : i + 1])
        return out

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return np.column_stack([m.ppf(u[:, i]) for i, m in enumerate(self.marginals)])

    def to_config(self):
        return [m.to_config() for m in self.marginals]

    def __repr__(self):
        return f"ProductDensity({list(self.marginals)!r})"


def density_from_config(cfg: dict) -> Density:
    """Build a 1-D density from its JSON form."""
    cfg = dict(cfg)
    kind = cfg.pop("type", None)
    if kind == "truncated_normal":
        allowed = {"mu", "sigma", "lo", "hi"}
        _reject_unknown(cfg, allowed)
        mu, sigma = float(cfg["mu"]), float(cfg["sigma"])
        lo = float(cfg.get("lo", mu - NORMAL_CUTOFF * sigma))
        hi = float(cfg.get("hi", mu + NORMAL_CUTOFF * sigma))
        return TruncatedNormal(mu, sigma, lo, hi)
    if kind == "uniform":
        _reject_unknown(cfg, {"lo", "hi"})
        return Uniform(float(cfg["lo"]), float(cfg["hi"]))
    raise ValueError(f"unknown density type {kind!r}")


def _reject_unknown(cfg: dict, allowed: set) -> None:
    extra = set(cfg) - allowed
    if extra:
        raise ValueError(f"unknown density keys: {sorted(extra)}")
