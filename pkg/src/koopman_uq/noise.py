"""Finite-dimensional Wiener-process parameterisations.

A process-noise problem ``dy = phi dt + psi dW`` is rewritten pathwise as the
random ODE ``y' = phi + psi W'(t)`` where ``W`` is a finite combination of
independent Gaussian coordinates.  The coordinates join the uncertain inputs,
so the expectation is again an ordinary integral over a box.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .dynsys import BatchResult, OdeSystem, SystemMap, TERMINAL, FAILED
from .koopman import Coordinate, UncertaintyProblem
from .prob import TruncatedNormal

MAX_QUAD_DIM = 10


def _kl_freq(K: int, T: float) -> np.ndarray:
    return (np.arange(1, K + 1) - 0.5) * math.pi / T


def kl_path(z, t, T: float):
    """Truncated Karhunen-Loeve path W(t) = sqrt(2T) sum_k z_k sin(w_k t) / ((k - 1/2) pi).

    With ``w_k = (k - 1/2) pi / T``.  ``z`` may be ``(K,)`` or ``(n, K)`` with
    ``t`` scalar or ``(n,)``.
    """
    z = np.asarray(z, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if np.any(t_arr < 0) or np.any(t_arr > T * (1 + 1e-12)):
        raise ValueError(f"t outside [0, {T}]")
    K = z.shape[-1]
    w = _kl_freq(K, T)
    terms = z * np.sin(np.multiply.outer(t_arr, w)) / (w * T)
    out = math.sqrt(2.0 * T) * terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_rate(z, t, T: float):
    """Path derivative W'(t) = sqrt(2/T) sum_k z_k cos(w_k t)."""
    z = np.asarray(z, dtype=float)
    w = _kl_freq(z.shape[-1], T)
    out = math.sqrt(2.0 / T) * (z * np.cos(np.multiply.outer(np.asarray(t, dtype=float), w))).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_variance(K: int, T: float = 1.0) -> float:
    """Var W(T) under truncation at K terms: 2T sum_{k<=K} ((k - 1/2) pi)^-2."""
    return 2.0 * T * math.fsum(1.0 / ((k - 0.5) * math.pi) ** 2 for k in range(1, K + 1))


def fixed_step_path(increments, t, dt: float):
    """Cumulative sum of ``increments`` at grid times, linear in between."""
    inc = np.asarray(increments, dtype=float)
    n = inc.shape[-1]
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > n * dt * (1 + 1e-12)):
        raise ValueError(f"t outside [0, {n * dt}]")
    s = t_arr / dt
    k = np.minimum(np.floor(s).astype(int), n - 1)
    frac = s - k
    W = np.concatenate([np.zeros(inc.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    if inc.ndim == 1:
        out = W[k] + frac * inc[k]
    else:
        rows = np.arange(inc.shape[0])
        out = W[rows, k] + frac * inc[rows, k]
    return float(out) if np.ndim(out) == 0 else out


def fixed_step_rate(increments, t, dt: float):
    """Piecewise-constant W'(t) = increment_k / dt on [k dt, (k+1) dt)."""
    inc = np.asarray(increments, dtype=float)
    n = inc.shape[-1]
    k = np.clip(np.floor(np.asarray(t, dtype=float) / dt).astype(int), 0, n - 1)
    if inc.ndim == 1:
        return inc[k] / dt
    return inc[np.arange(inc.shape[0]), k] / dt


@dataclass(frozen=True)
class KLNoise:
    T: float
    K: int = 4

    def __post_init__(self):
        if not self.T > 0 or self.K < 1:
            raise ValueError("KL noise needs T > 0 and K >= 1")

    @property
    def n_coords(self) -> int:
        return self.K

    @property
    def horizon(self) -> float:
        return self.T

    def densities(self):
        return [TruncatedNormal.standard(0.0, 1.0)] * self.K

    def rate(self, coords, t):
        return kl_rate(coords, t, self.T)

    def path(self, coords, t):
        return kl_path(coords, t, self.T)

    def to_config(self):
        return {"type": "kl", "K": self.K}


@dataclass(frozen=True)
class FixedStepNoise:
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0 or self.n_steps < 1:
            raise ValueError("fixed-step noise needs dt > 0 and n_steps >= 1")

    @property
    def n_coords(self) -> int:
        return self.n_steps

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def densities(self):
        return [TruncatedNormal.standard(0.0, math.sqrt(self.dt))] * self.n_steps

    def rate(self, coords, t):
        return fixed_step_rate(coords, t, self.dt)

    def path(self, coords, t):
        return fixed_step_path(coords, t, self.dt)

    def to_config(self):
        return {"type": "fixed_step", "n_steps": self.n_steps}


def noise_from_config(cfg: dict, horizon: float):
    cfg = dict(cfg)
    kind = cfg.pop("type", None)
    if kind == "kl":
        extra = set(cfg) - {"K"}
        if extra:
            raise ValueError(f"unknown noise keys: {sorted(extra)}")
        return KLNoise(horizon, int(cfg.get("K", 4)))
    if kind == "fixed_step":
        extra = set(cfg) - {"n_steps"}
        if extra:
            raise ValueError(f"unknown noise keys: {sorted(extra)}")
        n = int(cfg.get("n_steps", 32))
        return FixedStepNoise(horizon / n, n)
    raise ValueError(f"unknown noise type {kind!r}")


@dataclass(frozen=True)
class NoisyProblem(UncertaintyProblem):
    """An uncertainty problem whose trailing parameters are noise coordinates."""

    base: Optional[UncertaintyProblem] = None
    noise: object = None
    n_base_params: int = 0


def noisy_problem(base: UncertaintyProblem, noise, diffusion: Callable) -> NoisyProblem:
    """Append ``noise`` coordinates and add ``diffusion(t, y, p) * W'(t)`` to the drift.

    ``diffusion`` returns an ``(n, dim)`` array (or anything broadcastable to
    it) and sees only the base parameters.
    """
    m = base.map
    if not isinstance(m, SystemMap):
        raise TypeError("process noise needs an ODE system map")
    if noise.horizon < m.t_max - m.t0 - 1e-12 * max(1.0, m.t_max):
        raise ValueError(f"noise horizon {noise.horizon} does not cover the map horizon {m.t_max - m.t0}")
    q = m.n_params
    drift0 = m.system.drift
    t0 = m.t0
    dim = m.dim

    def drift(t, y, p):
        pb = p[:, :q]
        rate = noise.rate(p[:, q:], np.clip(t - t0, 0.0, noise.horizon))
        psi = np.broadcast_to(diffusion(t, y, pb), y.shape)
        return drift0(t, y, pb) + psi * rate[:, None]

    system = OdeSystem(drift, dim, q + noise.n_coords)
    new_map = replace(m, system=system)
    coords = list(base.uncertain) + [
        Coordinate("param", q + i, d) for i, d in enumerate(noise.densities())
    ]
    if len(coords) > MAX_QUAD_DIM:
        warnings.warn(
            f"{len(coords)} uncertain coordinates; adaptive cubature is not designed beyond {MAX_QUAD_DIM}",
            RuntimeWarning,
        )
    params = tuple(base.params) + (0.0,) * noise.n_coords
    return NoisyProblem(new_map, tuple(coords), base.x0, params, base=base, noise=noise, n_base_params=q)


@dataclass(frozen=True)
class AveragedMap:
    """S~(x) = mean over ``n_inner`` seeded noise realisations of S(x, w).

    The same realisations are used for every input, so S~ is a deterministic
    function of (x0, p).  Each input costs ``n_inner`` simulations.
    """

    noisy: NoisyProblem
    n_inner: int
    seed: int
    _draws: np.ndarray = None

    def __post_init__(self):
        if self.n_inner < 1:
            raise ValueError("n_inner must be at least 1")
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        dens = self.noisy.noise.densities()
        u = rng.random((self.n_inner, len(dens)))
        draws = np.column_stack([d.ppf(u[:, i]) for i, d in enumerate(dens)])
        object.__setattr__(self, "_draws", draws)

    @property
    def dim(self) -> int:
        return self.noisy.map.dim

    @property
    def n_params(self) -> int:
        return self.noisy.n_base_params

    def simulate(self, x0, p) -> BatchResult:
        x0 = np.array(x0, dtype=float, ndmin=2)
        n = x0.shape[0]
        p = np.zeros((n, 0)) if p is None else np.array(p, dtype=float, ndmin=2).reshape(n, -1)
        k = self.n_inner
        X = np.repeat(x0, k, axis=0)
        P = np.hstack([np.repeat(p, k, axis=0), np.tile(self._draws, (n, 1))])
        res = self.noisy.map.simulate(X, P)
        states = res.states.reshape(n, k, -1).mean(axis=1)
        times = res.times.reshape(n, k).mean(axis=1)
        failed = (res.status == FAILED).reshape(n, k).any(axis=1)
        status = np.where(failed, FAILED, TERMINAL)
        msgs = {i: "inner noisy simulation failed" for i in np.flatnonzero(failed)}
        return BatchResult(states, times, status, [[] for _ in range(n)], res.n_steps.reshape(n, k).sum(axis=1), msgs)


def averaged_map(noisy: NoisyProblem, n_inner: int, seed: int) -> AveragedMap:
    return AveragedMap(noisy, n_inner, seed)


def averaged_problem(noisy: NoisyProblem, n_inner: int, seed: int) -> UncertaintyProblem:
    """The base problem with its map replaced by the noise-averaged map."""
    base = noisy.base
    return UncertaintyProblem(averaged_map(noisy, n_inner, seed), base.uncertain, base.x0, base.params)
