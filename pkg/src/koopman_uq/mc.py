"""Seeded Monte Carlo baseline.

Samples are drawn in fixed blocks of ``BLOCK`` indices; block ``b`` owns the
substream ``SeedSequence(seed, spawn_key=(b,))`` and consumes ``dim``
uniforms per sample through the inverse CDF.  Values land in pre-assigned
slots and are reduced in index order, so results do not depend on the number
of worker threads.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynsys import FAILED
from .koopman import ExpectationResult, Observable, UncertaintyProblem, koopman_expectation
from .quad import default_workers

BLOCK = 4096
MAX_FAILURE_FRACTION = 0.01


class MonteCarloFailure(RuntimeError):
    """More than the admissible fraction of samples failed to simulate."""


@dataclass(frozen=True)
class MCResult:
    estimate: np.ndarray
    std_error: np.ndarray
    n: int
    seed: int
    wall_time: float
    convergence: Optional[list] = None  # (n_k, estimate_k, std_error_k)
    n_failed: int = 0
    failed_indices: tuple = ()

    def __float__(self):
        return float(self.estimate[0])


def block_uniforms(seed: int, block: int, size: int, dim: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))
    return rng.random((size, dim))


def sample_points(prob: UncertaintyProblem, n: int, seed: int, start: int = 0) -> np.ndarray:
    """Sample indices ``start .. start+n-1`` of the seeded stream (block aligned)."""
    if start % BLOCK:
        raise ValueError("start must be a multiple of the block size")
    dens = prob.density
    out = []
    b = start // BLOCK
    remaining = n
    while remaining > 0:
        u = block_uniforms(seed, b, BLOCK, prob.dim)
        take = min(BLOCK, remaining)
        out.append(dens.ppf(u[:take]))
        remaining -= take
        b += 1
    return np.concatenate(out, axis=0)


def _parse_checkpoints(checkpoints, n):
    if checkpoints is None:
        return []
    cps = sorted({int(c) for c in checkpoints if 0 < int(c) <= n})
    if n not in cps:
        cps.append(n)
    return cps


def mc_samples(prob: UncertaintyProblem, g: Observable, n: int, seed: int = 0,
               workers: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Values of g(S(X_i)) for the seeded draws ``i < n``, a success mask and the wall time."""
    if n < 2:
        raise ValueError("need at least two samples")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a non-negative 64-bit integer")
    workers = default_workers() if workers is None else max(1, int(workers))
    n_blocks = math.ceil(n / BLOCK)
    vals = np.empty((n, g.dim_out))
    ok = np.ones(n, dtype=bool)

    def run(b):
        lo = b * BLOCK
        size = min(BLOCK, n - lo)
        u = block_uniforms(seed, b, BLOCK, prob.dim)[:size]
        pts = prob.density.ppf(u)
        x0, p = prob.inputs(pts)
        res = prob.map.simulate(x0, p)
        good = res.status != FAILED
        v = np.full((size, g.dim_out), np.nan)
        if good.any():
            v[good] = g(res.states[good], res.times[good])
        good &= np.all(np.isfinite(v), axis=1)
        vals[lo : lo + size] = v
        ok[lo : lo + size] = good

    t0 = time.perf_counter()
    if workers == 1 or n_blocks == 1:
        for b in range(n_blocks):
            run(b)
    else:
        with ThreadPoolExecutor(max_workers=min(workers, n_blocks)) as ex:
            for fut in [ex.submit(run, b) for b in range(n_blocks)]:
                fut.result()
    wall = time.perf_counter() - t0
    failed = np.flatnonzero(~ok)
    if failed.size > MAX_FAILURE_FRACTION * n:
        raise MonteCarloFailure(f"{failed.size} of {n} samples failed (first at index {int(failed[0])})")
    return vals, ok, wall


def mc_expectation(prob: UncertaintyProblem, g: Observable, n: int, seed: int = 0,
                   checkpoints: Optional[Sequence[int]] = None, workers: Optional[int] = None) -> MCResult:
    """Sample mean of g(S(X)) over ``n`` seeded draws of X ~ f0."""
    vals, ok, wall = mc_samples(prob, g, n, seed, workers)
    seed = int(seed)
    failed = np.flatnonzero(~ok)
    good_vals = vals[ok]
    m = good_vals.shape[0]
    est = good_vals.mean(axis=0)
    se = good_vals.std(axis=0, ddof=1) / math.sqrt(m)

    conv = None
    cps = _parse_checkpoints(checkpoints, n)
    if cps:
        # prefix statistics over sample indices, failures skipped
        w = np.where(ok[:, None], vals, 0.0)
        cnt = np.cumsum(ok)
        s1 = np.cumsum(w, axis=0)
        s2 = np.cumsum(w * w, axis=0)
        conv = []
        for k in cps:
            c = int(cnt[k - 1])
            if c < 2:
                continue
            mean = s1[k - 1] / c
            var = np.maximum(s2[k - 1] / c - mean * mean, 0.0) * c / (c - 1)
            conv.append((k, mean, np.sqrt(var / c)))
    return MCResult(est, se, n, seed, wall, conv, int(failed.size), tuple(int(i) for i in failed[:100]))


def mc_central_moments(prob: UncertaintyProblem, g: Observable, n_max: int, n: int, seed: int = 0,
                       workers: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Sample central moments 2..n_max of a scalar observable with standard errors.

    Standard errors come from the influence function of the plug-in estimator,
    (Z - mu)^k - m_k - k m_{k-1} (Z - mu).
    """
    if g.dim_out != 1:
        raise ValueError("central moments need a scalar observable")
    vals, ok, _ = mc_samples(prob, g, n, seed, workers)
    z = vals[ok, 0]
    d = z - z.mean()
    m = len(z)
    est, se = [], []
    for k in range(2, n_max + 1):
        mk = np.mean(d**k)
        infl = d**k - mk - k * np.mean(d ** (k - 1)) * d
        est.append(mk)
        se.append(infl.std(ddof=1) / math.sqrt(m))
    return np.array(est), np.array(se)


@dataclass(frozen=True)
class Comparison:
    koopman: ExpectationResult
    mc: MCResult
    reference: Optional[float] = None

    @property
    def speedup(self) -> float:
        return self.mc.wall_time / self.koopman.wall_time

    def to_dict(self) -> dict:
        k, m = self.koopman, self.mc
        out = {
            "koopman": {
                "value": k.value.tolist(),
                "error": k.error.tolist(),
                "simulations": k.evals,
                "wall_time": k.wall_time,
                "converged": k.converged,
            },
            "monte_carlo": {
                "estimate": m.estimate.tolist(),
                "std_error": m.std_error.tolist(),
                "simulations": m.n,
                "failed": m.n_failed,
                "seed": m.seed,
                "wall_time": m.wall_time,
            },
            "speedup": self.speedup,
        }
        if self.reference is not None:
            out["reference"] = self.reference
            out["koopman"]["abs_error"] = abs(float(k.value[0]) - self.reference)
            out["monte_carlo"]["abs_error"] = abs(float(m.estimate[0]) - self.reference)
        return out


def compare(prob: UncertaintyProblem, g: Observable, rtol: float = 1e-2, atol: float = 1e-2, n: int = 100_000,
            seed: int = 0, reference: Optional[float] = None, checkpoints=None, workers=None,
            max_evals: int = 1_000_000) -> Comparison:
    """Run the Koopman expectation and the Monte Carlo baseline side by side.

    Both methods see the same ODE tolerances (coupled to ``rtol``).
    """
    from .koopman import _with_coupled_tolerance

    prob = _with_coupled_tolerance(prob, rtol)
    k = koopman_expectation(prob, g, rtol, atol, max_evals=max_evals, workers=workers, couple_tolerances=False)
    m = mc_expectation(prob, g, n, seed, checkpoints, workers)
    return Comparison(k, m, reference)
