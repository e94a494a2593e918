"""Deterministic h-adaptive quadrature over boxes.

Integrands are vectorised: they receive all nodes of a pass at once (a
``(n,)`` array in 1-D, ``(n, dim)`` otherwise) and return ``(n,)`` or
``(n, m)`` values.  All nodes of a pass go through :func:`batch_eval`, which
may evaluate fixed-size chunks on a thread pool; chunking never depends on
the worker count, so results are bitwise reproducible.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .prob import SupportBox

THREADS_ENV = "KOOPMAN_UQ_THREADS"
DEFAULT_CHUNK = 4096

# 7-point Gauss / 15-point Kronrod pair on [-1, 1] (non-negative half).
_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
# full node list: -x0..-x6, 0, x6..x0
GK_NODES = np.concatenate([-_XGK[:7], [0.0], _XGK[6::-1]])
GK_WEIGHTS = np.concatenate([_WGK[:7], [_WGK[7]], _WGK[6::-1]])
G_WEIGHTS = np.zeros(15)
G_WEIGHTS[[1, 3, 5]] = _WG[:3]
G_WEIGHTS[7] = _WG[3]
G_WEIGHTS[[13, 11, 9]] = _WG[:3]

_L2 = math.sqrt(9 / 70)
_L3 = math.sqrt(9 / 10)
_L4 = math.sqrt(9 / 10)
_L5 = math.sqrt(9 / 19)


def default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, min(8, os.cpu_count() or 1))


class IntegrandError(RuntimeError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


def batch_eval(f: Callable, points, workers: Optional[int] = None, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Evaluate ``f`` on ``points`` in order-preserving fixed-size chunks."""
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if n == 0:
        return np.zeros((0,))
    workers = default_workers() if workers is None else max(1, int(workers))
    bounds = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]

    def run(b):
        return np.asarray(f(pts[b[0] : b[1]]), dtype=float)

    if workers == 1 or len(bounds) == 1:
        parts = [run(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(bounds))) as ex:
            futures = [ex.submit(run, b) for b in bounds]
            parts = []
            for fut in futures:
                parts.append(fut.result())  # first failing chunk in index order is raised
    out = np.concatenate(parts, axis=0)
    if out.shape[0] != n:
        raise IntegrandError(f"integrand returned {out.shape[0]} values for {n} points")
    return out


@dataclass
class Region:
    lo: np.ndarray
    hi: np.ndarray
    value: np.ndarray
    error: np.ndarray
    split_axis: int = 0

    @property
    def box(self) -> SupportBox:
        return SupportBox(tuple(self.lo), tuple(self.hi))


@dataclass(frozen=True)
class QuadResult:
    value: np.ndarray
    error: np.ndarray
    evals: int
    converged: bool
    n_regions: int = 1
    regions: Optional[list] = None

    def scalar(self) -> tuple[float, float]:
        return float(self.value[0]), float(self.error[0])


def _tolerance(value, rtol, atol):
    return np.maximum(atol, rtol * np.abs(value))


class _Regions:
    """Growable struct-of-arrays store of the current partition."""

    def __init__(self, lo, hi, val, err, axis):
        self.n = lo.shape[0]
        cap = max(64, 2 * self.n)
        self.lo = np.empty((cap, lo.shape[1]))
        self.hi = np.empty_like(self.lo)
        self.val = np.empty((cap, val.shape[1]))
        self.err = np.empty_like(self.val)
        self.axis = np.empty(cap, dtype=int)
        self._put(slice(0, self.n), lo, hi, val, err, axis)

    def _put(self, idx, lo, hi, val, err, axis):
        self.lo[idx], self.hi[idx], self.val[idx], self.err[idx], self.axis[idx] = lo, hi, val, err, axis

    def replace_and_append(self, picked, lo, hi, val, err, axis):
        """Children 0..k-1 overwrite the picked slots, the rest are appended."""
        k = len(picked)
        self._put(picked, lo[:k], hi[:k], val[:k], err[:k], axis[:k])
        extra = lo.shape[0] - k
        if self.n + extra > self.lo.shape[0]:
            cap = 2 * (self.n + extra)
            for name in ("lo", "hi", "val", "err", "axis"):
                old = getattr(self, name)
                new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
                new[: self.n] = old[: self.n]
                setattr(self, name, new)
        self._put(slice(self.n, self.n + extra), lo[k:], hi[k:], val[k:], err[k:], axis[k:])
        self.n += extra

    def as_list(self):
        return [Region(self.lo[i].copy(), self.hi[i].copy(), self.val[i].copy(), self.err[i].copy(), int(self.axis[i]))
                for i in range(self.n)]


def _adaptive(rule, lo, hi, f, rtol, atol, max_evals, workers, max_split, keep_regions=False):
    """Global adaptive driver shared by the 1-D and n-D rules.

    ``rule.nodes(A, B)`` maps k boxes to ``(k, p, dim)`` nodes and
    ``rule.apply(A, B, vals)`` maps ``(k, p, m)`` values to per-box
    ``(value, error, split_axis)``.
    """
    if not (rtol >= 0 and atol >= 0) or (rtol == 0 and atol == 0):
        raise ValueError("need a non-negative rtol/atol with at least one positive")
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or not np.all(lo < hi):
        raise ValueError("integration box must be finite with lo < hi")
    max_evals = int(max_evals)

    def evaluate(A, B):
        nodes = rule.nodes(A, B)
        k, p, d = nodes.shape
        flat = nodes.reshape(k * p, d)
        vals = np.asarray(batch_eval(f, flat, workers), dtype=float)
        vals = vals.reshape(k * p, -1)
        bad = ~np.all(np.isfinite(vals), axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise IntegrandError(f"integrand is not finite at {flat[i].tolist()}", flat[i])
        v, e, ax = rule.apply(A, B, vals.reshape(k, p, -1))
        return v, e, ax, k * p

    v, e, ax, evals = evaluate(lo[None], hi[None])
    rule_size = evals
    reg = _Regions(lo[None], hi[None], v, e, ax)
    while True:
        val = reg.val[: reg.n]
        err = reg.err[: reg.n]
        # summation over regions in storage order keeps totals reproducible
        total_v = val.sum(axis=0)
        total_e = err.sum(axis=0)
        tol = _tolerance(total_v, rtol, atol)
        done = bool(np.all(total_e <= tol))
        if done or evals + 2 * rule_size > max_evals:
            regions = reg.as_list() if keep_regions else None
            return QuadResult(total_v, total_e, evals, done, reg.n, regions)
        keys = np.max(err / tol, axis=1)
        # worst region first; ties resolved by storage position (stable sort)
        order = np.argsort(-keys, kind="stable")[:max_split]
        picked = order[keys[order] >= 0.5 * keys[order[0]]]
        budget = max(1, (max_evals - evals) // (2 * rule_size))
        picked = picked[:budget]
        A1, B1, A2, B2 = rule.split(reg.lo[picked], reg.hi[picked], reg.axis[picked])
        A, B = np.concatenate([A1, A2]), np.concatenate([B1, B2])
        v, e, ax, used = evaluate(A, B)
        evals += used
        reg.replace_and_append(picked, A, B, v, e, ax)


def _bisect(lo, hi, axis):
    mid = 0.5 * (lo[np.arange(lo.shape[0]), axis] + hi[np.arange(lo.shape[0]), axis])
    hi1 = hi.copy()
    lo2 = lo.copy()
    rows = np.arange(lo.shape[0])
    hi1[rows, axis] = mid
    lo2[rows, axis] = mid
    return lo, hi1, lo2, hi


class _GaussKronrod:
    def nodes(self, A, B):
        c, hw = 0.5 * (A + B), 0.5 * (B - A)
        return (c + hw * GK_NODES[None, :])[:, :, None]

    def apply(self, A, B, vals):
        hw = 0.5 * (B[:, 0] - A[:, 0])
        k = hw[:, None] * np.einsum("p,kpm->km", GK_WEIGHTS, vals)
        g = hw[:, None] * np.einsum("p,kpm->km", G_WEIGHTS, vals)
        return k, np.abs(k - g), np.zeros(A.shape[0], dtype=int)

    split = staticmethod(_bisect)


def integrate_1d(f, lo: float, hi: float, rtol: float = 1e-8, atol: float = 1e-12,
                 max_evals: int = 1_000_000, workers: Optional[int] = None, max_split: int = 1,
                 keep_regions: bool = False) -> QuadResult:
    """Adaptive 15-point Gauss-Kronrod quadrature of ``f`` over ``[lo, hi]``.

    ``f`` receives a ``(n,)`` array of abscissae.
    """
    g = lambda x: f(x[:, 0])
    return _adaptive(_GaussKronrod(), [lo], [hi], g, rtol, atol, max_evals, workers, max_split, keep_regions)


def genz_malik_offsets(dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-box node offsets and degree-7 / degree-5 weights.

    Node groups in order: centre, +-l2 e_i, +-l3 e_i, +-l4 (e_i +- e_j), corners +-l5.
    """
    if dim < 2:
        raise ValueError("the Genz-Malik rule needs dim >= 2")
    n = dim
    pts = [np.zeros(n)]
    w7 = [(12824 - 9120 * n + 400 * n * n) / 19683]
    w5 = [(729 - 950 * n + 50 * n * n) / 729]
    for lam, a7, a5 in ((_L2, 980 / 6561, 245 / 486), (_L3, (1820 - 400 * n) / 19683, (265 - 100 * n) / 1458)):
        for i in range(n):
            for s in (1.0, -1.0):
                e = np.zeros(n)
                e[i] = s * lam
                pts.append(e)
                w7.append(a7)
                w5.append(a5)
    for i in range(n):
        for j in range(i + 1, n):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    e = np.zeros(n)
                    e[i], e[j] = si * _L4, sj * _L4
                    pts.append(e)
                    w7.append(200 / 19683)
                    w5.append(25 / 729)
    corners = np.array(np.meshgrid(*([[1.0, -1.0]] * n), indexing="ij")).reshape(n, -1).T * _L5
    for e in corners:
        pts.append(e)
        w7.append(6859 / 19683 / 2**n)
        w5.append(0.0)
    return np.array(pts), np.array(w7), np.array(w5)


class _GenzMalik:
    def __init__(self, dim):
        self.dim = dim
        self.offsets, self.w7, self.w5 = genz_malik_offsets(dim)
        self.ratio = (_L2 / _L3) ** 2

    def nodes(self, A, B):
        c, hw = 0.5 * (A + B), 0.5 * (B - A)
        return c[:, None, :] + self.offsets[None, :, :] * hw[:, None, :]

    def apply(self, A, B, vals):
        vol = np.prod(B - A, axis=1)[:, None]
        r7 = vol * np.einsum("p,kpm->km", self.w7, vals)
        r5 = vol * np.einsum("p,kpm->km", self.w5, vals)
        n, k = self.dim, vals.shape[0]
        f1 = vals[:, 0]
        f2 = vals[:, 1 : 1 + 2 * n].reshape(k, n, 2, -1).sum(axis=2)
        f3 = vals[:, 1 + 2 * n : 1 + 4 * n].reshape(k, n, 2, -1).sum(axis=2)
        diff = np.abs(f2 - 2 * f1[:, None] - self.ratio * (f3 - 2 * f1[:, None])).sum(axis=2)
        dmax = diff.max(axis=1)
        scale = np.maximum(1.0, np.abs(vals).max(axis=(1, 2)))
        flat = (dmax <= 1e-14 * scale) | np.all(diff >= dmax[:, None] * (1 - 1e-12), axis=1)
        axis = np.where(flat, np.argmax(B - A, axis=1), np.argmax(diff, axis=1))
        return r7, np.abs(r7 - r5), axis

    split = staticmethod(_bisect)


def integrate_nd(f, lo: Sequence[float], hi: Sequence[float], rtol: float = 1e-8, atol: float = 1e-12,
                 max_evals: int = 1_000_000, workers: Optional[int] = None, max_split: int = 64,
                 keep_regions: bool = False) -> QuadResult:
    """h-adaptive cubature of ``f`` over the box ``[lo, hi]``.

    One-dimensional boxes are routed to Gauss-Kronrod.  ``f`` receives an
    ``(n, dim)`` array.  Each pass refines the worst region and every other
    region whose scaled error is at least half of the worst (at most
    ``max_split`` regions per pass).
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape:
        raise ValueError("lo and hi must have equal length")
    if lo.size == 1:
        return _adaptive(_GaussKronrod(), lo, hi, f, rtol, atol, max_evals, workers, 1, keep_regions)
    return _adaptive(_GenzMalik(lo.size), lo, hi, f, rtol, atol, max_evals, workers, max_split, keep_regions)


def integrate_box(f, box: SupportBox, **kw) -> QuadResult:
    return integrate_nd(f, box.lo, box.hi, **kw)
