"""Optimisation under uncertainty in expectation form.

    minimise_u  E[g(S(X))],  X ~ f0(. | u)
    subject to  E[c_i(S(X))] <= lambda_i,  u in a box.

Every expectation is a deterministic quadrature, so central finite
differences give usable gradients.  The box is handled by a projected BFGS
iteration in unit coordinates; expected constraints by a
Powell-Hestenes-Rockafellar augmented Lagrangian outer loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .koopman import Observable, UncertaintyProblem, koopman_expectation


@dataclass(frozen=True)
class Decision:
    name: str
    lo: float
    hi: float
    init: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"decision {self.name}: bounds must be finite with lo < hi")
        if not self.lo <= self.init <= self.hi:
            raise ValueError(f"decision {self.name}: initial value {self.init} outside [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class Constraint:
    observable: Observable
    threshold: float


@dataclass(frozen=True)
class OptProblem:
    decisions: tuple
    bind: Callable[[np.ndarray], UncertaintyProblem]
    objective: Observable
    constraints: tuple = ()
    rtol: float = 1e-6
    atol: float = 1e-9
    max_evals: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "decisions", tuple(self.decisions))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if not self.decisions:
            raise ValueError("need at least one decision variable")
        if self.objective.dim_out != 1:
            raise ValueError("the objective observable must be scalar")
        for c in self.constraints:
            if c.observable.dim_out != 1:
                raise ValueError("constraint observables must be scalar")

    @property
    def lo(self) -> np.ndarray:
        return np.array([d.lo for d in self.decisions])

    @property
    def hi(self) -> np.ndarray:
        return np.array([d.hi for d in self.decisions])

    @property
    def init(self) -> np.ndarray:
        return np.array([d.init for d in self.decisions])

    @property
    def names(self) -> tuple:
        return tuple(d.name for d in self.decisions)


@dataclass
class OptReport:
    u_star: np.ndarray
    objective_value: float
    constraint_values: np.ndarray
    n_objective_evals: int
    n_gradient_evals: int
    converged: bool
    trace: list = field(default_factory=list)  # (u, objective, max violation)
    message: str = ""
    multipliers: np.ndarray = None
    n_unconverged_quad: int = 0

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = names or [f"u{i}" for i in range(len(self.u_star))]
        return {
            "u_star": dict(zip(names, self.u_star.tolist())),
            "objective_value": self.objective_value,
            "constraint_values": self.constraint_values.tolist(),
            "n_objective_evals": self.n_objective_evals,
            "n_gradient_evals": self.n_gradient_evals,
            "iterations": len(self.trace) - 1,
            "converged": self.converged,
            "message": self.message,
        }


class _Evaluator:
    """Counts expectations and keeps the objective and constraints in one pass."""

    def __init__(self, p: OptProblem):
        self.p = p
        self.obs = Observable.stack([p.objective] + [c.observable for c in p.constraints])
        self.thresholds = np.array([c.threshold for c in p.constraints])
        self.n_unconverged = 0

    def __call__(self, u, rtol):
        u = np.asarray(u, dtype=float)
        if np.any(u < self.p.lo) or np.any(u > self.p.hi):
            raise ValueError(f"decision {u.tolist()} outside the box")
        res = koopman_expectation(self.p.bind(u), self.obs, rtol, self.p.atol, max_evals=self.p.max_evals)
        if not res.converged:
            self.n_unconverged += 1
        return res


def expected_objective(p: OptProblem, u, rtol: float | None = None) -> tuple[float, float]:
    """E[g] under f0(. | u) with its quadrature error estimate."""
    res = _Evaluator(p)(u, p.rtol if rtol is None else rtol)
    return float(res.value[0]), float(res.error[0])


def _fd_gradient(fun, u, lo, hi, h):
    """Central differences (one-sided at bounds) with steps h max(1, |u_i|)."""
    u = np.asarray(u, dtype=float)
    grads = None
    for i in range(u.size):
        step = h * max(1.0, abs(u[i]))
        up, dn = u.copy(), u.copy()
        if u[i] + step > hi[i]:
            dn[i] = u[i] - step
            f0, f1 = fun(u), fun(dn)
            d = (f0 - f1) / step
        elif u[i] - step < lo[i]:
            up[i] = u[i] + step
            f0, f1 = fun(up), fun(u)
            d = (f0 - f1) / step
        else:
            up[i] += step
            dn[i] -= step
            d = (fun(up) - fun(dn)) / (2 * step)
        d = np.atleast_1d(d)
        if grads is None:
            grads = np.zeros((d.size, u.size))
        grads[:, i] = d
    return grads


def gradient(p: OptProblem, u, h: float = 1e-5, rtol: float | None = None) -> np.ndarray:
    """Finite-difference gradient of the expected objective (quadrature at rtol/10)."""
    ev = _Evaluator(p)
    r = (p.rtol if rtol is None else rtol) / 10
    return _fd_gradient(lambda v: float(ev(v, r).value[0]), u, p.lo, p.hi, h)[0]


def _projected_bfgs(fun, grad, v0, xtol_rel, scale, offset, max_iter, max_step, on_accept):
    """Projected BFGS on the unit box with a step cap and Armijo backtracking.

    Variables held at a bound by the gradient are frozen for the step.  A
    failed line search first retries along steepest descent.  Returns
    ``(v, f, iterations, stop_reason)``.
    """
    v = np.clip(np.asarray(v0, dtype=float), 0.0, 1.0)
    f, g = fun(v), grad(v)
    n = v.size
    Hinv = None

    def small(step, at):
        return np.all(np.abs(step * scale) <= xtol_rel * np.abs(scale * at + offset) + 1e-12 * scale)

    it = 0
    while it < max_iter:
        free = ~(((v <= 0.0) & (g > 0)) | ((v >= 1.0) & (g < 0)))
        if not free.any() or np.max(np.abs(g[free])) == 0.0:
            return v, f, it, "projected gradient vanished"
        step_ok = False
        for H in ((Hinv, np.eye(n)) if Hinv is not None else (np.eye(n),)):
            d = np.zeros(n)
            d[free] = -H[np.ix_(free, free)] @ g[free]
            if d @ g >= 0:
                continue
            d *= min(1.0, max_step / np.max(np.abs(d)))
            t = 1.0
            while True:
                v_try = np.clip(v + t * d, 0.0, 1.0)
                if small(v_try - v, v_try):
                    break
                f_try = fun(v_try)
                if f_try <= f + 1e-4 * (g @ (v_try - v)):
                    step_ok = True
                    break
                t *= 0.5
            if step_ok:
                break
        if not step_ok:
            return v, f, it, "decision change below tolerance"
        g_try = grad(v_try)
        s_vec, y_vec = v_try - v, g_try - g
        v, f, g = v_try, f_try, g_try
        it += 1
        on_accept(v)
        sy = s_vec @ y_vec
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            if Hinv is None:
                Hinv = np.eye(n) * sy / (y_vec @ y_vec)
            r = 1.0 / sy
            E = np.eye(n) - r * np.outer(s_vec, y_vec)
            Hinv = E @ Hinv @ E.T + r * np.outer(s_vec, s_vec)
        if small(s_vec, v):
            return v, f, it, "decision change below tolerance"
    return v, f, it, "iteration limit"


def optimize(p: OptProblem, xtol_rel: float = 1e-3, max_iter: int = 200, h: float = 1e-5,
             feas_tol: float = 1e-6, max_outer: int = 30, max_step: float = 0.1, callback=None) -> OptReport:
    """Box-constrained local minimisation of the expected objective.

    Projected BFGS in unit coordinates; each step moves every decision by at
    most ``max_step`` of its range, which keeps line searches local.  Stops
    when every decision changes by at most ``xtol_rel`` relative to its value
    between accepted iterates, or after ``max_iter`` iterations.  With
    constraints, a PHR augmented-Lagrangian loop repeats the inner solve until
    E[c_i] <= lambda_i + feas_tol max(1, |lambda_i|).
    """
    ev = _Evaluator(p)
    lo, hi = p.lo, p.hi
    width = hi - lo
    rtol_line = min(p.rtol, xtol_rel / 10)
    rtol_grad = rtol_line / 10
    counts = {"obj": 0, "grad": 0, "iter": 0}
    m = len(p.constraints)
    lam = np.zeros(m)
    rho = 10.0
    trace = []
    cache = {}

    def values(u, rtol):
        key = (u.tobytes(), rtol)
        if key not in cache:
            cache[key] = ev(u, rtol).value.copy()
        return cache[key]

    def merit(vals):
        f, c = vals[0], vals[1:] - ev.thresholds
        if m == 0:
            return f
        shifted = np.maximum(0.0, lam + rho * c)
        return f + (np.sum(shifted**2) - np.sum(lam**2)) / (2 * rho)

    def to_u(v):
        return np.clip(lo + np.asarray(v) * width, lo, hi)

    def fun(v):
        counts["obj"] += 1
        return merit(values(to_u(v), rtol_line))

    def grad(v):
        u = to_u(v)
        counts["grad"] += 1
        J = _fd_gradient(lambda w: values(w, rtol_grad), u, lo, hi, h)
        g = J[0].copy()
        if m:
            mult = np.maximum(0.0, lam + rho * (values(u, rtol_line)[1:] - ev.thresholds))
            g += mult @ J[1:]
        return g * width

    def record(u):
        vals = values(u, rtol_line)
        viol = float(np.max(vals[1:] - ev.thresholds, initial=0.0)) if m else 0.0
        trace.append((u.copy(), float(vals[0]), viol))
        if callback is not None:
            callback(u, float(vals[0]))

    u = np.clip(p.init, lo, hi)
    record(u)
    converged = False
    message = ""
    prev_viol = math.inf
    for outer in range(max_outer if m else 1):
        left = max_iter - counts["iter"]
        v, _, its, reason = _projected_bfgs(fun, grad, (u - lo) / width, xtol_rel, width, lo, left, max_step,
                                            lambda v: record(to_u(v)))
        counts["iter"] += its
        u_new = to_u(v)
        message = reason
        if m == 0:
            u = u_new
            converged = reason != "iteration limit"
            break
        c = values(u_new, rtol_line)[1:] - ev.thresholds
        viol = float(np.max(c, initial=0.0))
        moved = np.all(np.abs(u_new - u) <= xtol_rel * np.abs(u_new) + 1e-12 * width)
        lam_new = np.maximum(0.0, lam + rho * c)
        settled = np.all(np.abs(lam_new - lam) <= 0.1 * np.maximum(1.0, np.abs(lam)))
        lam = lam_new
        u = u_new
        feasible = np.all(c <= feas_tol * np.maximum(1.0, np.abs(ev.thresholds)))
        if feasible and moved and settled and outer > 0:
            converged = True
            message = "feasible and stationary"
            break
        if viol > 0.25 * prev_viol:
            rho *= 10.0
        prev_viol = viol
        if counts["iter"] >= max_iter:
            message = "iteration limit"
            break
    else:
        message = "outer iteration limit"

    final = values(u, rtol_line)
    cons = final[1:].copy()
    if m and np.any(cons - ev.thresholds > feas_tol * np.maximum(1.0, np.abs(ev.thresholds))):
        converged = False
        message = f"no feasible point found (max violation {np.max(cons - ev.thresholds):.3g})"
    return OptReport(u, float(final[0]), cons, counts["obj"], counts["grad"], converged, trace, message,
                     lam if m else np.zeros(0), ev.n_unconverged)


def ball_opt_problem(bounds=((-100.0, 0.0), (1.0, 3.0), (10.0, 50.0)), init=(0.0, 2.0, 50.0), params=None,
                     rtol: float = 1e-6) -> OptProblem:
    """Choose the launch (x0, xdot0, z0) to minimise the expected squared miss."""
    from dataclasses import replace

    from .scenarios import BouncingBallParams, ball_problem, squared_miss

    base = params or BouncingBallParams()
    names = ("x0", "xdot0", "z0")
    decisions = tuple(Decision(n, float(b[0]), float(b[1]), float(i)) for n, b, i in zip(names, bounds, init))

    def bind(u):
        return ball_problem(replace(base, x0=float(u[0]), xdot0=float(u[1]), z0=float(u[2])))

    return OptProblem(decisions, bind, squared_miss(base.target[1]), rtol=rtol)
