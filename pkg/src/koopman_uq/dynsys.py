"""System maps: adaptive Runge-Kutta integration with hybrid events.

The integrator works on a batch of independent trajectories at once.  Every
arithmetic operation is element-wise along the batch axis, so the result for
one trajectory never depends on which other trajectories share its batch.

Drift, event conditions and event effects are vectorised callables::

    drift(t, y, p)      -> dy/dt         t: (n,), y: (n, dim), p: (n, n_par)
    condition(t, y, p)  -> (n,)
    effect(t, y, p)     -> new y (n, dim)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Drift = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

# Dormand-Prince 5(4) tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_B_LOW = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B_LOW
# Shampine's continuous extension (4th order, no extra stages)
_D = np.array([
    -12715105075 / 11282082432, 0.0, 87487479700 / 32700410799, -10690763975 / 1880347072,
    701980252875 / 199316789632, -1453857185 / 822651844, 69997945 / 29380423,
])

ORDER = 5
_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0
_BETA = 0.04
_ALPHA = 1.0 / ORDER - 0.75 * _BETA

OK, TERMINAL, T_MAX, FAILED = 0, 1, 2, 3


class IntegrationError(RuntimeError):
    """Raised when a trajectory cannot be continued (step underflow, NaN/Inf)."""

    def __init__(self, message: str, t: float = math.nan, index: int | None = None):
        super().__init__(message)
        self.t = t
        self.index = index


@dataclass(frozen=True)
class OdeSystem:
    drift: Drift
    dim: int
    n_params: int = 0


@dataclass(frozen=True)
class Event:
    """Zero crossing of ``condition`` triggers ``effect``.

    ``direction`` selects the crossing sign: -1 only falling, +1 only rising,
    0 either.  A terminal event ends the trajectory after its effect.
    """

    condition: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    effect: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    terminal: bool = False
    direction: int = 0

    def __post_init__(self):
        if self.direction not in (-1, 0, 1):
            raise ValueError("direction must be -1, 0 or +1")


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    event_log: list


@dataclass(frozen=True)
class IntegrationResult:
    state: np.ndarray
    t: float
    event_log: list
    status: int
    trajectory: Optional[Trajectory] = None


@dataclass
class BatchResult:
    states: np.ndarray
    times: np.ndarray
    status: np.ndarray
    event_logs: list
    n_steps: np.ndarray
    messages: dict = field(default_factory=dict)
    trajectories: Optional[list] = None

    @property
    def event_counts(self) -> np.ndarray:
        return np.array([len(log) for log in self.event_logs])

    def raise_on_failure(self, points: np.ndarray | None = None) -> None:
        bad = np.flatnonzero(self.status == FAILED)
        if bad.size:
            i = int(bad[0])
            where = f" at point {points[i].tolist()}" if points is not None else ""
            raise IntegrationError(f"{self.messages.get(i, 'integration failed')}{where}", float(self.times[i]), i)


def _rms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(x * x, axis=1))


@dataclass(frozen=True)
class SystemMap:
    """The map S: initial state -> state at the first terminal event (or t_max).

    ``event_tol_t`` defaults to ``1e-10 * (t_max - t0)``.
    """

    system: OdeSystem
    events: tuple = ()
    t0: float = 0.0
    t_max: float = 1.0
    rtol: float = 1e-8
    atol: float = 1e-8
    event_tol: float = 1e-10
    event_tol_t: Optional[float] = None
    max_events: int = 10_000
    max_steps: int = 100_000

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.t_max > self.t0:
            raise ValueError("t_max must exceed t0")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def n_params(self) -> int:
        return self.system.n_params

    def with_tolerances(self, rtol: float, atol: float) -> "SystemMap":
        return _replace(self, rtol=rtol, atol=atol)

    def simulate(self, x0: np.ndarray, p: np.ndarray) -> BatchResult:
        return integrate_batch(self, x0, p)


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


def _dense(theta, h, y0, y1, k1, k7, rc5):
    """Evaluate the continuous extension at fractions ``theta`` of each step."""
    th = theta[:, None]
    th1 = 1.0 - th
    ydiff = y1 - y0
    bspl = h[:, None] * k1 - ydiff
    rc4 = ydiff - h[:, None] * k7 - bspl
    return y0 + th * (ydiff + th1 * (bspl + th * (rc4 + th1 * rc5)))


def _initial_step(drift, t, y, p, f0, rtol, atol, span):
    sc = atol + rtol * np.abs(y)
    d0 = _rms(y / sc)
    d1 = _rms(f0 / sc)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.where(d1 > 0, d1, 1.0))
    h0 = np.minimum(h0, span)
    f1 = drift(t + h0, y + h0[:, None] * f0, p)
    d2 = _rms((f1 - f0) / sc) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.where(dm > 0, dm, 1.0)) ** (1.0 / ORDER))
    return np.minimum(np.minimum(100 * h0, h1), span)


def _crossed(direction, before, after):
    rising = (before < 0) & (after >= 0)
    falling = (before > 0) & (after <= 0)
    if direction > 0:
        return rising
    if direction < 0:
        return falling
    return rising | falling


def locate_event(fun, lo, hi, f_lo, f_hi, tol_t, tol_f=np.inf, max_iter=100):
    """Vectorised Illinois root bracketing.

    ``fun(t)`` evaluates the condition for every bracket at once.  Brackets
    must straddle a sign change.  A bracket also counts as converged once it
    is a few ulps wide, where ``tol_f`` may be unreachable.  Returns
    ``(t_root, f_root, converged)``.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    f_lo = np.array(f_lo, dtype=float)
    f_hi = np.array(f_hi, dtype=float)
    tol_t = np.broadcast_to(np.asarray(tol_t, dtype=float), lo.shape)
    t = np.where(np.abs(f_lo) <= np.abs(f_hi), lo, hi)
    f = np.where(np.abs(f_lo) <= np.abs(f_hi), f_lo, f_hi)
    side = np.zeros(lo.shape, dtype=int)
    done = ((hi - lo) <= tol_t) & (np.abs(f) <= tol_f)
    done |= (f_lo == 0) | (f_hi == 0)
    t = np.where(f_lo == 0, lo, np.where(f_hi == 0, hi, t))
    f = np.where(f_lo == 0, 0.0, np.where(f_hi == 0, 0.0, f))
    for _ in range(max_iter):
        if done.all():
            break
        act = ~done
        denom = f_hi - f_lo
        cand = np.where(denom != 0, (lo * f_hi - hi * f_lo) / np.where(denom != 0, denom, 1.0), 0.5 * (lo + hi))
        # fall back to bisection when the secant leaves the bracket
        bad = ~((cand > lo) & (cand < hi))
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        fc = np.zeros_like(cand)
        fc[act] = fun(cand[act], act)
        same_lo = np.sign(fc) == np.sign(f_lo)
        # replace the endpoint with matching sign; halve the stale one (Illinois)
        upd_lo = act & same_lo & (fc != 0)
        upd_hi = act & ~same_lo & (fc != 0)
        f_hi = np.where(upd_lo & (side == -1), 0.5 * f_hi, f_hi)
        f_lo = np.where(upd_hi & (side == 1), 0.5 * f_lo, f_lo)
        lo = np.where(upd_lo, cand, lo)
        f_lo = np.where(upd_lo, fc, f_lo)
        hi = np.where(upd_hi, cand, hi)
        f_hi = np.where(upd_hi, fc, f_hi)
        side = np.where(upd_lo, -1, np.where(upd_hi, 1, side))
        exact = act & (fc == 0)
        lo = np.where(exact, cand, lo)
        hi = np.where(exact, cand, hi)
        t = np.where(act, cand, t)
        f = np.where(act, fc, f)
        done |= act & (((hi - lo) <= tol_t) & (np.abs(fc) <= tol_f) | exact)
        # bracket at floating-point resolution: nothing left to refine
        done |= act & ((hi - lo) <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))
    return t, f, done


def integrate_batch(m: SystemMap, x0, p=None, on_failure: str = "flag", record: bool = False) -> BatchResult:
    """Integrate every row of ``x0`` (with parameters ``p``) through ``m``."""
    x0 = np.array(x0, dtype=float, ndmin=2)
    n, dim = x0.shape
    if dim != m.dim:
        raise ValueError(f"state dimension {dim} != system dimension {m.dim}")
    if p is None:
        p = np.zeros((n, m.n_params))
    p = np.array(p, dtype=float, ndmin=2)
    if p.shape[0] == 1 and n > 1:
        p = np.repeat(p, n, axis=0)
    if p.shape != (n, m.n_params):
        raise ValueError(f"parameter array shape {p.shape} != {(n, m.n_params)}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")

    drift = m.system.drift
    events = m.events
    n_ev = len(events)
    span_total = m.t_max - m.t0
    tol_t = m.event_tol_t if m.event_tol_t is not None else 1e-10 * span_total
    deadband = 10.0 * m.event_tol

    t = np.full(n, float(m.t0))
    y = x0.copy()
    status = np.full(n, OK, dtype=int)
    n_steps = np.zeros(n, dtype=int)
    logs: list = [[] for _ in range(n)]
    messages: dict = {}
    armed = np.ones((n, n_ev), dtype=bool)
    # sign in which a disarmed condition leaves its dead-band after an event
    departing = np.zeros((n, n_ev))
    rec_t = [[m.t0] for _ in range(n)] if record else None
    rec_y = [[x0[i].copy()] for i in range(n)] if record else None

    def cond_all(tt, yy, pp):
        if n_ev == 0:
            return np.zeros((tt.shape[0], 0))
        return np.column_stack([ev.condition(tt, yy, pp) for ev in events])

    k1 = drift(t, y, p)
    cond = cond_all(t, y, p)
    h = _initial_step(drift, t, y, p, k1, m.rtol, m.atol, m.t_max - t)
    err_old = np.full(n, 1e-4)
    fac_max = np.full(n, _FAC_MAX)

    def fail(idx, msg):
        for i in np.atleast_1d(idx):
            status[i] = FAILED
            messages[int(i)] = f"{msg} at t={t[i]:.17g}"

    bad0 = ~np.all(np.isfinite(k1), axis=1)
    if bad0.any():
        fail(np.flatnonzero(bad0), "non-finite drift")

    while True:
        act = np.flatnonzero(status == OK)
        if act.size == 0:
            break
        ta, ya, pa, ha, k1a = t[act], y[act], p[act], h[act], k1[act]
        span = m.t_max - ta
        ha = np.minimum(ha, span)
        hmin = 16 * np.spacing(np.maximum(np.abs(ta), 1.0))
        tiny = ha < hmin
        if tiny.any():
            fail(act[tiny], "step size underflow")
            keep = ~tiny
            act, ta, ya, pa, ha, k1a, span = act[keep], ta[keep], ya[keep], pa[keep], ha[keep], k1a[keep], span[keep]
            if act.size == 0:
                continue
        hc = ha[:, None]
        ks = [k1a]
        for s in range(1, 7):
            acc = ya.copy()
            for j, a in enumerate(_A[s]):
                if a != 0.0:
                    acc = acc + hc * (a * ks[j])
            ks.append(drift(ta + _C[s] * ha, acc, pa))
            if s == 6:
                y_new = acc
        k7 = ks[6]
        errv = ks[0] * _E[0]
        for j in range(2, 7):
            errv = errv + ks[j] * _E[j]
        errv = hc * errv
        sc = m.atol + m.rtol * np.maximum(np.abs(ya), np.abs(y_new))
        err = _rms(errv / sc)
        finite = np.isfinite(err) & np.all(np.isfinite(y_new), axis=1)
        err = np.where(finite, err, np.inf)
        accept = err <= 1.0

        # step-size proposal (PI control)
        e_safe = np.maximum(err, 1e-10)
        fac = _SAFETY * e_safe ** (-_ALPHA) * err_old[act] ** _BETA
        fac = np.clip(fac, _FAC_MIN, fac_max[act])
        h_prop = np.where(accept, ha * fac, ha * np.clip(_SAFETY * e_safe ** (-1.0 / ORDER), _FAC_MIN, 1.0))
        h_prop = np.where(finite, h_prop, 0.25 * ha)
        fac_max[act] = np.where(accept, _FAC_MAX, 1.0)
        err_old[act] = np.where(accept, np.maximum(err, 1e-4), err_old[act])

        rej = act[~accept]
        h[rej] = h_prop[~accept]
        n_steps[act] += 1
        over = n_steps[act] > m.max_steps
        if over.any():
            fail(act[over], "maximum number of steps exceeded")

        if not accept.any():
            continue
        ia = np.flatnonzero(accept & ~over)
        A = act[ia]
        t_new = ta[ia] + ha[ia]
        t_new = np.where(ha[ia] >= span[ia], m.t_max, t_new)
        yn = y_new[ia]
        pA = pa[ia]
        cond_new = cond_all(t_new, yn, pA)
        if n_ev:
            # a disarmed condition that departed one way and ends the step beyond
            # the dead-band on the other side has crossed unseen: retry smaller
            dep = departing[A]
            hidden = np.any((~armed[A]) & (dep != 0) & (cond_new * dep < -deadband), axis=1)
            # below the event time tolerance the excursion is unresolvable; give up on it
            unresolved = hidden & (ha[ia] <= tol_t)
            departing[A[unresolved]] = 0.0
            hidden &= ~unresolved
            if hidden.any():
                H = A[hidden]
                h[H] = 0.25 * ha[ia[hidden]]
                keep = ~hidden
                ia, A, t_new, yn, pA, cond_new = ia[keep], A[keep], t_new[keep], yn[keep], pA[keep], cond_new[keep]

        # events: earliest crossing within each accepted step
        hit_t = np.full(ia.size, np.inf)
        hit_ev = np.full(ia.size, -1)
        hit_y = None
        if n_ev:
            rc5 = None
            for e, ev in enumerate(events):
                cr = armed[A, e] & _crossed(ev.direction, cond[A, e], cond_new[:, e])
                if not cr.any():
                    continue
                if rc5 is None:
                    rc5 = ks[0] * _D[0]
                    for j in range(2, 7):
                        rc5 = rc5 + ks[j] * _D[j]
                    rc5 = hc * rc5
                sel = np.flatnonzero(cr)
                ii = ia[sel]
                y0s, y1s, k1s, k7s, rcs = ya[ii], yn[sel], k1a[ii], k7[ii], rc5[ii]
                hs, t0s, ps = ha[ii], ta[ii], pa[ii]

                def fun(theta, mask, ev=ev, y0s=y0s, y1s=y1s, k1s=k1s, k7s=k7s, rcs=rcs, hs=hs, t0s=t0s, ps=ps):
                    yy = _dense(theta, hs[mask], y0s[mask], y1s[mask], k1s[mask], k7s[mask], rcs[mask])
                    return ev.condition(t0s[mask] + theta * hs[mask], yy, ps[mask])

                th, fth, ok = locate_event(
                    fun, np.zeros(sel.size), np.ones(sel.size), cond[A[sel], e], cond_new[sel, e],
                    tol_t / hs, m.event_tol,
                )
                if not ok.all():
                    fail(A[sel[~ok]], "event location did not converge")
                tt = t0s + th * hs
                better = ok & (tt < hit_t[sel])
                hit_t[sel] = np.where(better, tt, hit_t[sel])
                hit_ev[sel] = np.where(better, e, hit_ev[sel])
                if hit_y is None:
                    hit_y = np.zeros_like(yn)
                yy = _dense(th, hs, y0s, y1s, k1s, k7s, rcs)
                hit_y[sel[better]] = yy[better]

        plain = (hit_ev < 0) & (status[A] == OK)
        P = A[plain]
        t[P] = t_new[plain]
        y[P] = yn[plain]
        k1[P] = k7[ia[plain]]
        cond[P] = cond_new[plain]
        h[P] = h_prop[ia[plain]]
        if n_ev:
            armed[P] |= np.abs(cond_new[plain]) > deadband
        if record:
            for j, i in enumerate(P):
                rec_t[i].append(t[i])
                rec_y[i].append(y[i].copy())
        reached = P[t[P] >= m.t_max]
        status[reached] = T_MAX

        ev_idx = np.flatnonzero((hit_ev >= 0) & (status[A] == OK))
        for e, ev in enumerate(events):
            sel = ev_idx[hit_ev[ev_idx] == e]
            if sel.size == 0:
                continue
            E_ = A[sel]
            te, ye, pe = hit_t[sel], hit_y[sel], pA[sel]
            if ev.effect is not None:
                ye = np.array(ev.effect(te, ye, pe), dtype=float)
            t[E_] = te
            y[E_] = ye
            for i, ti in zip(E_, te):
                logs[i].append((float(ti), e))
                if record:
                    rec_t[i].append(float(ti))
                    rec_y[i].append(y[i].copy())
            if ev.terminal:
                status[E_] = TERMINAL
                continue
            too_many = np.array([len(logs[i]) > m.max_events for i in E_])
            if too_many.any():
                fail(E_[too_many], "maximum number of events exceeded")
            live = E_[~too_many]
            if live.size == 0:
                continue
            tl, yl, pl = t[live], y[live], p[live]
            fk = drift(tl, yl, pl)
            bad = ~np.all(np.isfinite(fk), axis=1)
            if bad.any():
                fail(live[bad], "non-finite drift")
            k1[live] = fk
            cond[live] = cond_all(tl, yl, pl)
            # the fired event stays disarmed until its condition leaves the dead-band
            armed[live] |= np.abs(cond[live]) > deadband
            armed[live, e] = np.abs(cond[live, e]) > deadband
            delta = 1e-8 * np.maximum(1.0, np.abs(tl))
            slope = cond_all(tl + delta, yl + delta[:, None] * fk, pl)[:, e] - cond[live, e]
            sgn = np.sign(slope)
            if ev.direction != 0:
                # only a departure to the pre-crossing side can return across zero
                sgn = np.where(sgn == -ev.direction, sgn, 0.0)
            departing[live, e] = np.where(armed[live, e], 0.0, sgn)
            h[live] = _initial_step(drift, tl, yl, pl, fk, m.rtol, m.atol, np.maximum(m.t_max - tl, 1e-300))
            err_old[live] = 1e-4
            reached = live[t[live] >= m.t_max]
            status[reached] = T_MAX

    res = BatchResult(y, t, status, logs, n_steps, messages)
    if record:
        res.trajectories = [
            Trajectory(np.array(rec_t[i]), np.array(rec_y[i]), logs[i]) for i in range(n)
        ]
    if on_failure == "raise":
        res.raise_on_failure(x0)
    return res


def integrate(m: SystemMap, x0, p=None, record: bool = False) -> IntegrationResult:
    """Integrate one initial state; raises ``IntegrationError`` on failure."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    pp = None if p is None else np.asarray(p, dtype=float).reshape(1, -1)
    res = integrate_batch(m, x0, pp, on_failure="raise", record=record)
    traj = res.trajectories[0] if record else None
    return IntegrationResult(res.states[0].copy(), float(res.times[0]), list(res.event_logs[0]), int(res.status[0]), traj)


def iterate_discrete(f: Callable, x0, n: int):
    """Apply ``f`` to ``x0`` ``n`` times."""
    if n < 0:
        raise ValueError("n must be non-negative")
    x = np.asarray(x0, dtype=float)
    for k in range(n):
        x = np.asarray(f(x), dtype=float)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite value after {k + 1} iterations", float(k + 1))
    return x


@dataclass(frozen=True)
class DiscreteMap:
    """n-fold composition of a vectorised map ``f(y, p) -> y``."""

    f: Callable
    n: int
    dim: int
    n_params: int = 0

    def simulate(self, x0, p) -> BatchResult:
        x0 = np.array(x0, dtype=float, ndmin=2)
        p = np.array(p, dtype=float, ndmin=2) if p is not None else np.zeros((x0.shape[0], 0))
        y = iterate_discrete(lambda v: self.f(v, p), x0, self.n)
        k = x0.shape[0]
        return BatchResult(y, np.full(k, float(self.n)), np.full(k, TERMINAL), [[] for _ in range(k)], np.full(k, self.n))


@dataclass(frozen=True)
class ClosedFormMap:
    """A map with a known formula ``f(x, p) -> y`` (vectorised over rows)."""

    f: Callable
    dim: int
    n_params: int = 0

    def simulate(self, x0, p) -> BatchResult:
        x0 = np.array(x0, dtype=float, ndmin=2)
        p = np.array(p, dtype=float, ndmin=2) if p is not None else np.zeros((x0.shape[0], 0))
        y = np.array(self.f(x0, p), dtype=float).reshape(x0.shape[0], -1)
        k = x0.shape[0]
        status = np.where(np.all(np.isfinite(y), axis=1), TERMINAL, FAILED)
        msgs = {int(i): "non-finite map output" for i in np.flatnonzero(status == FAILED)}
        return BatchResult(y, np.zeros(k), status, [[] for _ in range(k)], np.zeros(k, dtype=int), msgs)


def identity_map(dim: int, n_params: int = 0) -> ClosedFormMap:
    return ClosedFormMap(lambda x, p: x.copy(), dim, n_params)
