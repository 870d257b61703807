"""Derivative-free maximization in two dimensions: Powell and Nelder-Mead.

Both stop when an outer iteration changes the objective by less than the
tolerance ``phi`` (relative to the objective's magnitude), or when the
evaluation budget runs out.  For Powell the change is the gain of one sweep
over the direction set; for Nelder-Mead it is the spread between the best and
worst simplex vertex after a step.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ObjectiveError, ValidationError
from .projection import Displacement2D

KINDS = ("powell", "simplex")

_TINY = 1e-10
_GOLD = 0.5 * (math.sqrt(5.0) - 1.0)  # 0.618...

# Nelder-Mead coefficients
REFLECT = 1.0
EXPAND = 2.0
CONTRACT = 0.5
SHRINK = 0.5


@dataclass(frozen=True)
class OptimizerConfig:
    tolerance: float = 1e-4
    max_evals: int = 500
    initial_step_mm: float = 5.0
    kind: str = "simplex"
    line_tolerance: float = 1e-4
    line_max_evals: int = 50

    def validate(self):
        if not self.tolerance > 0:
            raise ValidationError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_evals < 1:
            raise ValidationError(f"max_evals must be >= 1, got {self.max_evals}")
        if not self.initial_step_mm > 0:
            raise ValidationError(f"initial_step_mm must be > 0, got {self.initial_step_mm}")
        if self.kind not in KINDS:
            raise ValidationError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")


@dataclass
class OptResult:
    argmax: Displacement2D
    value: float
    evals: int
    converged: bool
    history: list = field(default_factory=list)


class BudgetExhausted(Exception):
    pass


class CountedObjective:
    """Wraps the objective: counts calls, enforces the budget, tracks the best point."""

    def __init__(self, f, max_evals):
        self.f = f
        self.max_evals = max_evals
        self.evals = 0
        self.best_x = None
        self.best_value = -math.inf

    def __call__(self, x):
        if self.evals >= self.max_evals:
            raise BudgetExhausted()
        x = np.array(x, dtype=np.float64)
        try:
            value = self.f(x)
        except ObjectiveError:
            raise
        except Exception as exc:
            raise ObjectiveError(f"objective failed at {x.tolist()}: {exc}", point=x) from exc
        self.evals += 1
        value = float(value)
        if not math.isfinite(value):
            raise ObjectiveError(f"objective returned {value} at {x.tolist()}", point=x)
        if value > self.best_value:
            self.best_value = value
            self.best_x = x
        return value


def _converged(old, new, tol):
    return 2.0 * abs(new - old) <= tol * (abs(old) + abs(new)) + _TINY


# --- Nelder-Mead ----------------------------------------------------------


@dataclass
class SimplexState:
    f: CountedObjective
    vertices: np.ndarray  # (3, 2)
    values: np.ndarray  # (3,)
    iteration: int = 0
    restarts: int = 0
    last_move: str = ""


def init_simplex(f, x0, step):
    x0 = np.asarray(x0, dtype=np.float64)
    vertices = np.array([x0, x0 + [step, 0.0], x0 + [0.0, step]])
    values = np.array([f(v) for v in vertices])
    return SimplexState(f, vertices, values)


def _order(state):
    # stable sort keeps the earlier vertex first on ties
    idx = np.argsort(-state.values, kind="stable")
    state.vertices = state.vertices[idx]
    state.values = state.values[idx]


def _degenerate(vertices):
    e1 = vertices[1] - vertices[0]
    e2 = vertices[2] - vertices[0]
    scale = max(np.dot(e1, e1), np.dot(e2, e2))
    return scale == 0.0 or abs(e1[0] * e2[1] - e1[1] * e2[0]) <= 1e-12 * scale


def nelder_mead_step(state):
    """One reflection/expansion/contraction/shrink move (maximizing)."""
    f = state.f
    _order(state)
    if _degenerate(state.vertices):
        best = state.vertices[0]
        size = max(np.max(np.abs(state.vertices - best)), 1e-6)
        state.vertices = np.array([best, best + [size, 0.0], best + [0.0, size]])
        state.values = np.array([state.values[0], f(state.vertices[1]), f(state.vertices[2])])
        state.restarts += 1
        _order(state)
    v, fv = state.vertices, state.values
    centroid = v[:2].mean(axis=0)
    xr = centroid + REFLECT * (centroid - v[2])
    fr = f(xr)
    if fr > fv[0]:
        xe = centroid + EXPAND * (xr - centroid)
        fe = f(xe)
        if fe > fr:
            v[2], fv[2], state.last_move = xe, fe, "expand"
        else:
            v[2], fv[2], state.last_move = xr, fr, "reflect"
    elif fr > fv[1]:
        v[2], fv[2], state.last_move = xr, fr, "reflect"
    else:
        if fr > fv[2]:
            xc = centroid + CONTRACT * (xr - centroid)
            fc = f(xc)
            accept = fc >= fr
        else:
            xc = centroid + CONTRACT * (v[2] - centroid)
            fc = f(xc)
            accept = fc > fv[2]
        if accept:
            v[2], fv[2], state.last_move = xc, fc, "contract"
        else:
            for i in (1, 2):
                v[i] = v[0] + SHRINK * (v[i] - v[0])
                fv[i] = f(v[i])
            state.last_move = "shrink"
    state.iteration += 1
    _order(state)
    return state


def _simplex(f, x0, cfg, history):
    state = init_simplex(f, x0, cfg.initial_step_mm)
    _order(state)
    while True:
        nelder_mead_step(state)
        history.append(_record(state.iteration, f))
        if _converged(state.values[2], state.values[0], cfg.tolerance):
            return True


# --- Powell ---------------------------------------------------------------


@dataclass
class PowellState:
    f: CountedObjective
    point: np.ndarray
    value: float
    directions: np.ndarray  # rows are search directions
    step: float
    line_tolerance: float = 1e-4
    line_max_evals: int = 50
    iteration: int = 0
    last_gain: float = math.inf
    line_traces: list = field(default_factory=list)


def golden_line_max(g, g0, step, tol=1e-4, max_evals=50):
    """Maximize ``g(alpha)`` starting from ``alpha = 0`` with known ``g(0) = g0``.

    Brackets with an initial step of ``step`` grown by the golden ratio, then
    narrows the bracket by golden-section search.  Stops when the bracket is
    narrower than ``tol`` times ``max(step, |alpha|)`` or when the objective
    varies across the bracket by less than ``tol`` relative to its value.
    Returns ``(alpha, value, trace)``; ``alpha`` stays 0 unless a strictly
    better value was found.
    """
    trace = [(0.0, g0)]
    best = [0.0, g0]

    def ev(alpha):
        if len(trace) > max_evals:
            return None
        val = g(alpha)
        trace.append((alpha, val))
        if val > best[1]:
            best[0], best[1] = alpha, val
        return val

    def done():
        return best[0], best[1], trace

    # bracket: lo < mid < hi with g(mid) >= g(lo), g(hi)
    fb = ev(step)
    if fb is None:
        return done()
    if fb > g0:
        lo, f_lo, mid, f_mid = 0.0, g0, step, fb
        while True:
            hi = mid + (mid - lo) / _GOLD
            f_hi = ev(hi)
            if f_hi is None:
                return done()
            if f_hi <= f_mid:
                break
            lo, f_lo, mid, f_mid = mid, f_mid, hi, f_hi
    else:
        fc = ev(-step)
        if fc is None:
            return done()
        if fc <= g0:
            lo, f_lo, mid, f_mid, hi, f_hi = -step, fc, 0.0, g0, step, fb
        else:
            hi, f_hi, mid, f_mid = 0.0, g0, -step, fc
            while True:
                lo = mid - (hi - mid) / _GOLD
                f_lo = ev(lo)
                if f_lo is None:
                    return done()
                if f_lo <= f_mid:
                    break
                hi, f_hi, mid, f_mid = mid, f_mid, lo, f_lo
    while hi - lo > tol * max(abs(step), abs(mid)):
        if f_mid - min(f_lo, f_hi) <= tol * abs(f_mid) + _TINY:
            break
        # probe the larger side of the bracket
        if hi - mid > mid - lo:
            x = mid + (1.0 - _GOLD) * (hi - mid)
            fx = ev(x)
            if fx is None:
                break
            if fx > f_mid:
                lo, f_lo, mid, f_mid = mid, f_mid, x, fx
            else:
                hi, f_hi = x, fx
        else:
            x = mid - (1.0 - _GOLD) * (mid - lo)
            fx = ev(x)
            if fx is None:
                break
            if fx > f_mid:
                hi, f_hi, mid, f_mid = mid, f_mid, x, fx
            else:
                lo, f_lo = x, fx
    return done()


def _line_max(state, direction):
    f = state.f
    p = state.point

    def g(alpha):
        return f(p + alpha * direction)

    alpha, value, trace = golden_line_max(g, state.value, state.step, state.line_tolerance, state.line_max_evals)
    state.line_traces.append(trace)
    if value > state.value:
        state.point = p + alpha * direction
        state.value = value


def powell_step(state):
    """One sweep of line maximizations plus the classic direction replacement."""
    f = state.f
    start, f_start = state.point.copy(), state.value
    biggest, i_big = 0.0, 0
    for i, d in enumerate(state.directions):
        before = state.value
        _line_max(state, d)
        if state.value - before > biggest:
            biggest, i_big = state.value - before, i
    state.iteration += 1
    state.last_gain = state.value - f_start
    if state.last_gain <= 0.0:
        return state
    extrapolated = 2.0 * state.point - start
    f_ext = f(extrapolated)
    if f_ext > f_start:
        # Powell's test for replacing the direction of largest gain, sign-flipped for maximization
        t = -2.0 * (f_start - 2.0 * state.value + f_ext) * (f_start - state.value + biggest) ** 2 - biggest * (
            f_ext - f_start
        ) ** 2
        if t < 0:
            new_dir = state.point - start
            _line_max(state, new_dir)
            state.directions[i_big] = state.directions[-1]
            state.directions[-1] = new_dir
    return state


def _powell(f, x0, cfg, history):
    x0 = np.asarray(x0, dtype=np.float64)
    state = PowellState(
        f,
        x0.copy(),
        f(x0),
        np.eye(2),
        cfg.initial_step_mm,
        cfg.line_tolerance,
        cfg.line_max_evals,
    )
    while True:
        f_start = state.value
        powell_step(state)
        history.append(_record(state.iteration, f))
        if _converged(f_start, state.value, cfg.tolerance):
            return True


def _record(iteration, f):
    return {"iteration": iteration, "point": f.best_x.tolist(), "value": f.best_value, "evals": f.evals}


def maximize(f, x0, cfg=OptimizerConfig()):
    """Maximize ``f`` over 2D points starting at ``x0`` (array-like or Displacement2D)."""
    cfg.validate()
    if isinstance(x0, Displacement2D):
        x0 = x0.as_array()
    counted = CountedObjective(f, cfg.max_evals)
    history = []
    run = _powell if cfg.kind == "powell" else _simplex
    try:
        converged = run(counted, x0, cfg, history)
    except BudgetExhausted:
        converged = False
        if counted.best_x is None:
            raise ObjectiveError("evaluation budget exhausted before any evaluation", point=np.asarray(x0))
        if not history or history[-1]["evals"] != counted.evals:
            history.append(_record(len(history) + 1, counted))
    return OptResult(
        Displacement2D.from_array(counted.best_x), counted.best_value, counted.evals, converged, history
    )
