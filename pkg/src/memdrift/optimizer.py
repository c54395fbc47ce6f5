"""Unconstrained minimisers: BFGS with finite-difference gradients, Nelder-Mead.

The BFGS loop keeps the Hessian approximation ``B`` itself (not its inverse)
and solves ``B p = -grad`` for the search direction each iteration. Objective
evaluations are assumed to be expensive simulations, so every call is counted
and reported in the trace.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
ALPHA_MIN = 1e-12
CURVATURE_EPS = 1e-10


@dataclass
class TraceRow:
    iteration: int
    f: float
    grad_norm: float
    step_norm: float
    evals: int


@dataclass
class OptimizerState:
    x_k: np.ndarray
    b_k: np.ndarray
    grad_k: np.ndarray
    p_k: np.ndarray | None = None
    s_k: np.ndarray | None = None
    y_k: np.ndarray | None = None
    alpha_k: float = 0.0
    iteration: int = 0


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    status: str
    nit: int
    nfev: int
    trace: list[TraceRow] = field(default_factory=list)
    state: OptimizerState | None = None

    @property
    def success(self) -> bool:
        return self.status == "converged"

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "f", "grad_norm", "step_norm", "evals"])
        for r in self.trace:
            writer.writerow([r.iteration, repr(r.f), repr(r.grad_norm), repr(r.step_norm), r.evals])
        return buf.getvalue()


class _Counted:
    """Objective wrapper counting evaluations and rejecting non-finite values."""

    def __init__(self, f: Callable[[np.ndarray], float]):
        self.f = f
        self.calls = 0

    def __call__(self, x) -> float:
        self.calls += 1
        val = float(self.f(np.asarray(x, dtype=float)))
        if not math.isfinite(val):
            raise FloatingPointError(f"objective returned {val} at x={x}")
        return val


def fd_gradient(f: Callable[[np.ndarray], float], x, eps: float | None = None) -> np.ndarray:
    """Central-difference gradient, one pair of probes per coordinate.

    The default step is ``max(1e-6, 1e-6 * |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = eps if eps is not None else max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective near x[{i}]")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def _line_search(f, x, fx, g, p, grad=None):
    """Approximate argmin of f along p subject to the Armijo condition.

    Tries the unit step, then the minimiser of the quadratic model along p
    (from the directional derivative at the trial point when an analytic
    gradient is available, otherwise from f(0), f'(0) and the trial value);
    backtracks with safeguarded interpolation until a sufficient-decrease
    step is found. Returns (alpha, f(x + alpha p)) or (None, fx) on failure.
    """
    slope = float(g @ p)
    if slope >= 0:
        return None, fx
    alpha = 1.0
    while alpha >= ALPHA_MIN:
        fa = f(x + alpha * p)
        alpha_q = None
        if grad is not None:
            d_slope = float(grad(x + alpha * p) @ p) - slope
            if d_slope > 0:
                alpha_q = -slope * alpha / d_slope
        else:
            curv = fa - fx - slope * alpha
            if curv > 0:
                alpha_q = -slope * alpha**2 / (2.0 * curv)
        if fa <= fx + ARMIJO_C1 * alpha * slope:
            best_a, best_f = alpha, fa
            if alpha_q is not None and alpha_q > 0 and not math.isclose(alpha_q, alpha, rel_tol=1e-12):
                fq = f(x + alpha_q * p)
                if fq < best_f and fq <= fx + ARMIJO_C1 * alpha_q * slope:
                    best_a, best_f = alpha_q, fq
            return best_a, best_f
        if alpha_q is None:
            alpha *= BACKTRACK
        else:
            alpha = min(max(alpha_q, 0.1 * alpha), BACKTRACK * alpha)
    return None, fx


def bfgs_minimize(f: Callable[[np.ndarray], float], x0, tol: float = 1e-8, max_iter: int = 200,
                  grad: Callable[[np.ndarray], np.ndarray] | None = None,
                  eps: float | None = None) -> OptimizeResult:
    """Quasi-Newton minimisation with the rank-two BFGS update of ``B``.

    ``grad`` defaults to central finite differences of ``f``. Stops when the
    gradient or the step falls below ``tol`` (infinity norm) or after
    ``max_iter`` iterations. A failed line search returns the best point so
    far with ``status="line_search_failed"``.
    """
    fc = _Counted(f)
    gradient = grad if grad is not None else (lambda z: fd_gradient(fc, z, eps))
    x = np.array(x0, dtype=float).ravel()
    fx = fc(x)
    g = np.asarray(gradient(x), dtype=float)
    n = x.size
    B = np.eye(n)
    st = OptimizerState(x.copy(), B, g.copy())
    trace = [TraceRow(0, fx, float(np.max(np.abs(g))), 0.0, fc.calls)]
    status = "max_iter"
    for k in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            status = "converged"
            break
        try:
            p = np.linalg.solve(B, -g)
        except np.linalg.LinAlgError:
            B = np.eye(n)
            p = -g
        if g @ p >= 0:
            # B lost definiteness numerically; restart from steepest descent
            B = np.eye(n)
            p = -g
        alpha, f_new = _line_search(fc, x, fx, g, p, grad)
        if alpha is None:
            status = "line_search_failed"
            break
        s = alpha * p
        x_new = x + s
        g_new = np.asarray(gradient(x_new), dtype=float)
        y = g_new - g
        sy = float(y @ s)
        if sy > CURVATURE_EPS:
            Bs = B @ s
            B = B + np.outer(y, y) / sy - np.outer(Bs, Bs) / float(s @ Bs)
            B = 0.5 * (B + B.T)
        x, fx, g = x_new, f_new, g_new
        st = OptimizerState(x.copy(), B.copy(), g.copy(), p, s, y, alpha, k)
        step_norm = float(np.max(np.abs(s)))
        trace.append(TraceRow(k, fx, float(np.max(np.abs(g))), step_norm, fc.calls))
        if np.max(np.abs(g)) < tol or step_norm < tol:
            status = "converged"
            break
    return OptimizeResult(x, fx, status, len(trace) - 1, fc.calls, trace, st)


def nelder_mead_minimize(f: Callable[[np.ndarray], float], x0, tol: float = 1e-10,
                         max_iter: int = 5000) -> OptimizeResult:
    """Downhill simplex with reflection 1, expansion 2, contraction 0.5, shrink 0.5."""
    fc = _Counted(f)
    x0 = np.array(x0, dtype=float).ravel()
    n = x0.size
    simplex = [x0]
    for i in range(n):
        v = x0.copy()
        v[i] += max(0.05, 0.05 * abs(x0[i]))
        simplex.append(v)
    simplex = np.array(simplex)
    fvals = np.array([fc(v) for v in simplex])
    trace = []
    status = "max_iter"
    for it in range(1, max_iter + 1):
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        spread = float(fvals[-1] - fvals[0])
        trace.append(TraceRow(it - 1, float(fvals[0]), spread,
                              float(np.max(np.abs(simplex[1:] - simplex[0]))), fc.calls))
        if spread < tol:
            status = "converged"
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = fc(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = fc(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fcon = fc(xc)
            if fcon <= fr:
                simplex[-1], fvals[-1] = xc, fcon
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fcon = fc(xc)
            if fcon < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fcon
                continue
        best = simplex[0]
        simplex[1:] = best + 0.5 * (simplex[1:] - best)
        fvals[1:] = [fc(v) for v in simplex[1:]]
    i = int(np.argmin(fvals))
    return OptimizeResult(simplex[i].copy(), float(fvals[i]), status, len(trace), fc.calls, trace)


def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   tol: float = 1e-3) -> tuple[float, float]:
    """Minimise a unimodal scalar function on [lo, hi]; returns (x, f(x))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fcv, fdv = f(c), f(d)
    while b - a > tol:
        if fcv <= fdv:
            b, d, fdv = d, c, fcv
            c = b - invphi * (b - a)
            fcv = f(c)
        else:
            a, c, fcv = c, d, fdv
            d = a + invphi * (b - a)
            fdv = f(d)
    candidates = [(fcv, c), (fdv, d), (f(lo), lo), (f(hi), hi)]
    fbest, xbest = min(candidates)
    return xbest, fbest
