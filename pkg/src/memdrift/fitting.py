"""Fitting the sub-threshold rate parameters to I-V sweep data.

A sweep is a sequence of (voltage, current, dwell) points applied in order.
The device model replays the same sequence from the state implied by the
first point and predicts the current at every step; the fit minimises the
mean squared error of log|I|. Simulated annealing over (log|k|, integer
alpha) for both branches seeds a gradient-based refinement with real alpha.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .device import DeviceParams, integrate_array, state_rate_array
from .optimizer import bfgs_minimize

log = logging.getLogger(__name__)

MIN_POINTS_PER_BRANCH = 10
# Per-point dwell times long enough for sub-threshold drift to move the state
# by a measurable fraction of its range; with short dwells the sweep carries
# almost no information about the exponents.
DEFAULT_DWELL_SET_S = 3e3
DEFAULT_DWELL_RESET_S = 2e5
DEFAULT_POINTS_PER_BRANCH = 150
LOG_K_RANGE = (-30.0, 0.0)  # log10 |k| search interval
ALPHA_RANGE = (1, 10)


@dataclass
class IVData:
    voltage: np.ndarray
    current: np.ndarray
    dwell: np.ndarray

    def __post_init__(self):
        self.voltage = np.asarray(self.voltage, dtype=float).ravel()
        self.current = np.asarray(self.current, dtype=float).ravel()
        self.dwell = np.broadcast_to(np.asarray(self.dwell, dtype=float), self.voltage.shape).copy()
        if not (self.voltage.shape == self.current.shape == self.dwell.shape):
            raise ValueError("voltage, current and dwell must have equal lengths")
        if not (np.all(np.isfinite(self.voltage)) and np.all(np.isfinite(self.current))):
            raise ValueError("non-finite voltage or current in I-V data")
        if np.any(self.dwell <= 0) or not np.all(np.isfinite(self.dwell)):
            raise ValueError("dwell times must be positive and finite")

    def branch_counts(self) -> tuple[int, int]:
        """Number of SET-side (v < 0) and RESET-side (v > 0) points."""
        return int(np.sum(self.voltage < 0)), int(np.sum(self.voltage > 0))

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["voltage_v", "current_a", "dwell_s"])
            for v, i, t in zip(self.voltage, self.current, self.dwell):
                writer.writerow([repr(float(v)), repr(float(i)), repr(float(t))])

    @classmethod
    def from_csv(cls, path) -> "IVData":
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if not rows:
            raise ValueError(f"{path}: empty I-V file")
        header = [h.strip() for h in rows[0]]
        missing = {"voltage_v", "current_a", "dwell_s"} - set(header)
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        idx = [header.index(c) for c in ("voltage_v", "current_a", "dwell_s")]
        try:
            data = np.array([[float(r[i]) for i in idx] for r in rows[1:]])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}: malformed row ({exc})") from None
        if data.size == 0:
            raise ValueError(f"{path}: no data rows")
        return cls(data[:, 0], data[:, 1], data[:, 2])


def sweep_protocol(params: DeviceParams, points_per_branch: int = DEFAULT_POINTS_PER_BRANCH, peaks=(0.7, 0.85, 0.98),
                   dwell_set: float = DEFAULT_DWELL_SET_S, dwell_reset: float = DEFAULT_DWELL_RESET_S):
    """RESET triangles (0 -> +v -> 0) followed by SET triangles, one per peak.

    Peaks are fractions of the thresholds, so every point stays
    sub-threshold; several peak heights expose the voltage exponent.
    """
    per = max(2, points_per_branch // len(peaks))
    half = per // 2
    up = np.linspace(0.0, 1.0, half + 1)[1:]
    tri = np.concatenate([up, up[::-1][1:]])
    shape = np.concatenate([pk * tri for pk in peaks])
    v_reset = params.v_off * shape
    v_set = params.v_on * shape
    volts = np.concatenate([v_reset, v_set])
    dwell = np.concatenate([np.full(v_reset.size, dwell_reset), np.full(v_set.size, dwell_set)])
    return volts, dwell


def simulate_sweep(params: DeviceParams, voltage, dwell, w0: float) -> np.ndarray:
    """Current at each sweep point; the state then integrates that point's dwell."""
    voltage = np.asarray(voltage, dtype=float)
    dwell = np.asarray(dwell, dtype=float)
    span = params.r_off - params.r_on
    if params.window_kind == "rectangular":
        # the rate does not depend on w, so the state path is a running sum
        # unless it reaches a bound; that case falls through to stepping
        step = state_rate_array(0.5, voltage, params) * dwell
        path = w0 + np.concatenate([[0.0], np.cumsum(step[:-1])])
        if not np.all((path >= 0.0) & (path <= 1.0)):
            # a rectangular-window step is exact up to the clamp at the bounds
            w = float(w0)
            for n, dw in enumerate(step.tolist()):
                path[n] = w
                w = min(max(w + dw, 0.0), 1.0)
        return voltage / (params.r_on + span * path)
    w = float(w0)
    out = np.empty(voltage.size)
    for n, (v, t) in enumerate(zip(voltage, dwell)):
        out[n] = v / (params.r_on + span * w)
        w = float(integrate_array(w, v, t, params))
    return out


def synthetic_sweep(params: DeviceParams, *, points_per_branch: int = DEFAULT_POINTS_PER_BRANCH, w0: float = 0.5,
                    dwell_set: float = DEFAULT_DWELL_SET_S, dwell_reset: float = DEFAULT_DWELL_RESET_S,
                    noise: float = 0.0, seed=0) -> IVData:
    """Stand-in for lab data: replay the sweep protocol and add multiplicative current noise."""
    volts, dwell = sweep_protocol(params, points_per_branch, dwell_set=dwell_set, dwell_reset=dwell_reset)
    current = simulate_sweep(params, volts, dwell, w0)
    if noise:
        current = current * (1.0 + noise * np.random.default_rng(seed).standard_normal(current.size))
    return IVData(volts, current, dwell)


@dataclass
class FitReport:
    anneal_objective: float
    refined_objective: float
    anneal_params: dict
    refine_iterations: int


def _initial_state(data: IVData, r_on: float, r_off: float, points: int = 5) -> float:
    """State before the sweep, from the geometric mean resistance of its first points.

    The leading points are the lowest voltages of the sweep, where the state
    has barely moved; averaging them damps measurement noise.
    """
    nz = np.flatnonzero((data.voltage != 0) & (data.current != 0))
    if nz.size == 0:
        raise ValueError("I-V data has no nonzero point to infer the initial state from")
    head = nz[:points]
    R = float(np.exp(np.mean(np.log(data.voltage[head] / data.current[head]))))
    return float(np.clip((R - r_on) / (r_off - r_on), 0.0, 1.0))


class _SweepObjective:
    """log-current MSE over z = (rho_on, alpha_on, rho_off, alpha_off).

    ``rho = log10|k| + alpha * log10(R_REF)`` is the log rate at a fixed
    fraction of the threshold. Changing alpha then leaves the rate near the
    sweep peak (where the state actually moves) roughly unchanged, which
    decouples the two coordinates.
    """

    R_REF = 0.9

    def __init__(self, data: IVData, base: DeviceParams):
        self.data = data
        self.base = base
        self.mask = (data.voltage != 0) & (data.current != 0)
        self.log_i = np.log(np.abs(data.current[self.mask]))
        self.w0 = _initial_state(data, base.r_on, base.r_off)

    def k_alpha(self, z):
        r_on, a_on, r_off, a_off = (float(t) for t in z)
        a_on, a_off = max(a_on, 1.0), max(a_off, 1.0)
        lr = math.log10(self.R_REF)
        return -(10.0 ** (r_on - a_on * lr)), a_on, 10.0 ** (r_off - a_off * lr), a_off

    def z_of(self, k_on, a_on, k_off, a_off) -> np.ndarray:
        lr = math.log10(self.R_REF)
        return np.array([math.log10(abs(k_on)) + a_on * lr, a_on, math.log10(abs(k_off)) + a_off * lr, a_off])

    def params(self, z) -> DeviceParams:
        k_on, a_on, k_off, a_off = self.k_alpha(z)
        return self.base.replace(k_s_on=k_on, alpha_s_on=a_on, k_s_off=k_off, alpha_s_off=a_off)

    def __call__(self, z) -> float:
        # an optional fifth coordinate overrides the initial state
        w0 = float(np.clip(z[4], 0.0, 1.0)) if len(z) > 4 else self.w0
        sim = simulate_sweep(self.params(z[:4]), self.data.voltage, self.data.dwell, w0)
        return float(np.mean((np.log(np.abs(sim[self.mask])) - self.log_i) ** 2))


def _coarse_start(obj: _SweepObjective, alpha: float = 5.0) -> np.ndarray:
    """Best rate coordinate per branch on a 0.5-decade grid, one branch at a time."""
    lo, hi = LOG_K_RANGE
    grid = np.arange(lo, hi + 1e-9, 0.5)
    z = np.array([lo, alpha, lo, alpha])
    for idx in (2, 0):
        vals = []
        for r in grid:
            z[idx] = r
            vals.append(obj(z))
        z[idx] = grid[int(np.argmin(vals))]
    return z


def _anneal(obj: _SweepObjective, rng: np.random.Generator, *, cooling: float = 0.95,
            temperatures: int = 200, proposals: int = 20):
    """Metropolis search with integer alphas, geometric cooling and per-level restarts."""
    lo, hi = LOG_K_RANGE
    z = _coarse_start(obj)
    fz = obj(z)
    best, fbest = z.copy(), fz
    T = max(fz, 1e-12)
    for level in range(temperatures):
        width = max(0.02, 2.0 * cooling**level)
        # restart every level from the incumbent: the small-k side of the
        # landscape is a flat plateau that an unanchored walk never leaves
        z, fz = best.copy(), fbest
        for _ in range(proposals):
            cand = z.copy()
            branch = 2 * int(rng.integers(2))
            u = rng.random()
            if u < 0.5:
                cand[branch] = np.clip(cand[branch] + rng.normal(0.0, width), lo, hi)
            else:
                cand[branch + 1] = np.clip(cand[branch + 1] + rng.choice([-1, 1]), *ALPHA_RANGE)
                if u < 0.8:
                    cand[branch] = np.clip(cand[branch] + rng.normal(0.0, width), lo, hi)
            fc = obj(cand)
            if fc <= fz or rng.random() < math.exp(-(fc - fz) / T):
                z, fz = cand, fc
                if fz < fbest:
                    best, fbest = z.copy(), fz
        T *= cooling
    return best, fbest


def _refine(obj: _SweepObjective, z0, f0, *, max_iter: int = 200, tol: float = 1e-10):
    """Quasi-Newton descent (finite-difference gradient, Armijo steps) with real alphas.

    Never returns a point worse than the starting one.
    """
    def f(z):
        return obj(_alpha_floor(z))

    z0 = np.asarray(z0, dtype=float)
    if z0.size == 4:  # the initial state joins the refinement
        z0 = np.r_[z0, obj.w0]
    res = bfgs_minimize(f, z0, tol=tol, max_iter=max_iter)
    z = _alpha_floor(res.x)
    z[4] = min(max(z[4], 0.0), 1.0)
    fz = obj(z)
    if fz > f0:
        return z0, float(f0), res.nit
    return z, fz, res.nit


def _alpha_floor(z):
    z = np.array(z, dtype=float)
    z[[1, 3]] = np.maximum(z[[1, 3]], 1.0)
    return z


def check_sweep(data: IVData, base: DeviceParams) -> None:
    """Raise ValueError unless ``data`` can identify both sub-threshold branches."""
    n_set, n_reset = data.branch_counts()
    if n_set < MIN_POINTS_PER_BRANCH or n_reset < MIN_POINTS_PER_BRANCH:
        raise ValueError(f"need at least {MIN_POINTS_PER_BRANCH} points per branch, "
                         f"got {n_set} (SET) and {n_reset} (RESET)")
    if np.any(data.voltage <= base.v_on) or np.any(data.voltage >= base.v_off):
        raise ValueError("I-V data must stay strictly between the switching thresholds")


def fit_subthreshold(data: IVData, base: DeviceParams, *, seed: int = 0, temperatures: int = 200,
                     proposals: int = 20, cooling: float = 0.95,
                     refine_iter: int = 200) -> tuple[DeviceParams, FitReport]:
    """Fit k_s_on, alpha_s_on, k_s_off and alpha_s_off to a sub-threshold sweep.

    ``base`` supplies the thresholds, resistances and above-threshold
    parameters, which are held fixed.
    """
    check_sweep(data, base)
    obj = _SweepObjective(data, base)
    rng = np.random.default_rng(seed)
    z_a, f_a = _anneal(obj, rng, cooling=cooling, temperatures=temperatures, proposals=proposals)
    log.info("annealing: objective %.3e at %s", f_a, z_a)
    # the integer alpha grid can leave the annealer one step off the real
    # optimum, so the refinement also starts from each neighbouring alpha
    z_r, f_r, it = _refine(obj, z_a, f_a, max_iter=refine_iter)
    for idx in (1, 3):
        for step in (-1.0, 1.0):
            z0 = np.r_[z_a, obj.w0]
            z0[idx] += step
            if not ALPHA_RANGE[0] <= z0[idx] <= ALPHA_RANGE[1]:
                continue
            z, f, n = _refine(obj, z0, obj(z0), max_iter=refine_iter)
            if f < f_r:
                z_r, f_r, it = z, f, n
    if f_r > f_a:
        z_r, f_r = np.r_[z_a, obj.w0], f_a
    fitted = obj.params(z_r[:4])
    k_on, a_on, k_off, a_off = obj.k_alpha(z_a)
    report = FitReport(f_a, f_r, {"k_s_on": k_on, "alpha_s_on": a_on, "k_s_off": k_off,
                                  "alpha_s_off": a_off}, it)
    return fitted, report
