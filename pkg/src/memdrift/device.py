"""Extended VTEAM memristor model with sub-threshold drift.

Below the switching thresholds the state still moves, following the same
power-law structure as the above-threshold VTEAM branch::

    dw/dt = k_s_off * (v / v_off) ** alpha_s_off * f_off(w)    0 <= v < v_off
    dw/dt = k_s_on  * (v / v_on)  ** alpha_s_on  * f_on(w)     v_on < v < 0

Resistance interpolates linearly in the state, ``R = r_off * w + r_on * (1 - w)``.

Everything here works on scalars and on numpy arrays of per-cell parameters;
the crossbar simulator uses the array forms.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

#: Names of the rate/exponent parameters that receive device variation.
VARIED_FIELDS = (
    "k_s_on",
    "k_s_off",
    "alpha_s_on",
    "alpha_s_off",
    "k_on",
    "k_off",
    "alpha_on",
    "alpha_off",
)

#: Largest state change allowed in one explicit Euler sub-step.
MAX_DW_PER_SUBSTEP = 1e-3
#: Sub-step cap per pulse. Only above-threshold (switching) pulses reach it;
#: they then take larger steps and end clamped at the state bound.
MAX_SUBSTEPS = 10_000

WINDOW_KINDS = ("rectangular", "linear", "polynomial")


@dataclass(frozen=True)
class DeviceParams:
    """Parameter set of one extended-VTEAM device.

    Defaults are the sub-threshold values fitted to the TiOx device
    (SET/RESET thresholds of -0.6 V / +0.6 V). The above-threshold
    coefficients and the resistance bounds were not published with the
    fit; the values here are synthetic placeholders.
    """

    v_on: float = -0.6
    v_off: float = 0.6
    k_s_on: float = -8.445e-6
    k_s_off: float = 1.126e-7
    alpha_s_on: float = 6.0
    alpha_s_off: float = 5.0
    k_on: float = -1.0e4
    k_off: float = 1.0e4
    alpha_on: float = 3.0
    alpha_off: float = 3.0
    r_on: float = 100.0
    r_off: float = 10_000.0
    window_kind: str = "rectangular"
    window_p: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.v_on < 0.0 < self.v_off):
            raise ValueError(f"thresholds must satisfy v_on < 0 < v_off, got {self.v_on}, {self.v_off}")
        if not (self.r_off > self.r_on > 0.0):
            raise ValueError(f"need r_off > r_on > 0, got r_on={self.r_on}, r_off={self.r_off}")
        if self.k_s_on > 0 or self.k_on > 0:
            raise ValueError("SET-direction coefficients k_s_on, k_on must be <= 0")
        if self.k_s_off < 0 or self.k_off < 0:
            raise ValueError("RESET-direction coefficients k_s_off, k_off must be >= 0")
        for name in ("alpha_s_on", "alpha_s_off", "alpha_on", "alpha_off"):
            if getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be >= 1")
        if self.window_kind not in WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.window_kind!r}")
        if self.window_p < 1:
            raise ValueError("window_p must be a positive integer")

    @property
    def read_limit(self) -> float:
        """Largest voltage magnitude that is still sub-threshold in both polarities."""
        return min(-self.v_on, self.v_off)

    @property
    def g_min(self) -> float:
        return 1.0 / self.r_off

    @property
    def g_max(self) -> float:
        return 1.0 / self.r_on

    def replace(self, **changes) -> "DeviceParams":
        return dataclasses.replace(self, **changes)

    def without_drift(self) -> "DeviceParams":
        """Same device with the sub-threshold drift switched off."""
        return self.replace(k_s_on=0.0, k_s_off=0.0)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DeviceParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown DeviceParams fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DeviceParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def resistance(w, params: DeviceParams):
    return params.r_off * w + params.r_on * (1.0 - w)


def conductance(w, params: DeviceParams):
    return 1.0 / resistance(w, params)


def state_for_conductance(g, params: DeviceParams):
    """Invert ``conductance``; raises if ``g`` is outside the device range."""
    g = np.asarray(g, dtype=float)
    if np.any(g < params.g_min * (1 - 1e-12)) or np.any(g > params.g_max * (1 + 1e-12)):
        raise ValueError("conductance outside [1/r_off, 1/r_on]")
    w = (1.0 / g - params.r_on) / (params.r_off - params.r_on)
    return np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class MemristorState:
    w: float
    params: DeviceParams = field(default_factory=DeviceParams)

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ValueError(f"state w={self.w} outside [0, 1]")

    @property
    def resistance(self) -> float:
        return float(resistance(self.w, self.params))

    @property
    def conductance(self) -> float:
        return 1.0 / self.resistance


def window(w, direction, kind: str = "rectangular", p: int = 2):
    """Window factor in [0, 1] for motion in ``direction`` (+1 RESET, -1 SET).

    All windows vanish when the state sits on the bound it is being pushed
    through, so the integrator can never leave [0, 1] by more than one
    sub-step (which is then clamped away).
    """
    w = np.asarray(w, dtype=float)
    direction = np.asarray(direction, dtype=float)
    if kind == "rectangular":
        f = np.ones_like(w + direction)
    elif kind == "linear":
        f = np.where(direction > 0, 1.0 - w, w)
    elif kind == "polynomial":
        f = 1.0 - (2.0 * w - 1.0) ** (2 * p)
    else:
        raise ValueError(f"unknown window kind {kind!r}")
    blocked = ((direction > 0) & (w >= 1.0)) | ((direction < 0) & (w <= 0.0))
    return np.where(blocked, 0.0, f)


def _rate_magnitude(v, v_on, v_off, k_s_on, k_s_off, a_s_on, a_s_off, k_on, k_off, a_on, a_off):
    """Window-free state rate; arrays broadcast against each other."""
    v = np.asarray(v, dtype=float)
    pos = v >= 0.0
    if v.size and np.max(np.where(pos, v / v_off, v / v_on)) < 1.0:
        # every voltage is sub-threshold; skip the switching terms
        r = np.where(pos, v / v_off, v / v_on)
        rate = np.where(pos, k_s_off * np.power(r, a_s_off), k_s_on * np.power(r, a_s_on))
        return np.where(v == 0.0, 0.0, rate)
    # ratios are >= 0 inside each branch; the other branch is masked out below
    r_off = np.where(pos, v / v_off, 0.0)
    r_on = np.where(pos, 0.0, v / v_on)
    sub_off = k_s_off * np.power(np.minimum(r_off, 1.0), a_s_off)
    sub_on = k_s_on * np.power(np.minimum(r_on, 1.0), a_s_on)
    # above threshold: sub-threshold value at the threshold plus the VTEAM term,
    # so the rate is continuous and monotone across the threshold
    over_off = k_off * np.power(np.maximum(r_off - 1.0, 0.0), a_off)
    over_on = k_on * np.power(np.maximum(r_on - 1.0, 0.0), a_on)
    rate = np.where(pos, sub_off + over_off, sub_on + over_on)
    return np.where(v == 0.0, 0.0, rate)


def param_arrays(params: DeviceParams, shape=()) -> dict[str, np.ndarray]:
    """Broadcast the varied parameters of ``params`` to arrays of ``shape``."""
    return {name: np.full(shape, getattr(params, name), dtype=float) for name in VARIED_FIELDS}


def state_rate_array(w, v, params: DeviceParams, cell: dict[str, np.ndarray] | None = None):
    """Vectorised ``dw/dt``.

    ``cell`` optionally overrides the varied parameters with per-cell arrays
    (as produced by :func:`sample_variation_array`); thresholds, resistances
    and the window always come from ``params``.
    """
    c = cell if cell is not None else {n: getattr(params, n) for n in VARIED_FIELDS}
    base = _rate_magnitude(
        v, params.v_on, params.v_off,
        c["k_s_on"], c["k_s_off"], c["alpha_s_on"], c["alpha_s_off"],
        c["k_on"], c["k_off"], c["alpha_on"], c["alpha_off"],
    )
    return base * window(w, np.sign(base), params.window_kind, params.window_p)


def state_rate(state: MemristorState, v: float) -> float:
    """dw/dt of a single device at voltage ``v``."""
    if v == 0.0:
        return 0.0
    return float(state_rate_array(state.w, v, state.params))


def integrate_array(w, v, dt, params: DeviceParams, cell=None, max_dw: float = MAX_DW_PER_SUBSTEP):
    """Advance an array of states by ``dt`` under voltages ``v``.

    The number of sub-steps is chosen so that no cell moves more than
    ``max_dw`` per sub-step (window factors never exceed one, so the bound is
    taken from the window-free rate). Each sub-step is a classic fourth-order
    Runge-Kutta step, clamped to [0, 1].
    """
    w = np.array(w, dtype=float, copy=True)
    v = np.asarray(v, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ValueError("dt must be positive")
    if not np.all(np.isfinite(v)):
        raise ValueError("voltage must be finite")
    c = cell if cell is not None else {n: getattr(params, n) for n in VARIED_FIELDS}
    free = _rate_magnitude(
        v, params.v_on, params.v_off,
        c["k_s_on"], c["k_s_off"], c["alpha_s_on"], c["alpha_s_off"],
        c["k_on"], c["k_off"], c["alpha_on"], c["alpha_off"],
    )
    reach = float(np.max(np.abs(free * dt))) if free.size else 0.0
    if reach == 0.0:
        return np.broadcast_to(w, np.broadcast_shapes(w.shape, free.shape)).copy()
    if params.window_kind == "rectangular":
        # state-independent rate and monotone motion: sub-steps would only
        # re-apply the same clamp, so one step is exact
        return np.clip(w + free * dt, 0.0, 1.0)
    n = min(max(1, math.ceil(reach / max_dw)), MAX_SUBSTEPS)
    h = dt / n
    direction = np.sign(free)

    def rate(x):
        return free * window(np.clip(x, 0.0, 1.0), direction, params.window_kind, params.window_p)

    for _ in range(n):
        k1 = rate(w)
        k2 = rate(w + 0.5 * h * k1)
        k3 = rate(w + 0.5 * h * k2)
        k4 = rate(w + h * k3)
        w = np.clip(w + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0, 1.0)
    return w


def integrate_step(state: MemristorState, v: float, dt: float,
                   max_dw: float = MAX_DW_PER_SUBSTEP) -> MemristorState:
    """Apply a constant voltage ``v`` for ``dt`` seconds."""
    if not math.isfinite(v):
        raise ValueError("voltage must be finite")
    if not (dt > 0 and math.isfinite(dt)):
        raise ValueError("dt must be a positive finite duration")
    w = integrate_array(state.w, v, dt, state.params, max_dw=max_dw)
    return MemristorState(float(w), state.params)


# -- device variation -------------------------------------------------------

VARIATION_MODES = ("natural", "relative", "absolute")


def _variance(nominal, scale: float, mode: str, name: str = ""):
    nominal = np.asarray(nominal, dtype=float)
    if mode == "natural":
        # exponents are dimensionless and take the variance literally;
        # rate constants carry units, so theirs is taken in units of the nominal
        mode = "absolute" if name.startswith("alpha") else "relative"
    if mode == "relative":
        return scale * nominal**2
    if mode == "absolute":
        return scale * np.abs(nominal)
    raise ValueError(f"unknown variation mode {mode!r}")


def _clamp_signs(values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = dict(values)
    out["k_s_on"] = np.minimum(out["k_s_on"], 0.0)
    out["k_on"] = np.minimum(out["k_on"], 0.0)
    out["k_s_off"] = np.maximum(out["k_s_off"], 0.0)
    out["k_off"] = np.maximum(out["k_off"], 0.0)
    for name in ("alpha_s_on", "alpha_s_off", "alpha_on", "alpha_off"):
        out[name] = np.maximum(out[name], 1.0)
    return out


def sample_variation_array(base: DeviceParams, shape, rng: np.random.Generator,
                           scale: float = 0.15, mode: str = "natural") -> dict[str, np.ndarray]:
    """Per-cell Gaussian variation of every k and alpha parameter.

    Each parameter ``x`` is drawn from a normal distribution centred on its
    nominal value ``x0`` with variance ``scale * |x0|``. That expression is
    only unit-free for the dimensionless exponents, so the default
    ``mode="natural"`` applies it literally to the alphas and in units of
    ``x0`` (variance ``scale * x0**2``) to the rate constants.
    ``mode="relative"`` uses ``scale * x0**2`` for everything and
    ``mode="absolute"`` uses ``scale * |x0|`` in SI units for everything.
    Samples are clamped back to the sign conventions of :class:`DeviceParams`.
    """
    if scale < 0:
        raise ValueError("variation scale must be >= 0")
    if mode not in VARIATION_MODES:
        raise ValueError(f"unknown variation mode {mode!r}")
    out = {}
    for name in VARIED_FIELDS:
        nominal = getattr(base, name)
        if scale == 0.0:
            out[name] = np.full(shape, nominal, dtype=float)
            continue
        std = np.sqrt(_variance(nominal, scale, mode, name))
        out[name] = nominal + std * rng.standard_normal(shape)
    return _clamp_signs(out)


def sample_variation(base: DeviceParams, rng_seed: int, scale: float = 0.15,
                     mode: str = "natural") -> DeviceParams:
    """One variation-sampled copy of ``base``; ``scale=0`` returns it unchanged."""
    if scale == 0.0:
        return base
    rng = np.random.default_rng(rng_seed)
    drawn = sample_variation_array(base, (), rng, scale, mode)
    return base.replace(**{k: float(v) for k, v in drawn.items()})


def tiox_params() -> DeviceParams:
    """The fitted TiOx device shipped with the package."""
    return DeviceParams.load(Path(__file__).parent / "data" / "tiox_device.json")
