"""Input-to-pulse encoding: amplitude ratios, width ratios and input inversion.

A logical input ``x`` in [-1, 1] becomes a read pulse on its row. Negative
inputs use the base pulse (``base_amplitude * |x|`` volts for
``base_width`` seconds); positive inputs are stretched by the row's ratios,
``base_amplitude * A[i] * x`` volts for ``base_width * D[i]`` seconds.
Whole input vectors may additionally be inverted (multiplied by -1); the
periphery flips the sign of the corresponding outputs back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import VARIED_FIELDS, DeviceParams, _rate_magnitude, window

RATIO_BOUNDS = (0.25, 4.0)


@dataclass
class PulseConfig:
    """AIDX decision variables for one crossbar.

    ``amplitude_ratio`` and ``width_ratio`` hold one entry per row (or a
    single entry shared by all rows). ``inversion_mask`` marks which samples
    of the task's input set are presented inverted.
    """

    amplitude_ratio: np.ndarray
    width_ratio: np.ndarray
    base_amplitude: float = 0.3
    base_width: float = 200e-9
    inversion_fraction: float = 0.0
    inversion_mask: np.ndarray | None = None
    ratio_min: float = RATIO_BOUNDS[0]
    ratio_max: float = RATIO_BOUNDS[1]

    def __post_init__(self):
        self.amplitude_ratio = np.atleast_1d(np.asarray(self.amplitude_ratio, dtype=float))
        self.width_ratio = np.atleast_1d(np.asarray(self.width_ratio, dtype=float))
        if self.inversion_mask is not None:
            self.inversion_mask = np.asarray(self.inversion_mask, dtype=bool)
        self.validate()

    @classmethod
    def identity(cls, rows: int = 1, **kwargs) -> "PulseConfig":
        return cls(np.ones(rows), np.ones(rows), **kwargs)

    def validate(self, read_limit: float | None = None) -> None:
        for name, r in (("amplitude_ratio", self.amplitude_ratio), ("width_ratio", self.width_ratio)):
            if np.any(~np.isfinite(r)) or np.any(r <= 0):
                raise ValueError(f"{name} entries must be positive and finite")
            if np.any(r < self.ratio_min * (1 - 1e-9)) or np.any(r > self.ratio_max * (1 + 1e-9)):
                raise ValueError(
                    f"{name} outside hardware bounds [{self.ratio_min}, {self.ratio_max}]")
        if self.base_amplitude < 0 or self.base_width <= 0:
            raise ValueError("base pulse must have amplitude >= 0 and positive width")
        if not (0.0 <= self.inversion_fraction < 1.0):
            raise ValueError("inversion_fraction must lie in [0, 1)")
        if read_limit is not None and self.peak_amplitude() >= read_limit:
            raise ValueError(
                f"peak read amplitude {self.peak_amplitude():.4g} V is not below the "
                f"switching threshold {read_limit} V")

    def peak_amplitude(self) -> float:
        return self.base_amplitude * max(1.0, float(np.max(self.amplitude_ratio)))

    def for_rows(self, rows: int) -> tuple[np.ndarray, np.ndarray]:
        """A and D broadcast to ``rows`` entries."""
        A, D = self.amplitude_ratio, self.width_ratio
        if A.size not in (1, rows) or D.size not in (1, rows):
            raise ValueError(f"ratio vectors do not match {rows} rows")
        return np.broadcast_to(A, (rows,)), np.broadcast_to(D, (rows,))

    def is_inverted(self, sample_index: int) -> bool:
        if self.inversion_mask is None or self.inversion_mask.size == 0:
            return False
        return bool(self.inversion_mask[sample_index % self.inversion_mask.size])

    def with_ratios(self, A=None, D=None) -> "PulseConfig":
        return PulseConfig(
            self.amplitude_ratio if A is None else A,
            self.width_ratio if D is None else D,
            self.base_amplitude, self.base_width, self.inversion_fraction,
            self.inversion_mask, self.ratio_min, self.ratio_max,
        )

    def to_dict(self) -> dict:
        return {
            "A": self.amplitude_ratio.tolist(),
            "D": self.width_ratio.tolist(),
            "base_amplitude_v": self.base_amplitude,
            "base_width_s": self.base_width,
            "inversion_fraction": self.inversion_fraction,
            "inversion_mask": None if self.inversion_mask is None
            else self.inversion_mask.astype(int).tolist(),
            "ratio_min": self.ratio_min,
            "ratio_max": self.ratio_max,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PulseConfig":
        mask = data.get("inversion_mask")
        return cls(
            np.asarray(data["A"], dtype=float),
            np.asarray(data["D"], dtype=float),
            float(data["base_amplitude_v"]),
            float(data["base_width_s"]),
            float(data.get("inversion_fraction", 0.0)),
            None if mask is None else np.asarray(mask, dtype=bool),
            float(data.get("ratio_min", RATIO_BOUNDS[0])),
            float(data.get("ratio_max", RATIO_BOUNDS[1])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class Pulses:
    amplitude: np.ndarray
    width: np.ndarray
    sign: np.ndarray
    gain: np.ndarray = field(repr=False)

    @property
    def voltage(self) -> np.ndarray:
        return self.sign * self.amplitude


def encode_input(x_vec, cfg: PulseConfig, inverted: bool = False,
                 read_limit: float | None = 0.6) -> Pulses:
    """Map a normalised input vector onto one read pulse per row.

    ``gain`` is the amplitude multiplier each row received, which the
    periphery divides out when decoding.
    """
    x = np.asarray(x_vec, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("inputs must be normalised to |x| <= 1")
    if inverted:
        x = -x
    A, D = cfg.for_rows(x.size)
    pos = x > 0
    gain = np.where(pos, A, 1.0)
    amplitude = cfg.base_amplitude * gain * np.abs(x)
    width = cfg.base_width * np.where(pos, D, 1.0)
    if read_limit is not None and np.any(amplitude >= read_limit):
        raise ValueError(f"encoded pulse reaches the switching threshold ({read_limit} V)")
    return Pulses(amplitude, width, np.sign(x), gain)


def invert_fraction(x_set, a: float, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Multiply a random proportion ``a`` of the samples (rows) by -1.

    Returns the transformed samples and the boolean mask of inverted rows.
    """
    if not (0.0 <= a < 1.0):
        raise ValueError("inversion fraction must lie in [0, 1)")
    X = np.array(x_set, dtype=float, copy=True)
    n = X.shape[0]
    mask = np.zeros(n, dtype=bool)
    count = int(round(a * n))
    if count:
        rng = np.random.default_rng(seed)
        mask[rng.permutation(n)[:count]] = True
    X[mask] *= -1.0
    return X, mask


@dataclass
class InputDistribution:
    support: np.ndarray
    pdf: np.ndarray

    def __post_init__(self):
        self.support = np.atleast_1d(np.asarray(self.support, dtype=float))
        self.pdf = np.atleast_1d(np.asarray(self.pdf, dtype=float))
        if self.support.shape != self.pdf.shape:
            raise ValueError("support and pdf must have the same length")
        if np.any(self.pdf < 0) or not np.isclose(self.pdf.sum(), 1.0, atol=1e-9):
            raise ValueError("pdf must be nonnegative and sum to 1")

    @classmethod
    def from_samples(cls, samples, decimals: int = 6) -> "InputDistribution":
        vals, counts = np.unique(np.round(np.ravel(samples), decimals), return_counts=True)
        return cls(vals, counts / counts.sum())

    def mixture(self, a: float) -> "InputDistribution":
        """Distribution after inverting a proportion ``a``: (1-a) f(x) + a f(-x)."""
        if not (0.0 <= a < 1.0):
            raise ValueError("inversion fraction must lie in [0, 1)")
        support = np.concatenate([self.support, -self.support])
        pdf = np.concatenate([(1.0 - a) * self.pdf, a * self.pdf])
        vals, inverse = np.unique(support, return_inverse=True)
        return InputDistribution(vals, np.bincount(inverse, weights=pdf, minlength=vals.size))

    def mean(self) -> float:
        return float(np.dot(self.support, self.pdf))


def drift_rate_per_input(x, device: DeviceParams, cfg: PulseConfig, w=0.5, row: int = 0,
                         cell: dict | None = None):
    """g(x): time-averaged dw/dt of one read of input ``x`` relative to the base width.

    Positive inputs are read with amplitude ratio ``A`` for ``D`` base widths,
    so their rate is weighted by ``D``. ``cell`` may hold per-device parameter
    arrays; the result then broadcasts over devices.
    """
    x = np.asarray(x, dtype=float)
    A = float(cfg.amplitude_ratio[row if cfg.amplitude_ratio.size > 1 else 0])
    D = float(cfg.width_ratio[row if cfg.width_ratio.size > 1 else 0])
    v = cfg.base_amplitude * np.where(x > 0, A * x, x)
    c = cell if cell is not None else {n: getattr(device, n) for n in VARIED_FIELDS}
    base = _rate_magnitude(
        v, device.v_on, device.v_off,
        c["k_s_on"], c["k_s_off"], c["alpha_s_on"], c["alpha_s_off"],
        c["k_on"], c["k_off"], c["alpha_on"], c["alpha_off"],
    )
    rate = base * window(w, np.sign(base), device.window_kind, device.window_p)
    return rate * np.where(x > 0, D, 1.0)


def expected_drift_rate(dist: InputDistribution, device: DeviceParams, cfg: PulseConfig,
                        w=0.5, row: int = 0, cell: dict | None = None):
    """Average drift rate over the input distribution after cfg's inversion.

    With per-device ``cell`` arrays the result has one entry per device.
    """
    mixed = dist.mixture(cfg.inversion_fraction) if cfg.inversion_fraction else dist
    total = 0.0
    for x, p in zip(mixed.support, mixed.pdf):
        if p == 0.0 or x == 0.0:
            continue
        total = total + p * drift_rate_per_input(x, device, cfg, w, row, cell)
    if cell is None:
        return float(total)
    shape = np.broadcast_shapes(*(np.shape(a) for a in cell.values()))
    return np.broadcast_to(total, shape).copy()
