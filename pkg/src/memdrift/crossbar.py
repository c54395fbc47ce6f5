"""1T1R crossbar performing analog vector-matrix multiplication.

Signed weights use differential pairs: logical column ``j`` occupies physical
columns ``2j`` (positive device) and ``2j + 1`` (negative device). Every read
samples the column currents at the programmed-plus-drifted conductances and
then lets each device integrate its own read pulse, which is where the
sub-threshold drift accumulates.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .device import (
    VARIED_FIELDS,
    DeviceParams,
    conductance,
    integrate_array,
    sample_variation_array,
    state_for_conductance,
)


@dataclass
class DifferentialWeightMap:
    """Signed weight matrix of shape (inputs, outputs) and its pair layout.

    If ``bias_row_index`` is set, that row carries bias weights and is
    programmed near the high-conductance end of the range.
    """

    weight_matrix: np.ndarray
    bias_row_index: int | None = None

    def __post_init__(self):
        self.weight_matrix = np.atleast_2d(np.asarray(self.weight_matrix, dtype=float))
        rows = self.weight_matrix.shape[0]
        if self.bias_row_index is not None and not (-rows <= self.bias_row_index < rows):
            raise ValueError("bias_row_index out of range")
        if self.bias_row_index is not None:
            self.bias_row_index %= rows

    @property
    def n_logical(self) -> int:
        return self.weight_matrix.shape[1]

    @property
    def pos_columns(self) -> np.ndarray:
        return 2 * np.arange(self.n_logical)

    @property
    def neg_columns(self) -> np.ndarray:
        return 2 * np.arange(self.n_logical) + 1


@dataclass
class VmmResult:
    currents: np.ndarray
    decoded: np.ndarray


class CrossbarArray:
    """Grid of device states plus the bookkeeping needed to decode weights.

    ``w`` holds the internal state of every cell and ``cell`` the per-cell
    (variation-sampled) rate parameters. ``weight_per_siemens`` converts a
    conductance difference back to a logical weight.
    """

    def __init__(self, w, params: DeviceParams, cell: dict[str, np.ndarray] | None = None,
                 g_min: float | None = None, g_max: float | None = None,
                 line_resistance: float = 0.0, weight_per_siemens: float = 1.0,
                 bias_row_index: int | None = None):
        self.w = np.atleast_2d(np.asarray(w, dtype=float)).copy()
        if self.w.shape[0] < 1 or self.w.shape[1] < 1:
            raise ValueError("crossbar needs at least one row and one column")
        if np.any((self.w < 0) | (self.w > 1)):
            raise ValueError("cell states must lie in [0, 1]")
        if line_resistance < 0:
            raise ValueError("line_resistance must be >= 0")
        self.params = params
        if cell is None:
            cell = {n: np.full(self.w.shape, getattr(params, n)) for n in VARIED_FIELDS}
        self.cell = {n: np.broadcast_to(np.asarray(cell[n], dtype=float), self.w.shape).copy()
                     for n in VARIED_FIELDS}
        self.g_min = params.g_min if g_min is None else float(g_min)
        self.g_max = params.g_max if g_max is None else float(g_max)
        if not (params.g_min * (1 - 1e-12) <= self.g_min < self.g_max <= params.g_max * (1 + 1e-12)):
            raise ValueError("programming range must lie inside [1/r_off, 1/r_on]")
        self.line_resistance = float(line_resistance)
        self.weight_per_siemens = float(weight_per_siemens)
        self.bias_row_index = bias_row_index
        self.read_count = 0

    @property
    def rows(self) -> int:
        return self.w.shape[0]

    @property
    def cols(self) -> int:
        return self.w.shape[1]

    @property
    def n_logical(self) -> int:
        return self.cols // 2

    def conductance(self, w=None) -> np.ndarray:
        return conductance(self.w if w is None else w, self.params)

    def _distance(self) -> np.ndarray:
        i = np.arange(1, self.rows + 1)[:, None]
        j = np.arange(1, self.cols + 1)[None, :]
        return (i + j).astype(float)

    def effective_conductance(self, w=None) -> np.ndarray:
        """Conductance seen by the periphery, with first-order wire IR drop."""
        g = self.conductance(w)
        if self.line_resistance == 0.0:
            return g
        return g / (1.0 + g * self.line_resistance * self._distance())

    def decode_weights(self, w=None) -> np.ndarray:
        """Logical weights stored (in ``w``, default the current state), (G+ - G-) in weight units."""
        g = self.effective_conductance(w)
        return (g[:, 0::2] - g[:, 1::2]) * self.weight_per_siemens

    def copy(self) -> "CrossbarArray":
        return copy.deepcopy(self)

    def apply_pulses(self, voltages, widths) -> None:
        """Integrate every cell's state under its row's read pulse."""
        v = np.asarray(voltages, dtype=float)
        t = np.asarray(widths, dtype=float)
        if not np.any(v):
            return
        # idle rows (v = 0) see a zero rate, so their width is irrelevant
        t = np.where(v != 0.0, t, 1.0)
        self.w = integrate_array(self.w, v[:, None], t[:, None], self.params, self.cell)

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "w": self.w.tolist(),
            "params": self.params.to_dict(),
            "cell": {n: a.tolist() for n, a in self.cell.items()},
            "g_min": self.g_min,
            "g_max": self.g_max,
            "line_resistance": self.line_resistance,
            "weight_per_siemens": self.weight_per_siemens,
            "bias_row_index": self.bias_row_index,
            "read_count": self.read_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CrossbarArray":
        xbar = cls(
            data["w"], DeviceParams.from_dict(data["params"]),
            {n: np.asarray(a) for n, a in data["cell"].items()},
            data["g_min"], data["g_max"], data["line_resistance"],
            data["weight_per_siemens"], data["bias_row_index"],
        )
        xbar.read_count = int(data.get("read_count", 0))
        return xbar

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CrossbarArray":
        return cls.from_dict(json.loads(Path(path).read_text()))


def program_weights(wmap: DifferentialWeightMap, params: DeviceParams, seed=None, *,
                    g_min: float | None = None, g_max: float | None = None,
                    weight_range: float | None = None, variation: float = 0.15,
                    variation_mode: str = "natural", line_resistance: float = 0.0) -> CrossbarArray:
    """Program a differential weight map onto a fresh crossbar.

    Weights map linearly so that ``weight_range`` (default ``max|W|``) spans
    ``g_max - g_min``. The unused device of each pair sits at ``g_min``; bias
    pairs sit at the top of the range instead. Per-cell rate parameters are
    drawn with :func:`sample_variation_array` from ``seed``.
    """
    W = wmap.weight_matrix
    g_lo = params.g_min if g_min is None else float(g_min)
    g_hi = params.g_max if g_max is None else float(g_max)
    span = g_hi - g_lo
    peak = float(np.max(np.abs(W))) if W.size else 0.0
    if weight_range is None:
        weight_range = peak if peak > 0 else 1.0
    elif peak > weight_range * (1 + 1e-12):
        raise ValueError(f"weight magnitude {peak:g} exceeds representable range {weight_range:g}")
    wps = weight_range / span

    pos = np.maximum(W, 0.0) / wps
    neg = np.maximum(-W, 0.0) / wps
    g = np.empty((W.shape[0], 2 * W.shape[1]))
    g[:, 0::2] = g_lo + pos
    g[:, 1::2] = g_lo + neg
    if wmap.bias_row_index is not None:
        b = wmap.bias_row_index
        g[b, 0::2] = g_hi - neg[b]
        g[b, 1::2] = g_hi - pos[b]
    g = np.clip(g, g_lo, g_hi)

    rng = np.random.default_rng(seed)
    cell = sample_variation_array(params, g.shape, rng, variation, variation_mode)
    return CrossbarArray(state_for_conductance(g, params), params, cell, g_lo, g_hi,
                         line_resistance, wps, wmap.bias_row_index)


def vmm_read(xbar: CrossbarArray, voltages, widths, *, v_ref: float = 1.0,
             row_gain=None) -> VmmResult:
    """One inference read: sample currents, then let the pulses drift the cells.

    ``decoded`` holds the logical outputs: each row's contribution is divided
    by ``row_gain`` (the periphery's compensation of a non-unit
    input-to-voltage mapping), pairs are subtracted and the result is scaled
    back to weight units per ``v_ref`` volts of logical input.
    """
    v = np.asarray(voltages, dtype=float)
    t = np.broadcast_to(np.asarray(widths, dtype=float), v.shape)
    if v.shape != (xbar.rows,):
        raise ValueError(f"expected {xbar.rows} row voltages, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite read voltage")
    limit = xbar.params.read_limit
    if np.any(np.abs(v) >= limit):
        raise ValueError(f"read voltage at or beyond the switching threshold ({limit} V)")
    if np.any(t[v != 0] <= 0):
        raise ValueError("pulse widths must be positive")

    g = xbar.effective_conductance()
    currents = v @ g
    logical_v = v if row_gain is None else v / np.asarray(row_gain, dtype=float)
    logical = logical_v @ g
    decoded = (logical[0::2] - logical[1::2]) * xbar.weight_per_siemens / v_ref

    xbar.apply_pulses(v, t)
    xbar.read_count += 1
    return VmmResult(currents, decoded)


def accumulated_drift(xbar: CrossbarArray, reference: CrossbarArray) -> np.ndarray:
    """Conductance change of every cell relative to ``reference``."""
    if xbar.w.shape != reference.w.shape:
        raise ValueError(f"shape mismatch {xbar.w.shape} vs {reference.w.shape}")
    return xbar.conductance() - reference.conductance()


def percent_change(xbar: CrossbarArray, reference: CrossbarArray) -> np.ndarray:
    return 100.0 * accumulated_drift(xbar, reference) / reference.conductance()


def heatmap_csv(matrix: np.ndarray, read_count: int, comment: str | None = None) -> str:
    """Row-major CSV of a drift heatmap with a shape/read-count header."""
    matrix = np.atleast_2d(matrix)
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(f"# rows={matrix.shape[0]},cols={matrix.shape[1]},reads={read_count}\n")
    buf.write(",".join(f"c{j}" for j in range(matrix.shape[1])) + "\n")
    for row in matrix:
        buf.write(",".join(f"{x:.9e}" for x in row) + "\n")
    return buf.getvalue()
