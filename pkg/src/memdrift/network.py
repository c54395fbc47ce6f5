"""Small neural networks on drifting crossbars.

Each layer's weights (plus a bias row) live on one crossbar. Layer inputs
are normalised by a fixed per-layer scale so that every read pulse stays
within |x| <= 1; decoded outputs are scaled back before the activation.
Convolutions are lowered to dense crossbars with im2col, one read per patch.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crossbar import CrossbarArray, DifferentialWeightMap, program_weights, vmm_read
from .device import DeviceParams
from .signal import PulseConfig, encode_input

ACTIVATIONS = {
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
    "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
}


@dataclass
class DenseSpec:
    """Software description of one layer: y = act(x @ weights + bias)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    input_scale: float = 1.0
    kind: str = "dense"
    conv_shape: tuple[int, int, int] | None = None  # (channels, height, width) for kind="conv"
    kernel: int = 1

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=float))
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError("bias length must equal the number of outputs")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    def augmented(self) -> np.ndarray:
        """Crossbar weight matrix: weights over a bias row, in normalised-input units."""
        return np.vstack([self.weights, self.bias[None, :] / self.input_scale])


@dataclass
class LayerMapping:
    layer_index: int
    spec: DenseSpec
    crossbar: CrossbarArray

    @property
    def kind(self) -> str:
        return "conv-as-dense" if self.spec.kind == "conv" else "dense"

    @property
    def activation(self) -> str:
        return self.spec.activation

    @property
    def rows(self) -> int:
        return self.crossbar.rows


def im2col(x: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    """Valid, stride-1 patches of a (C, H, W) input as rows of length C*k*k."""
    c, h, w = shape
    img = np.asarray(x, dtype=float).reshape(c, h, w)
    cols = [img[:, i:i + k, j:j + k].ravel() for i in range(h - k + 1) for j in range(w - k + 1)]
    return np.array(cols)


def software_forward(specs: Sequence[DenseSpec], X) -> np.ndarray:
    """Floating-point reference forward pass over a batch."""
    return _forward_batch(specs, [s.weights for s in specs], [s.bias for s in specs], X)[-1]


def _forward_batch(specs, weights, biases, X, keep_pre=False):
    h = np.atleast_2d(np.asarray(X, dtype=float))
    outs, pres = [], []
    for spec, W, b in zip(specs, weights, biases):
        if spec.kind == "conv":
            z = np.array([(im2col(row, spec.conv_shape, spec.kernel) @ W + b).T.ravel() for row in h])
        else:
            z = h @ W + b
        pres.append(z)
        h = ACTIVATIONS[spec.activation](z)
        outs.append(h)
    return (outs, pres) if keep_pre else outs


def layer_inputs(specs: Sequence[DenseSpec], X) -> list[np.ndarray]:
    """Normalised crossbar inputs (bias column appended) of every layer on a batch.

    Convolution layers contribute one row per patch.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    acts = [X] + software_forward_all(specs, X)[:-1]
    out = []
    for spec, h in zip(specs, acts):
        if spec.kind == "conv":
            h = np.vstack([im2col(r, spec.conv_shape, spec.kernel) for r in h])
        x = np.clip(h / spec.input_scale, -1.0, 1.0)
        out.append(np.hstack([x, np.ones((x.shape[0], 1))]))
    return out


def software_forward_all(specs, X) -> list[np.ndarray]:
    return _forward_batch(specs, [s.weights for s in specs], [s.bias for s in specs], X)


def map_network(specs: Sequence[DenseSpec], params: DeviceParams, seed: int = 0,
                **program_kwargs) -> list[LayerMapping]:
    """Program every layer onto its own variation-sampled crossbar."""
    net = []
    for i, spec in enumerate(specs):
        rng_seed = np.random.SeedSequence([seed, i]).generate_state(1)[0]
        wmap = DifferentialWeightMap(spec.augmented(), bias_row_index=-1)
        net.append(LayerMapping(i, spec, program_weights(wmap, params, int(rng_seed), **program_kwargs)))
    return net


def _read_layer(layer: LayerMapping, x_aug: np.ndarray, cfg: PulseConfig, inverted: bool) -> np.ndarray:
    p = encode_input(x_aug, cfg, inverted, layer.crossbar.params.read_limit)
    res = vmm_read(layer.crossbar, p.voltage, p.width, v_ref=cfg.base_amplitude, row_gain=p.gain)
    return -res.decoded if inverted else res.decoded


def forward_inference(net: Sequence[LayerMapping], x, cfgs: Sequence[PulseConfig],
                      sample_index: int | None = None) -> np.ndarray:
    """One drifting inference of a single input vector.

    Each layer encodes its normalised input with its own PulseConfig, reads
    the crossbar (which drifts), undoes any inversion and applies the
    activation. ``sample_index`` selects the inversion-mask entry.
    """
    if len(cfgs) != len(net):
        raise ValueError(f"need {len(net)} pulse configs, got {len(cfgs)}")
    h = np.asarray(x, dtype=float).ravel()
    for layer, cfg in zip(net, cfgs):
        spec = layer.spec
        inverted = sample_index is not None and cfg.is_inverted(sample_index)
        if spec.kind == "conv":
            patches = im2col(h, spec.conv_shape, spec.kernel)
            z = []
            for patch in patches:
                xa = np.append(np.clip(patch / spec.input_scale, -1, 1), 1.0)
                z.append(_read_layer(layer, xa, cfg, inverted))
            z = np.array(z).T.ravel() * spec.input_scale
        else:
            if h.size + 1 != layer.rows:
                raise ValueError(f"layer {layer.layer_index} expects {layer.rows - 1} inputs, got {h.size}")
            xa = np.append(np.clip(h / spec.input_scale, -1.0, 1.0), 1.0)
            z = _read_layer(layer, xa, cfg, inverted) * spec.input_scale
        h = ACTIVATIONS[spec.activation](z)
    return h


def evaluate(net: Sequence[LayerMapping], X, weights=None) -> np.ndarray:
    """Batch outputs at the crossbars' current state, without causing drift."""
    specs = [layer.spec for layer in net]
    if weights is None:
        weights = [layer.crossbar.decode_weights() for layer in net]
    Ws, bs = [], []
    for spec, Wd in zip(specs, weights):
        Ws.append(Wd[:-1])
        bs.append(Wd[-1] * spec.input_scale)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    h = X
    for spec, W, b in zip(specs, Ws, bs):
        if spec.kind == "conv":
            z = np.array([(np.clip(im2col(r, spec.conv_shape, spec.kernel) / spec.input_scale, -1, 1) @ W
                           * spec.input_scale + b).T.ravel() for r in h])
        else:
            z = np.clip(h / spec.input_scale, -1.0, 1.0) @ W * spec.input_scale + b
        h = ACTIVATIONS[spec.activation](z)
    return h


def layer_error_estimate(net: Sequence[LayerMapping], drift_snapshots, inputs) -> list[np.ndarray]:
    """Propagate drift-induced output error through the layers.

    ``drift_snapshots`` holds, per layer, the drifted crossbar state ``w``.
    The error of layer l+1 combines the weight drift seen by that layer's
    ideal input with the previous layer's error passed through its
    activation::

        E[l+1] = x[l+1] @ dW[l+1] + e[l] @ (W[l+1] + dW[l+1]),
        e[l]   = act(z[l] + E[l]) - act(z[l])

    Returns one (samples, outputs) array per layer; for dense networks the
    last entry equals drifted-minus-ideal pre-activations exactly.
    """
    specs = [layer.spec for layer in net]
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(drift_snapshots) != len(net):
        raise ValueError("need one drift snapshot per layer")
    errors = []
    h = X
    prev_err = None
    prev_z = None
    prev_act = None
    for layer, spec, w_drift in zip(net, specs, drift_snapshots):
        W0 = layer.crossbar.decode_weights()
        W1 = layer.crossbar.decode_weights(np.asarray(w_drift))
        dW = W1 - W0
        x = np.hstack([np.clip(h / spec.input_scale, -1, 1), np.ones((h.shape[0], 1))])
        E = (x @ dW) * spec.input_scale
        if prev_err is not None:
            e = ACTIVATIONS[prev_act](prev_z + prev_err) - ACTIVATIONS[prev_act](prev_z)
            E = E + (e / spec.input_scale) @ W1[:-1] * spec.input_scale
        z = x @ W0 * spec.input_scale
        errors.append(E)
        prev_err, prev_z, prev_act = E, z, spec.activation
        h = ACTIVATIONS[spec.activation](z)
    return errors


@dataclass
class TrajectoryMetrics:
    """Metric versus inference count, averaged over seeds.

    ``per_seed`` has shape (seeds, checkpoints). ``lifetime_ops`` is the
    first checkpoint at which the seed-averaged accuracy falls below the
    threshold, or ``None`` when it never does within the run.
    """

    ops: np.ndarray
    metric: str
    per_seed: np.ndarray
    seeds: list[int]
    threshold: float | None = None
    lifetime_ops: int | None = None
    final_states: list[list[np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def series(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    @property
    def accuracy_series(self) -> np.ndarray | None:
        return self.series if self.metric == "accuracy" else None

    @property
    def mse_series(self) -> np.ndarray | None:
        return self.series if self.metric == "mse" else None

    def lifetime_or_horizon(self) -> int:
        return int(self.ops[-1]) if self.lifetime_ops is None else self.lifetime_ops

    def to_csv(self, label: str = "", comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["op_count", "metric", "seed", "value"] + (["config"] if label else []))
        for si, seed in enumerate(self.seeds):
            for k, v in zip(self.ops, self.per_seed[si]):
                writer.writerow([int(k), self.metric, seed, f"{v:.12g}"] + ([label] if label else []))
        return buf.getvalue()


def _metric(outputs: np.ndarray, targets: np.ndarray, metric: str) -> float:
    if metric == "accuracy":
        return float(np.mean(np.argmax(outputs, axis=1) == targets))
    return float(np.mean((outputs - targets) ** 2))


def lifetime(ops, series, threshold: float) -> int | None:
    below = np.flatnonzero(np.asarray(series) < threshold)
    return int(np.asarray(ops)[below[0]]) if below.size else None


def run_trajectory(specs: Sequence[DenseSpec], params: DeviceParams, stream_pool, eval_inputs,
                   eval_targets, cfgs: Sequence[PulseConfig], *, total_ops: int = 10_000,
                   checkpoint_every: int = 500, seeds: Sequence[int] = tuple(range(20)),
                   metric: str = "accuracy", lifetime_fraction: float | None = 0.7,
                   lifetime_threshold: float | None = None, program_kwargs: dict | None = None,
                   keep_states: bool = False) -> TrajectoryMetrics:
    """Replay ``total_ops`` drifting inferences per seed and checkpoint a metric.

    Every seed programs fresh crossbars (device variation) and draws its own
    stream of samples from ``stream_pool``. Checkpoints evaluate the held-out
    set on the current conductances without issuing drifting reads.
    ``lifetime_fraction`` sets the lifetime threshold relative to the initial
    seed-averaged accuracy; ``lifetime_threshold`` sets it absolutely.
    """
    if checkpoint_every < 1 or total_ops < checkpoint_every:
        raise ValueError("need total_ops >= checkpoint_every >= 1")
    pool = np.atleast_2d(np.asarray(stream_pool, dtype=float))
    if pool.shape[0] == 0:
        raise ValueError("empty workload stream")
    if metric not in ("accuracy", "mse"):
        raise ValueError("metric must be 'accuracy' or 'mse'")
    ops = np.arange(0, total_ops + 1, checkpoint_every)
    per_seed = np.empty((len(seeds), ops.size))
    states = []
    kw = program_kwargs or {}
    for si, seed in enumerate(seeds):
        net = map_network(specs, params, seed, **kw)
        stream = np.random.default_rng([seed, 7]).integers(pool.shape[0], size=total_ops)
        per_seed[si, 0] = _metric(evaluate(net, eval_inputs), eval_targets, metric)
        c = 1
        for k, s in enumerate(stream, start=1):
            forward_inference(net, pool[s], cfgs, int(s))
            if k == ops[c]:
                per_seed[si, c] = _metric(evaluate(net, eval_inputs), eval_targets, metric)
                c += 1
        if keep_states:
            states.append([layer.crossbar.w.copy() for layer in net])
    tm = TrajectoryMetrics(ops, metric, per_seed, list(seeds), final_states=states)
    if metric == "accuracy":
        thr = lifetime_threshold
        if thr is None and lifetime_fraction is not None:
            thr = lifetime_fraction * tm.series[0]
        if thr is not None:
            tm.threshold = thr
            tm.lifetime_ops = lifetime(ops, tm.series, thr)
    return tm
