"""Desk-scale tasks, off-line training and workload files.

A workload bundles trained layer weights with the input pool that the
inference stream draws from, a held-out evaluation set, the read-pulse base
settings and the crossbar programming range. On disk it is a JSON manifest
next to CSV files: one per layer (row-major weights, final row = bias) plus
input and target matrices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import DeviceParams
from .network import DenseSpec, layer_inputs, software_forward, software_forward_all

TASKS = ("classification", "reconstruction")


@dataclass
class Workload:
    name: str
    task: str
    specs: list[DenseSpec]
    stream_inputs: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    base_amplitude: float = 0.3
    base_width: float = 200e-9
    programming: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        self.stream_inputs = np.atleast_2d(np.asarray(self.stream_inputs, dtype=float))
        self.eval_inputs = np.atleast_2d(np.asarray(self.eval_inputs, dtype=float))
        self.eval_targets = np.asarray(self.eval_targets)
        if self.stream_inputs.shape[0] == 0:
            raise ValueError("empty workload stream")
        n_in = self.specs[0].weights.shape[0] if self.specs[0].kind == "dense" else int(
            np.prod(self.specs[0].conv_shape))
        for X in (self.stream_inputs, self.eval_inputs):
            if X.shape[1] != n_in:
                raise ValueError(f"inputs have {X.shape[1]} features, first layer expects {n_in}")

    @property
    def metric(self) -> str:
        return "accuracy" if self.task == "classification" else "mse"

    def software_metric(self) -> float:
        out = software_forward(self.specs, self.eval_inputs)
        if self.task == "classification":
            return float(np.mean(np.argmax(out, axis=1) == self.eval_targets))
        return float(np.mean((out - self.eval_targets) ** 2))

    def layer_samples(self) -> list[np.ndarray]:
        """Normalised crossbar inputs of every layer over the stream pool."""
        return layer_inputs(self.specs, self.stream_inputs)

    # -- files -----------------------------------------------------------

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        layers = []
        for i, s in enumerate(self.specs):
            fname = f"layer{i}.csv"
            write_matrix(d / fname, np.vstack([s.weights, s.bias[None, :]]))
            entry = {"weights": fname, "activation": s.activation, "kind": s.kind,
                     "input_scale": s.input_scale}
            if s.kind == "conv":
                entry["conv_shape"] = list(s.conv_shape)
                entry["kernel"] = s.kernel
            layers.append(entry)
        write_matrix(d / "stream_inputs.csv", self.stream_inputs)
        write_matrix(d / "eval_inputs.csv", self.eval_inputs)
        targets = self.eval_targets if self.eval_targets.ndim == 2 else self.eval_targets[:, None]
        write_matrix(d / "eval_targets.csv", targets)
        manifest = {
            "name": self.name,
            "task": self.task,
            "layers": layers,
            "stream_inputs": "stream_inputs.csv",
            "eval_inputs": "eval_inputs.csv",
            "eval_targets": "eval_targets.csv",
            "pulse": {"base_amplitude_v": self.base_amplitude, "base_width_s": self.base_width},
            "programming": self.programming,
        }
        path = d / "workload.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, manifest_path) -> "Workload":
        path = Path(manifest_path)
        m = json.loads(path.read_text())
        root = path.parent
        for key in ("name", "task", "layers", "stream_inputs", "eval_inputs", "eval_targets"):
            if key not in m:
                raise ValueError(f"workload manifest lacks {key!r}")
        specs = []
        for entry in m["layers"]:
            M = read_matrix(root / entry["weights"])
            kw = {}
            if entry.get("kind", "dense") == "conv":
                kw = {"kind": "conv", "conv_shape": tuple(entry["conv_shape"]), "kernel": int(entry["kernel"])}
            specs.append(DenseSpec(M[:-1], M[-1], entry.get("activation", "identity"),
                                   float(entry.get("input_scale", 1.0)), **kw))
        targets = read_matrix(root / m["eval_targets"])
        if m["task"] == "classification":
            targets = targets[:, 0].astype(int)
        pulse = m.get("pulse", {})
        return cls(m["name"], m["task"], specs, read_matrix(root / m["stream_inputs"]),
                   read_matrix(root / m["eval_inputs"]), targets,
                   float(pulse.get("base_amplitude_v", 0.3)), float(pulse.get("base_width_s", 200e-9)),
                   dict(m.get("programming", {})))


def write_matrix(path, M) -> None:
    M = np.atleast_2d(M)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"c{j}" for j in range(M.shape[1])])
        for row in M:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix(path) -> np.ndarray:
    """Numeric CSV with an optional header row; '#' lines are comments."""
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise ValueError(f"{path}: non-numeric value on line {i + 1}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    M = np.array(rows)
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{path}: non-finite values")
    return M


def read_proben1(path, n_inputs: int) -> tuple[np.ndarray, np.ndarray]:
    """Proben1-style CSV: ``n_inputs`` feature columns followed by one-hot outputs.

    Returns (features, class labels).
    """
    M = read_matrix(path)
    if M.shape[1] <= n_inputs:
        raise ValueError("no output columns after the inputs")
    return M[:, :n_inputs], np.argmax(M[:, n_inputs:], axis=1)


# -- synthetic data ------------------------------------------------------------

def gaussian_blobs(n: int, seed=0, size: int = 8, sigma: float = 1.3,
                   noise: float = 0.08) -> tuple[np.ndarray, np.ndarray]:
    """Two-class images: a Gaussian spot near one of two diagonal anchors."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(2, size=n)
    anchors = np.array([[2.2, 2.2], [4.8, 4.8]]) * (size / 8)
    centres = anchors[labels] + rng.normal(0.0, 0.9 * size / 8, size=(n, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2
    img = np.exp(-d2 / (2 * sigma**2)) + rng.normal(0.0, noise, size=(n, size, size))
    return np.clip(img, 0.0, 1.0).reshape(n, -1), labels


def digits_8x8() -> np.ndarray:
    """Handwritten 8x8 digit images scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    return load_digits().data / 16.0


# -- training ------------------------------------------------------------------

def _init(sizes, rng):
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        Ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        bs.append(np.zeros(b))
    return Ws, bs


def train_mlp(X, y, sizes, activations, *, task="classification", epochs=200, lr=0.01,
              batch=32, seed=0, weight_decay=1e-4) -> list[DenseSpec]:
    """Adam on softmax cross-entropy (classification) or MSE (reconstruction).

    Returns dense layer specs whose input scales are the largest activation
    each layer sees on ``X``.
    """
    rng = np.random.default_rng(seed)
    X = np.asarray(X, dtype=float)
    Ws, bs = _init(sizes, rng)
    params = Ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    n = X.shape[0]
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(n), max(1, n // batch)):
            xb = X[idx]
            hs = [xb]
            zs = []
            for W, b, act in zip(Ws, bs, activations):
                z = hs[-1] @ W + b
                zs.append(z)
                hs.append(_act(act, z))
            if task == "classification":
                e = np.exp(zs[-1] - zs[-1].max(axis=1, keepdims=True))
                p = e / e.sum(axis=1, keepdims=True)
                p[np.arange(len(idx)), y[idx]] -= 1.0
                delta = p / len(idx)
            else:
                delta = 2.0 * (hs[-1] - y[idx]) / y[idx].size * _dact(activations[-1], zs[-1], hs[-1])
            grads_W, grads_b = [None] * len(Ws), [None] * len(Ws)
            for li in range(len(Ws) - 1, -1, -1):
                grads_W[li] = hs[li].T @ delta + weight_decay * Ws[li]
                grads_b[li] = delta.sum(axis=0)
                if li:
                    delta = (delta @ Ws[li].T) * _dact(activations[li - 1], zs[li - 1], hs[li])
            t += 1
            for i, g in enumerate(grads_W + grads_b):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                step = lr * (m[i] / (1 - 0.9**t)) / (np.sqrt(v[i] / (1 - 0.999**t)) + 1e-8)
                params[i] -= step
    specs = [DenseSpec(W, b, a) for W, b, a in zip(Ws, bs, activations)]
    return with_input_scales(specs, X)


def with_input_scales(specs: list[DenseSpec], X) -> list[DenseSpec]:
    """Set each layer's input scale to the largest |activation| it receives on X."""
    acts = [np.atleast_2d(X)] + software_forward_all(specs, X)[:-1]
    return [DenseSpec(s.weights, s.bias, s.activation, max(float(np.max(np.abs(h))), 1e-12),
                      s.kind, s.conv_shape, s.kernel) for s, h in zip(specs, acts)]


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _dact(name, z, h):
    if name == "relu":
        return (z > 0).astype(float)
    if name == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(z)


# -- bundled workloads ---------------------------------------------------------

DEFAULT_PROGRAMMING = {"g_min": 2e-4, "g_max": 0.0052}
# Reads at 0.3 V leave room to stretch amplitudes 2x below threshold. The
# base width is accelerated far beyond a real read pulse so that 10^4
# simulated reads accumulate the drift of a much longer deployment.
DEFAULT_BASE_AMPLITUDE = 0.3
DEFAULT_BASE_WIDTH = 1e7


def blob_classifier(hidden=(16,), seed: int = 0, n_train: int = 1000, n_eval: int = 400,
                    base_amplitude: float = DEFAULT_BASE_AMPLITUDE, base_width: float = DEFAULT_BASE_WIDTH) -> Workload:
    """Two-class 8x8 blob task on a 64-hidden...-2 ReLU MLP."""
    Xtr, ytr = gaussian_blobs(n_train, seed=[seed, 1])
    Xev, yev = gaussian_blobs(n_eval, seed=[seed, 2])
    sizes = [64, *hidden, 2]
    acts = ["relu"] * len(hidden) + ["identity"]
    specs = train_mlp(Xtr, ytr, sizes, acts, epochs=60, lr=0.01, seed=seed)
    name = "blob-mlp-" + "-".join(str(s) for s in sizes)
    return Workload(name, "classification", specs, Xtr, Xev, yev, base_amplitude, base_width,
                    dict(DEFAULT_PROGRAMMING))


def digit_autoencoder(hidden: int = 16, seed: int = 0, base_amplitude: float = DEFAULT_BASE_AMPLITUDE,
                      base_width: float = DEFAULT_BASE_WIDTH) -> Workload:
    """64-16-64 autoencoder reconstructing 8x8 digits."""
    X = digits_8x8()
    order = np.random.default_rng(seed).permutation(len(X))
    Xtr, Xev = X[order[:1400]], X[order[1400:1800]]
    specs = train_mlp(Xtr, Xtr, [64, hidden, 64], ["relu", "sigmoid"], task="reconstruction",
                      epochs=80, lr=0.005, seed=seed)
    return Workload(f"digits-ae-64-{hidden}-64", "reconstruction", specs, Xtr, Xev, Xev,
                    base_amplitude, base_width, dict(DEFAULT_PROGRAMMING))
