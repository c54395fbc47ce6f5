"""End-to-end runs on a workload: optimise pulse configs, benchmark trajectories."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .aidx import DriftObjective, LayerReport, aidx_preprocess, aidx_preprocess_layer
from .device import DeviceParams, conductance, integrate_array, state_for_conductance
from .network import TrajectoryMetrics, map_network, run_trajectory
from .signal import RATIO_BOUNDS, PulseConfig, encode_input
from .workloads import Workload

log = logging.getLogger(__name__)

DEFAULT_OPT_SEEDS = (1000, 1001, 1002, 1003, 1004)


@dataclass
class OptimizeSettings:
    mode: str = "aidx-a"
    lambda1: float = 0.0
    lambda2: float = 0.0
    horizon_k: int = 500
    trial_seeds: tuple = DEFAULT_OPT_SEEDS
    tol: float = 1e-6
    max_iter: int = 100
    method: str = "aggregate"
    ratio_min: float = RATIO_BOUNDS[0]
    ratio_max: float = RATIO_BOUNDS[1]
    stream_seed: int = 0
    variation: float = 0.15
    variation_mode: str = "natural"

    def __post_init__(self):
        if self.mode not in ("aidx-a", "aidx-p"):
            raise ValueError("mode must be 'aidx-a' or 'aidx-p'")
        if self.mode == "aidx-a" and (self.lambda1 or self.lambda2):
            raise ValueError("aidx-a runs without regularisation; use mode aidx-p for nonzero lambdas")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation constants must be >= 0")
        if self.ratio_min <= 0 or self.ratio_max < self.ratio_min:
            raise ValueError("need 0 < ratio_min <= ratio_max")


def program_kwargs(workload: Workload, variation: float = 0.15, variation_mode: str = "natural") -> dict:
    kw = dict(workload.programming)
    kw.setdefault("variation", variation)
    kw.setdefault("variation_mode", variation_mode)
    return kw


def identity_configs(workload: Workload, ratio_min: float = RATIO_BOUNDS[0], ratio_max: float = RATIO_BOUNDS[1]) -> list[PulseConfig]:
    return [PulseConfig.identity(s.weights.shape[0] + 1, base_amplitude=workload.base_amplitude,
                                 base_width=workload.base_width, ratio_min=ratio_min, ratio_max=ratio_max)
            for s in workload.specs]


def layer_objectives(workload: Workload, params: DeviceParams, settings: OptimizeSettings) -> list[DriftObjective]:
    """One E_Drift objective per layer, fed with that layer's normalised inputs."""
    if any(s.kind != "dense" for s in workload.specs):
        raise ValueError("pulse optimisation supports dense layers only")
    kw = program_kwargs(workload, settings.variation, settings.variation_mode)
    objs = []
    for spec, X in zip(workload.specs, workload.layer_samples()):
        objs.append(DriftObjective(
            params, spec.augmented(), X, horizon_k=settings.horizon_k, trial_seeds=settings.trial_seeds,
            bias_row_index=-1, lambda1=settings.lambda1, lambda2=settings.lambda2,
            stream_seed=settings.stream_seed, program_kwargs=kw,
            base_amplitude=workload.base_amplitude, base_width=workload.base_width,
            method=settings.method))
    return objs


def optimize_workload(workload: Workload, params: DeviceParams, settings: OptimizeSettings | None = None,
                      seed: int = 0) -> tuple[list[PulseConfig], list[LayerReport]]:
    settings = settings or OptimizeSettings()
    objs = layer_objectives(workload, params, settings)
    cfgs0 = identity_configs(workload, settings.ratio_min, settings.ratio_max)
    return aidx_preprocess(objs, cfgs0, tol=settings.tol, max_iter=settings.max_iter,
                           inversion_seed=seed, method=settings.method)


@dataclass
class BenchmarkResult:
    baseline: TrajectoryMetrics
    aidx: TrajectoryMetrics
    heatmaps: dict = field(default_factory=dict)

    @property
    def lifetime_ratio(self) -> float:
        return self.aidx.lifetime_or_horizon() / max(self.baseline.lifetime_or_horizon(), 1)


def benchmark(workload: Workload, params: DeviceParams, cfgs: list[PulseConfig], *, total_ops: int = 10_000,
              checkpoint_every: int = 500, seeds=tuple(range(20)), lifetime_fraction: float = 0.7,
              variation: float = 0.15, variation_mode: str = "natural",
              keep_states: bool = False) -> BenchmarkResult:
    """Paired baseline (identity pulses) and optimised trajectories on identical devices and streams."""
    kw = program_kwargs(workload, variation, variation_mode)
    common = dict(total_ops=total_ops, checkpoint_every=checkpoint_every, seeds=tuple(seeds),
                  metric=workload.metric, lifetime_fraction=lifetime_fraction, program_kwargs=kw,
                  keep_states=keep_states)
    base_cfgs = identity_configs(workload, cfgs[0].ratio_min, cfgs[0].ratio_max)
    base = run_trajectory(workload.specs, params, workload.stream_inputs, workload.eval_inputs,
                          workload.eval_targets, base_cfgs, **common)
    opt = run_trajectory(workload.specs, params, workload.stream_inputs, workload.eval_inputs,
                         workload.eval_targets, cfgs, **common)
    result = BenchmarkResult(base, opt)
    if keep_states and len(seeds):
        # conductance change per cell of the first seed's crossbars, per layer
        ref = map_network(workload.specs, params, int(tuple(seeds)[0]), **kw)
        for name, tm in (("baseline", base), ("aidx", opt)):
            result.heatmaps[name] = [layer.crossbar.conductance(w) - layer.crossbar.conductance()
                                     for layer, w in zip(ref, tm.final_states[0])]
    return result


def drift_demo(params: DeviceParams, *, n_pulses: int = 10_000, g0: float = 0.0052,
               base_amplitude: float = 0.3, base_width: float = 1e3, skews=(0.75, 0.25),
               checkpoint_every: int = 100, seed: int = 0
               ) -> tuple[np.ndarray, dict[str, np.ndarray], list[PulseConfig]]:
    """Single devices read by pre-generated random pulse sequences, with and without AIDX.

    Every device starts at conductance ``g0``. Device ``i`` sees inputs that
    are positive with probability ``skews[i]``, with magnitudes uniform on
    [0.2, 1]. Each device gets its own AIDX config, optimised for a single
    weight fed by its own sequence. Returns checkpoint op counts, the
    conductance traces per configuration (shape devices x checkpoints) and
    the tuned configs.
    """
    skews = tuple(float(s) for s in skews)
    if not skews or any(not 0.0 <= s <= 1.0 for s in skews):
        raise ValueError("skews must be a nonempty list of probabilities in [0, 1]")
    if n_pulses < checkpoint_every or checkpoint_every < 1:
        raise ValueError("need n_pulses >= checkpoint_every >= 1")
    w0 = float(state_for_conductance(g0, params))
    ops = np.arange(0, n_pulses + 1, checkpoint_every)
    out = {"baseline": np.empty((len(skews), ops.size)), "aidx": np.empty((len(skews), ops.size))}
    tuned_cfgs = []
    for i, skew in enumerate(skews):
        rng = np.random.default_rng([seed, 3, i])
        x = np.where(rng.random(n_pulses) < skew, 1.0, -1.0) * rng.uniform(0.2, 1.0, n_pulses)
        obj = DriftObjective(params, [[1.0]], x[:, None], horizon_k=n_pulses, trial_seeds=(seed,),
                             program_kwargs={"variation": 0.0}, base_amplitude=base_amplitude,
                             base_width=base_width, method="aggregate", streams=[np.arange(n_pulses)])
        identity = obj.identity_config()
        tuned, _ = aidx_preprocess_layer(obj, identity, inversion_seed=seed, method="aggregate")
        tuned_cfgs.append(tuned)
        for name, cfg in (("baseline", identity), ("aidx", tuned)):
            w = w0
            out[name][i, 0] = float(conductance(w, params))
            c = 1
            for k in range(n_pulses):
                p = encode_input(x[k:k + 1], cfg, cfg.is_inverted(k), read_limit=params.read_limit)
                w = float(integrate_array(w, p.voltage[0], p.width[0], params))
                if k + 1 == ops[c]:
                    out[name][i, c] = float(conductance(w, params))
                    c += 1
    return ops, out, tuned_cfgs
