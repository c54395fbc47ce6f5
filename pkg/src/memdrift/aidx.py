"""Adaptive inference: tune read-pulse ratios and input inversion against drift.

The drift error of a configuration is measured by simulation: program the
layer's weights onto freshly variation-sampled crossbars, replay a stream of
inference reads encoded with the configuration, and compare the output MSE
after the stream with the MSE right after programming.

Preprocessing per layer runs three optimisation scenarios (amplitude ratios
alone, width ratios alone, both jointly), and falls back to inverting a
fraction of the inputs when the unconstrained optimum leaves the hardware
ratio bounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .crossbar import CrossbarArray, DifferentialWeightMap, program_weights
from .device import VARIED_FIELDS, DeviceParams, _rate_magnitude
from .optimizer import OptimizeResult, bfgs_minimize, golden_section
from .signal import InputDistribution, PulseConfig, encode_input, expected_drift_rate, invert_fraction

log = logging.getLogger(__name__)

#: Objective improvements below this are treated as ties and resolved toward A = D = 1.
TIE_TOLERANCE = 1e-12
#: Safety margin below the switching threshold for optimised amplitudes.
THRESHOLD_MARGIN = 0.999


class DriftObjective:
    """E_Drift of one crossbar layer as a function of its PulseConfig.

    Parameters
    ----------
    params : nominal device parameters; each trial seed draws its own per-cell variation.
    weights : (rows, outputs) logical weight matrix, bias row included.
    samples : (n, rows) normalised inputs |x| <= 1 that the inference stream draws from.
    horizon_k : number of simulated inference reads.
    trial_seeds : one programmed crossbar per seed; results are averaged.
    eval_samples : inputs on which output MSE is measured (default: ``samples``).
    lambda1, lambda2 : L2 penalties on the amplitude and width ratios.
    scale : E_Drift is divided by this before the penalties are added.
    streams : optional explicit read orders, one array of sample indices per
        trial seed; by default each trial draws ``horizon_k`` indices at random.
    """

    def __init__(self, params: DeviceParams, weights, samples, *, horizon_k: int = 500,
                 trial_seeds=(1000, 1001, 1002, 1003, 1004), bias_row_index: int | None = None,
                 eval_samples=None, lambda1: float = 0.0, lambda2: float = 0.0,
                 stream_seed: int = 0, program_kwargs: dict | None = None,
                 base_amplitude: float = 0.3, base_width: float = 200e-9,
                 scale: float = 1.0, method: str = "auto", streams=None):
        if horizon_k < 1:
            raise ValueError("horizon_k must be >= 1")
        if lambda1 < 0 or lambda2 < 0:
            raise ValueError("regularisation constants must be >= 0")
        self.params = params
        self.weights = np.atleast_2d(np.asarray(weights, dtype=float))
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if self.samples.shape[1] != self.weights.shape[0]:
            raise ValueError(
                f"samples have {self.samples.shape[1]} features but weights have {self.weights.shape[0]} rows")
        if np.any(np.abs(self.samples) > 1.0 + 1e-12):
            raise ValueError("samples must be normalised to |x| <= 1")
        self.eval_samples = self.samples if eval_samples is None else np.atleast_2d(eval_samples)
        self.horizon_k = int(horizon_k)
        self.trial_seeds = tuple(int(s) for s in trial_seeds)
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.base_amplitude = float(base_amplitude)
        self.base_width = float(base_width)
        self.scale = float(scale)
        self.method = method
        self.bias_row_index = bias_row_index
        kw = dict(program_kwargs or {})
        wmap = DifferentialWeightMap(self.weights, bias_row_index)
        self.crossbars: list[CrossbarArray] = [program_weights(wmap, params, s, **kw)
                                               for s in self.trial_seeds]
        if streams is None:
            self.streams = [np.random.default_rng([stream_seed, s]).integers(len(self.samples), size=self.horizon_k)
                            for s in self.trial_seeds]
        else:
            self.streams = [np.asarray(st, dtype=int) for st in streams]
            if len(self.streams) != len(self.trial_seeds):
                raise ValueError("need one stream per trial seed")
            for st in self.streams:
                if st.size != self.horizon_k or np.any(st < 0) or np.any(st >= len(self.samples)):
                    raise ValueError("each stream needs horizon_k valid sample indices")
        self.targets = self.eval_samples @ self.weights
        # E(W) = mean_s |t_s - x_s W|^2 expanded once so evaluations skip the sample loop
        n = self.eval_samples.shape[0]
        self._gram = self.eval_samples.T @ self.eval_samples / n
        self._cross = self.eval_samples.T @ self.targets / n
        self._tt = float(np.sum(self.targets**2) / n)
        self.e0 = np.array([self._mse(x.decode_weights()) for x in self.crossbars])
        self._agg_cache: dict = {}
        self.evaluations = 0

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    def identity_config(self, **kwargs) -> PulseConfig:
        kw = dict(base_amplitude=self.base_amplitude, base_width=self.base_width)
        kw.update(kwargs)
        return PulseConfig.identity(self.rows, **kw)

    def _mse(self, decoded_weights) -> float:
        Wd = decoded_weights
        return float(self._tt - 2.0 * np.sum(self._cross * Wd) + np.sum(Wd * (self._gram @ Wd)))

    # -- drift simulation ------------------------------------------------

    def replay(self, trial: int, cfg: PulseConfig) -> CrossbarArray:
        """Clone trial ``trial``'s crossbar and replay the read stream on it."""
        xbar = self.crossbars[trial].copy()
        limit = self.params.read_limit
        for s in self.streams[trial]:
            p = encode_input(self.samples[s], cfg, cfg.is_inverted(int(s)), read_limit=limit)
            xbar.apply_pulses(p.voltage, p.width)
            xbar.read_count += 1
        return xbar

    def _aggregate_terms(self, trial: int, cfg: PulseConfig):
        mask = cfg.inversion_mask
        key = (trial, cfg.base_amplitude, cfg.base_width, None if mask is None else mask.tobytes())
        hit = self._agg_cache.get(key)
        if hit is not None:
            return hit
        counts = np.bincount(self.streams[trial], minlength=len(self.samples)).astype(float)
        used = np.flatnonzero(counts)
        X = self.samples[used].copy()
        if mask is not None and mask.size:
            X[mask[used % mask.size]] *= -1.0
        cell = self.crossbars[trial].cell
        p = self.params
        pos_ratio = np.where(X > 0, cfg.base_amplitude * X / p.v_off, 0.0)
        neg_ratio = np.where(X < 0, cfg.base_amplitude * X / p.v_on, 0.0)
        if np.any(pos_ratio >= 1.0) or np.any(neg_ratio >= 1.0):
            raise ValueError("base amplitude reaches the switching threshold")
        # per cell: sum over the stream of (v / v_threshold) ** alpha
        P = np.einsum("s,srj->rj", counts[used],
                      np.power(pos_ratio[:, :, None], cell["alpha_s_off"][None]))
        N = np.einsum("s,srj->rj", counts[used],
                      np.power(neg_ratio[:, :, None], cell["alpha_s_on"][None]))
        hit = (cfg.base_width * cell["k_s_off"] * P, cfg.base_width * cell["k_s_on"] * N)
        self._agg_cache[key] = hit
        return hit

    def aggregate_state(self, trial: int, cfg: PulseConfig, strict: bool = False) -> np.ndarray:
        """Closed-form replay for state-independent (rectangular-window) drift.

        Sums every read's state change per cell instead of stepping through
        the stream, returning the final cell states. Identical to
        :meth:`replay` unless a cell touches a state bound mid-stream; then
        ``strict=True`` raises and otherwise the final state is clamped.
        """
        if self.params.window_kind != "rectangular":
            raise ValueError("aggregate drift needs a rectangular window")
        reach_pos, reach_neg = self._aggregate_terms(trial, cfg)
        A, D = cfg.for_rows(self.rows)
        alpha = self.crossbars[trial].cell["alpha_s_off"]
        up = reach_pos * D[:, None] * np.power(A[:, None], alpha)
        w0 = self.crossbars[trial].w
        if strict and (np.any(w0 + up > 1.0) or np.any(w0 + reach_neg < 0.0)):
            raise ValueError("a cell may reach a state bound; aggregate drift is not exact")
        return np.clip(w0 + up + reach_neg, 0.0, 1.0)

    def drifted_state(self, trial: int, cfg: PulseConfig, method: str | None = None) -> np.ndarray:
        method = method or self.method
        if method == "replay":
            return self.replay(trial, cfg).w
        if method == "aggregate":
            return self.aggregate_state(trial, cfg)
        if method == "auto":
            if self.params.window_kind == "rectangular":
                try:
                    return self.aggregate_state(trial, cfg, strict=True)
                except ValueError:
                    pass
            return self.replay(trial, cfg).w
        raise ValueError(f"unknown method {method!r}")

    def raw_e_drift(self, cfg: PulseConfig, method: str | None = None) -> float:
        """Mean over trials of E_k - E_0, unscaled and without penalties."""
        cfg.validate(self.params.read_limit)
        vals = [self._mse(self.crossbars[t].decode_weights(self.drifted_state(t, cfg, method)))
                - self.e0[t] for t in range(len(self.trial_seeds))]
        self.evaluations += 1
        return float(np.mean(vals))

    def penalty(self, cfg: PulseConfig) -> float:
        A, D = cfg.for_rows(self.rows)
        return self.lambda1 * float(np.sum(A**2)) + self.lambda2 * float(np.sum(D**2))

    def __call__(self, cfg: PulseConfig, method: str | None = None) -> float:
        return evaluate_e_drift(self, cfg, method)


def evaluate_e_drift(obj: DriftObjective, cfg: PulseConfig, method: str | None = None) -> float:
    """E_Drift(A, D) / scale + lambda1 * sum(A^2) + lambda2 * sum(D^2)."""
    return obj.raw_e_drift(cfg, method) / obj.scale + obj.penalty(cfg)


# -- inversion ---------------------------------------------------------------

def aggregate_drift_rate(samples_or_dist, device: DeviceParams, cfg: PulseConfig, a: float,
                         cells: list[dict] | None = None, w: float = 0.5) -> float:
    """Signed expected dw/dt averaged over rows and devices after inverting ``a``.

    ``samples_or_dist`` is either an :class:`InputDistribution` (one row) or
    an (n, rows) sample matrix. ``cells`` lists per-device parameter arrays
    of shape (rows, cols); without it the nominal device is used.
    """
    trial = cfg.with_ratios()
    trial.inversion_fraction = a
    if isinstance(samples_or_dist, InputDistribution):
        if cells is None:
            return expected_drift_rate(samples_or_dist, device, trial, w)
        rates = [np.mean(expected_drift_rate(samples_or_dist, device, trial, w, 0,
                                             {k: np.ravel(v) for k, v in c.items()}))
                 for c in cells]
        return float(np.mean(rates))
    X = np.atleast_2d(np.asarray(samples_or_dist, dtype=float))
    rows = X.shape[1]
    A, D = cfg.for_rows(rows)
    cell_list = cells if cells else [{n: np.full((rows, 1), getattr(device, n)) for n in VARIED_FIELDS}]
    total = []
    for c in cell_list:
        acc = 0.0
        for sign, weight in ((1.0, 1.0 - a), (-1.0, a)):
            if weight == 0.0:
                continue
            Xs = sign * X
            v = cfg.base_amplitude * np.where(Xs > 0, A * Xs, Xs)          # (n, rows)
            rate = _rate_magnitude(
                v[:, :, None], device.v_on, device.v_off,
                c["k_s_on"][None], c["k_s_off"][None], c["alpha_s_on"][None], c["alpha_s_off"][None],
                c["k_on"][None], c["k_off"][None], c["alpha_on"][None], c["alpha_off"][None],
            )
            rate = rate * np.where(Xs > 0, D, 1.0)[:, :, None]
            acc = acc + weight * rate.mean(axis=0)
        total.append(np.mean(acc))
    return float(np.mean(total))


def optimize_inversion_fraction(samples_or_dist, device: DeviceParams, cfg0: PulseConfig,
                                cells: list[dict] | None = None, tol: float = 1e-3,
                                upper: float = 0.5) -> float:
    """Golden-section search for the a in [0, upper] minimising |aggregate drift rate|."""
    return golden_section(
        lambda a: abs(aggregate_drift_rate(samples_or_dist, device, cfg0, a, cells)),
        0.0, upper, tol)[0]


def optimize_inversion(obj: DriftObjective, cfg0: PulseConfig, tol: float = 1e-3) -> float:
    """Inversion fraction balancing the objective's inputs over its sampled devices."""
    cells = [x.cell for x in obj.crossbars]
    return optimize_inversion_fraction(obj.samples, obj.params, cfg0, cells, tol)


# -- preprocessing -------------------------------------------------------------

@dataclass
class ScenarioResult:
    name: str
    objective: float
    amplitude_ratio: list[float]
    width_ratio: list[float]
    in_bounds: bool
    status: str
    iterations: int
    evaluations: int


@dataclass
class LayerReport:
    layer: int
    identity_objective: float
    selected: str
    selected_objective: float
    inversion_triggered: bool
    inversion_fraction: float
    scenarios: list[ScenarioResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "identity_objective": self.identity_objective,
            "selected": self.selected,
            "selected_objective": self.selected_objective,
            "inversion_triggered": self.inversion_triggered,
            "inversion_fraction": self.inversion_fraction,
            "scenarios": [vars(s) for s in self.scenarios],
        }


class _RatioSpace:
    """Maps unconstrained optimiser variables to pulse ratios.

    Amplitude ratios pass through a scaled logistic so the positive pulse can
    never reach the switching threshold; width ratios are exp(theta). Neither
    map enforces the hardware ratio bounds: leaving them is how constraint
    violations are detected.
    """

    def __init__(self, rows: int, a_max: float):
        self.rows = rows
        self.a_max = a_max

    # keeps ratios finite and nonzero however far the optimiser wanders
    THETA_LIMIT = 30.0

    def amp(self, theta):
        th = np.clip(np.asarray(theta, dtype=float), -self.THETA_LIMIT, self.THETA_LIMIT)
        return self.a_max / (1.0 + np.exp(-th))

    def amp_inv(self, A):
        A = np.clip(np.asarray(A, dtype=float), 1e-9, self.a_max * (1 - 1e-9))
        return np.log(A / (self.a_max - A))

    @classmethod
    def width(cls, theta):
        return np.exp(np.clip(np.asarray(theta, dtype=float), -cls.THETA_LIMIT, cls.THETA_LIMIT))

    @staticmethod
    def width_inv(D):
        return np.log(np.asarray(D, dtype=float))


def _free_config(cfg: PulseConfig, A, D) -> PulseConfig:
    """Copy of ``cfg`` with ratios that may lie outside the hardware bounds."""
    return PulseConfig(A, D, cfg.base_amplitude, cfg.base_width, cfg.inversion_fraction,
                       cfg.inversion_mask, 0.0, np.inf)


def _in_bounds(cfg: PulseConfig, lo: float, hi: float, tol: float = 1e-6) -> bool:
    r = np.concatenate([cfg.amplitude_ratio, cfg.width_ratio])
    return bool(np.all(r >= lo - tol) and np.all(r <= hi + tol))


def _clipped(cfg: PulseConfig, lo: float, hi: float, a_max: float) -> PulseConfig:
    A = np.clip(cfg.amplitude_ratio, lo, max(lo, min(hi, a_max)))
    D = np.clip(cfg.width_ratio, lo, hi)
    return PulseConfig(A, D, cfg.base_amplitude, cfg.base_width, cfg.inversion_fraction,
                       cfg.inversion_mask, lo, hi)


def _run_scenarios(obj: DriftObjective, base: PulseConfig, space: _RatioSpace, tol: float,
                   max_iter: int, tag: str, method: str) -> list[tuple[ScenarioResult, PulseConfig]]:
    rows = obj.rows
    ones = np.ones(rows)

    def f_of(A, D):
        return evaluate_e_drift(obj, _free_config(base, A, D), method)

    def run(name, x0, unpack):
        res: OptimizeResult = bfgs_minimize(lambda th: f_of(*unpack(th)), x0, tol=tol, max_iter=max_iter)
        A, D = unpack(res.x)
        cfg = _free_config(base, A, D)
        sr = ScenarioResult(f"{tag}{name}", res.fun, A.tolist(), D.tolist(),
                            _in_bounds(cfg, base.ratio_min, base.ratio_max),
                            res.status, res.nit, res.nfev)
        log.info("scenario %s: objective %.6g status %s (%d it)", sr.name, res.fun, res.status, res.nit)
        return sr, cfg

    # Cells pinned at a state bound make E_Drift flat around the identity,
    # so each search starts from the best of the identity and the two ends
    # of the allowed ratio range.
    lo = np.full(rows, base.ratio_min)
    hi = np.full(rows, base.ratio_max)
    a_top = space.a_max * THRESHOLD_MARGIN
    a_starts = [np.minimum(ones, a_top), np.full(rows, min(base.ratio_min, a_top)),
                np.full(rows, min(base.ratio_max, a_top))]
    A0 = min(a_starts, key=lambda A: f_of(A, ones))
    D0 = min([ones, lo, hi], key=lambda D: f_of(ones, D))
    out = []
    out.append(run("amplitude", space.amp_inv(A0), lambda th: (space.amp(th), ones)))
    out.append(run("width", space.width_inv(D0), lambda th: (ones, space.width(th))))
    best = min(out[:2], key=lambda rc: rc[0].objective)[1]
    x0 = np.concatenate([space.amp_inv(best.amplitude_ratio), space.width_inv(best.width_ratio)])
    out.append(run("joint", x0, lambda th: (space.amp(th[:rows]), space.width(th[rows:]))))
    return out


def _polish_in_bounds(obj: DriftObjective, cfg: PulseConfig, a_max: float, tol: float, max_iter: int,
                      method: str) -> tuple[ScenarioResult, PulseConfig]:
    """Joint BFGS over ratios squashed into [ratio_min, ratio_max] by a logistic map."""
    rows = obj.rows
    lo, hi = cfg.ratio_min, cfg.ratio_max
    a_hi = max(lo, min(hi, a_max))
    A0, D0 = (np.array(r, dtype=float) for r in cfg.for_rows(rows))

    def box(th, top):
        if top - lo <= 1e-12:
            return np.full(rows, lo)
        th = np.clip(th, -_RatioSpace.THETA_LIMIT, _RatioSpace.THETA_LIMIT)
        return lo + (top - lo) / (1.0 + np.exp(-th))

    def unbox(r, top):
        if top - lo <= 1e-12:
            return np.zeros(rows)
        u = np.clip((r - lo) / (top - lo), 1e-6, 1.0 - 1e-6)
        return np.log(u / (1.0 - u))

    def unpack(th):
        return box(th[:rows], a_hi), box(th[rows:], hi)

    def f(th):
        return evaluate_e_drift(obj, cfg.with_ratios(*unpack(th)), method)

    res = bfgs_minimize(f, np.concatenate([unbox(A0, a_hi), unbox(D0, hi)]), tol=tol, max_iter=max_iter)
    A, D = unpack(res.x)
    out = cfg.with_ratios(A, D)
    sr = ScenarioResult("bounded", evaluate_e_drift(obj, out, method), A.tolist(), D.tolist(),
                        True, res.status, res.nit, res.nfev)
    log.info("scenario bounded: objective %.6g status %s (%d it)", sr.objective, res.status, res.nit)
    return sr, out


def aidx_preprocess_layer(obj: DriftObjective, cfg0: PulseConfig | None = None, *, layer: int = 0,
                          tol: float = 1e-6, max_iter: int = 100, inversion_seed: int = 0,
                          method: str = "aggregate", normalize: bool = True, polish: bool = True,
                          ) -> tuple[PulseConfig, LayerReport]:
    """Three-scenario optimisation of one layer's pulse ratios.

    Runs amplitude-only, width-only and joint BFGS searches; if an optimum
    leaves the hardware ratio bounds, optimises the inversion fraction and
    repeats the scenarios on the inverted inputs. Every candidate is clipped
    into bounds and re-scored; the best one wins, with the identity
    configuration always among the candidates. With ``polish`` the winner
    is then refined by a joint search confined to the ratio bounds.
    """
    cfg0 = cfg0 or obj.identity_config()
    if normalize:
        obj.scale = 1.0
        ref = obj.raw_e_drift(cfg0, method)
        obj.scale = ref if ref > 0 else 1.0
    a_max = THRESHOLD_MARGIN * obj.params.read_limit / max(cfg0.base_amplitude, 1e-30)
    space = _RatioSpace(obj.rows, a_max)

    identity_val = evaluate_e_drift(obj, cfg0, method)
    candidates: list[tuple[str, float, PulseConfig]] = [("identity", identity_val, cfg0)]
    report = LayerReport(layer, identity_val, "identity", identity_val, False, cfg0.inversion_fraction)

    def consider(results):
        for sr, cfg in results:
            report.scenarios.append(sr)
            fixed = _clipped(cfg, cfg0.ratio_min, cfg0.ratio_max, a_max)
            val = evaluate_e_drift(obj, fixed, method)
            candidates.append((sr.name, val, fixed))

    first = _run_scenarios(obj, cfg0, space, tol, max_iter, "", method)
    consider(first)
    if not all(sr.in_bounds for sr, _ in first):
        report.inversion_triggered = True
        a_star = optimize_inversion(obj, cfg0)
        _, mask = invert_fraction(obj.samples, a_star, inversion_seed)
        inv0 = PulseConfig(cfg0.amplitude_ratio, cfg0.width_ratio, cfg0.base_amplitude,
                           cfg0.base_width, a_star, mask, cfg0.ratio_min, cfg0.ratio_max)
        report.inversion_fraction = a_star
        candidates.append(("inverted-identity", evaluate_e_drift(obj, inv0, method), inv0))
        consider(_run_scenarios(obj, inv0, space, tol, max_iter, "inverted-", method))

    name, val, cfg = candidates[0]
    for cand in candidates[1:]:
        if cand[1] < val - TIE_TOLERANCE * max(1.0, abs(val)):
            name, val, cfg = cand
    if polish:
        sr, polished = _polish_in_bounds(obj, cfg, a_max, tol, max_iter, method)
        report.scenarios.append(sr)
        if sr.objective < val - TIE_TOLERANCE * max(1.0, abs(val)):
            name, val, cfg = f"{name}+bounded", sr.objective, polished
    report.selected, report.selected_objective = name, val
    if name == "identity":
        report.inversion_fraction = cfg0.inversion_fraction
    else:
        report.inversion_fraction = cfg.inversion_fraction
    return cfg, report


def aidx_preprocess(layer_objectives: list[DriftObjective], cfgs0: list[PulseConfig] | None = None,
                    **kwargs) -> tuple[list[PulseConfig], list[LayerReport]]:
    """Optimise every layer in input-to-output order."""
    cfgs, reports = [], []
    for i, obj in enumerate(layer_objectives):
        cfg0 = None if cfgs0 is None else cfgs0[i]
        cfg, rep = aidx_preprocess_layer(obj, cfg0, layer=i, **kwargs)
        cfgs.append(cfg)
        reports.append(rep)
    return cfgs, reports
