"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line verdict before asserting; the verdicts are
printed together in the "acceptance criteria" section of the pytest summary.
"""

import math

import numpy as np
import pytest

from memdrift import cli
from memdrift.aidx import (
    DriftObjective,
    aggregate_drift_rate,
    aidx_preprocess,
    optimize_inversion_fraction,
)
from memdrift.crossbar import DifferentialWeightMap, accumulated_drift, program_weights, vmm_read
from memdrift.device import (
    VARIED_FIELDS,
    MemristorState,
    integrate_step,
    sample_variation_array,
    state_rate_array,
)
from memdrift.experiments import OptimizeSettings, benchmark, optimize_workload
from memdrift.fitting import fit_subthreshold, synthetic_sweep
from memdrift.network import DenseSpec, evaluate, forward_inference, layer_error_estimate, map_network
from memdrift.optimizer import ARMIJO_C1, bfgs_minimize, nelder_mead_minimize
from memdrift.signal import InputDistribution, PulseConfig

pytestmark = pytest.mark.acceptance


def sumsq(cfgs):
    return sum(float(np.sum(c.amplitude_ratio**2) + np.sum(c.width_ratio**2)) for c in cfgs)


def recovery(res):
    """Share of the baseline's final accuracy loss that the tuned arm wins back."""
    b, a = res.baseline.series, res.aidx.series
    return (a[-1] - b[-1]) / (b[0] - b[-1])


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_device_oracles(record, params):
    rect = params.replace(window_kind="rectangular")
    lin = params.replace(window_kind="linear")
    rect_err = 0.0
    for w0, v, dt in [(0.4, 0.3, 1e5), (0.6, -0.25, 3e4), (0.2, 0.55, 7e4), (0.9, -0.5, 10.0)]:
        want = w0 + float(state_rate_array(w0, v, rect)) * dt
        got = integrate_step(MemristorState(w0, rect), v, dt).w
        rect_err = max(rect_err, abs(got - want) / abs(want))
    lin_err = 0.0
    for w0, v, dt in [(0.1, 0.5, 2e6), (0.5, 0.5, 1e7), (0.8, 0.5, 3e7)]:
        r = float(state_rate_array(0.0, v, rect))
        want = 1.0 - (1.0 - w0) * math.exp(-r * dt)
        got = integrate_step(MemristorState(w0, lin), v, dt).w
        lin_err = max(lin_err, abs(got - want) / abs(want))

    # 10 states x 100 voltages, both windows
    w = np.linspace(0.05, 0.95, 10)[:, None]
    v = np.linspace(params.v_on * 0.999, params.v_off * 0.999, 100)[None, :]
    grid_ok = True
    for p in (rect, lin):
        rate = state_rate_array(w, v, p)
        grid_ok &= bool(np.all(np.sign(rate) == np.sign(v)))
        mag = np.abs(rate)
        pos, neg = v[0] > 0, v[0] < 0
        grid_ok &= bool(np.all(np.diff(mag[:, pos], axis=1) >= 0))
        grid_ok &= bool(np.all(np.diff(mag[:, neg], axis=1) <= 0))
    ok = rect_err <= 1e-9 and lin_err <= 1e-6 and grid_ok
    record(1, ok, f"rectangular rel err {rect_err:.1e}, linear {lin_err:.1e}, 1000-point grid "
                  f"{'ok' if grid_ok else 'violated'}")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_variation_statistics(record, params):
    """Literal reading: every parameter drawn with variance 0.15*|nominal| in SI units."""
    arr = sample_variation_array(params, (100_000,), np.random.default_rng(2), 0.15, "absolute")
    failures = []
    for name in VARIED_FIELDS:
        x0 = getattr(params, name)
        mean_err = abs(arr[name].mean() - x0) / abs(x0)
        var_err = abs(arr[name].var() - 0.15 * abs(x0)) / (0.15 * abs(x0))
        if mean_err > 0.02 or var_err > 0.05:
            failures.append(f"{name} (mean {mean_err:.0%}, var {var_err:.0%})")
    clamps = (np.all(arr["k_s_on"] <= 0) and np.all(arr["k_on"] <= 0) and np.all(arr["k_s_off"] >= 0)
              and np.all(arr["k_off"] >= 0) and all(arr[n].min() >= 1 for n in VARIED_FIELDS if n.startswith("alpha")))
    ok = not failures and clamps
    detail = "all parameters within tolerance" if not failures else "off: " + ", ".join(failures)
    record(2, ok, f"{detail}; clamps {'hold' if clamps else 'violated'}")
    assert clamps
    assert not failures, detail


# -- 3 ---------------------------------------------------------------------------

def _rosen(z):
    return (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2


def _rosen_grad(z):
    x, y = z
    return np.array([-2 * (1 - x) - 400 * x * (y - x**2), 200 * (y - x**2)])


def test_criterion_3_optimizer_suite(record):
    worst_quad, worst_nm = 0.0, 0.0
    for n in range(2, 11):
        rng = np.random.default_rng(n)
        M = rng.normal(size=(n, n))
        Q = M @ M.T + n * np.eye(n)
        b = rng.normal(size=n)
        f = lambda z: 0.5 * z @ Q @ z - b @ z  # noqa: E731
        x_star = np.linalg.solve(Q, b)
        res = bfgs_minimize(f, np.zeros(n), tol=1e-10, grad=lambda z: Q @ z - b, max_iter=n + 2)
        worst_quad = max(worst_quad, np.max(np.abs(res.x - x_star)))
        nm = nelder_mead_minimize(f, np.zeros(n), tol=1e-14, max_iter=200_000)
        worst_nm = max(worst_nm, np.max(np.abs(nm.x - x_star)))

    rosen = bfgs_minimize(_rosen, [-1.2, 1.0], grad=_rosen_grad, tol=1e-10, max_iter=200)
    armijo = True
    for k in range(1, rosen.nit + 1):
        st = bfgs_minimize(_rosen, [-1.2, 1.0], grad=_rosen_grad, tol=1e-10, max_iter=k).state
        x_prev, g_prev = st.x_k - st.s_k, st.grad_k - st.y_k
        armijo &= bool(_rosen(st.x_k) <= _rosen(x_prev) + ARMIJO_C1 * st.alpha_k * g_prev @ st.p_k)
    ok = worst_quad <= 1e-6 and rosen.fun < 1e-10 and rosen.nit <= 200 and armijo and worst_nm <= 1e-3
    record(3, ok, f"quadratics err {worst_quad:.1e} in n+2 its, Rosenbrock f={rosen.fun:.1e} "
                  f"in {rosen.nit} its, Armijo {'holds' if armijo else 'violated'}, NM err {worst_nm:.1e}")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_drift_balance(record, params):
    p = params.replace(window_kind="rectangular")
    amp, width = 0.3, 1e4
    obj = DriftObjective(p, [[1.0]], [[1.0], [-0.5]], horizon_k=10_000, trial_seeds=(0,),
                         program_kwargs={"variation": 0.0, "g_min": 2e-4, "g_max": 5e-4},
                         base_amplitude=amp, base_width=width)
    cfgs, reports = aidx_preprocess([obj])
    cfg = cfgs[0]
    n_pos, n_neg = np.bincount(obj.streams[0], minlength=2)
    up = p.k_s_off * (amp / p.v_off) ** p.alpha_s_off
    down = -p.k_s_on * (0.5 * amp / -p.v_on) ** p.alpha_s_on
    d_star = n_neg * down / (n_pos * up)
    # positive pulses move the state at a rate scaled by A**alpha_s_off * D
    achieved = cfg.amplitude_ratio[0] ** p.alpha_s_off * cfg.width_ratio[0]
    d_err = abs(achieved / d_star - 1)
    w0 = obj.crossbars[0].w.copy()
    base = np.abs(obj.replay(0, obj.identity_config()).w - w0).max()
    tuned = np.abs(obj.replay(0, cfg).w - w0).max()
    ok = d_err <= 0.01 and tuned <= 0.01 * base
    record(4, ok, f"D*={d_star:.4g}, effective ratio off by {d_err:.1e}, "
                  f"|net dw| {tuned / base:.1e} of baseline ({reports[0].selected})")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_inversion_fraction(record, params):
    skewed = InputDistribution([1.0, -1.0], [0.8, 0.2])
    cfg = PulseConfig([1.5], [4.0], base_amplitude=0.3)
    a = optimize_inversion_fraction(skewed, params, cfg, tol=1e-5)
    grid = np.linspace(0.0, 0.5, 50_001)
    rates = np.array([abs(aggregate_drift_rate(skewed, params, cfg, g)) for g in grid])
    a_grid = grid[np.argmin(rates)]
    r0 = abs(aggregate_drift_rate(skewed, params, cfg, 0.0))
    ra = abs(aggregate_drift_rate(skewed, params, cfg, a))
    ok = r0 >= 10 * ra and abs(a - a_grid) <= 1e-3
    record(5, ok, f"a={a:.4f} (grid {a_grid:.4f}), drift rate reduced {r0 / max(ra, 1e-300):.1e}x")
    assert ok


# -- 6, 7, 8 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def mlp_aidx_a(params, blob_workload, blob_manifest):
    cfgs = cli.load_manifest(blob_manifest, blob_workload)
    return cfgs, benchmark(blob_workload, params, cfgs, total_ops=10_000, checkpoint_every=500,
                           seeds=range(20))


def test_criterion_6_mlp_mitigation(record, mlp_aidx_a):
    _, res = mlp_aidx_a
    b = res.baseline.series
    drop = b[0] - b[-1]
    rec = recovery(res)
    ratio = res.lifetime_ratio
    ok = drop >= 0.15 and rec >= 0.5 and ratio >= 3
    record(6, ok, f"baseline {b[0]:.3f} -> {b[-1]:.3f} (drop {100 * drop:.1f} pp), AIDX {res.aidx.series[-1]:.3f}, "
                  f"recovery {rec:.0%}, lifetime ratio {ratio:.2f} "
                  f"({res.aidx.lifetime_or_horizon()} vs {res.baseline.lifetime_or_horizon()} ops)")
    assert ok


def test_criterion_7_autoencoder_mitigation(record, params, digits_workload):
    cfgs, _ = optimize_workload(digits_workload, params, OptimizeSettings())
    res = benchmark(digits_workload, params, cfgs, total_ops=10_000, checkpoint_every=500, seeds=range(20))
    b, a = res.baseline.series, res.aidx.series
    base_rise, aidx_rise = b[-1] - b[0], a[-1] - a[0]
    reduction = 1 - aidx_rise / base_rise
    ok = base_rise > 0 and reduction >= 0.5
    record(7, ok, f"MSE rise baseline {base_rise:.2e}, AIDX {aidx_rise:.2e}, reduced {reduction:.0%}")
    assert ok


def test_criterion_8_regularised_tradeoff(record, params, blob_workload, mlp_aidx_a):
    cfgs_a, res_a = mlp_aidx_a
    settings = OptimizeSettings(mode="aidx-p", lambda1=1e-2, lambda2=1e-2)
    cfgs_p, _ = optimize_workload(blob_workload, params, settings)
    res_p = benchmark(blob_workload, params, cfgs_p, total_ops=10_000, checkpoint_every=500, seeds=range(20))
    ss_a, ss_p = sumsq(cfgs_a), sumsq(cfgs_p)
    rec_a, rec_p = recovery(res_a), recovery(res_p)
    kept = rec_p / rec_a if rec_a > 0 else float("nan")
    ok = ss_p < ss_a and kept >= 0.7
    record(8, ok, f"sum A^2+D^2 {ss_p:.1f} vs {ss_a:.1f}, recovery {rec_p:.0%} vs {rec_a:.0%} "
                  f"(keeps {kept:.0%})")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_differential_cancellation(record, params):
    x = program_weights(DifferentialWeightMap(np.zeros((3, 2))), params, 0, variation=0.0,
                        g_min=2e-4, g_max=5e-3)
    ref = x.copy()
    v, t = np.array([0.3, 0.2, 0.25]), np.full(3, 1e4)
    prev = np.zeros(4)
    exact = monotone = True
    for _ in range(1000):
        exact &= bool(np.all(vmm_read(x, v, t).decoded == 0.0))
        dg = np.abs(accumulated_drift(x, ref)).sum(axis=0)
        monotone &= bool(np.all(dg > prev))
        prev = dg
    ok = exact and monotone
    record(9, ok, f"decoded output {'exactly 0' if exact else 'nonzero'} over 1000 reads, "
                  f"column dG {'strictly increasing' if monotone else 'not monotone'} to {prev.max():.2e} S")
    assert ok


# -- 10 --------------------------------------------------------------------------

def _drift_and_estimate(specs, params, seed, X, n_reads, width):
    net = map_network(specs, params, seed, variation=0.15, g_min=2e-4, g_max=5e-3)
    fresh = [layer.crossbar.w.copy() for layer in net]
    cfgs = [PulseConfig.identity(s.weights.shape[0] + 1, base_amplitude=0.3, base_width=width) for s in specs]
    for i in range(n_reads):
        forward_inference(net, X[i % len(X)], cfgs)
    drifted_states = [layer.crossbar.w.copy() for layer in net]
    drifted = evaluate(net, X)
    for layer, w in zip(net, fresh):
        layer.crossbar.w = w
    return layer_error_estimate(net, drifted_states, X), drifted - evaluate(net, X)


def test_criterion_10_layer_error_diagnostic(record, params):
    X = np.random.default_rng(0).uniform(-1, 1, (20, 4))
    one = [DenseSpec(np.eye(4) * 0.8, np.zeros(4), "identity")]
    E, measured = _drift_and_estimate(one, params, 0, X, 300, 1e6)
    err = np.max(np.abs(E[0] - measured))

    two = [DenseSpec(np.eye(4) * 0.8, np.zeros(4), input_scale=1.0),
           DenseSpec(np.eye(4) * 3.0, np.zeros(4), input_scale=2.0)]
    depth = []
    for seed in range(4):
        E2, _ = _drift_and_estimate(two, params, seed, X, 1000, 1e3)
        depth.append([float(np.mean(np.abs(e))) for e in E2])
    nondecreasing = all(d[1] >= d[0] for d in depth)
    ok = err <= 1e-10 and nondecreasing
    record(10, ok, f"1-layer max |estimate - measured| {err:.1e} (output error up to {np.max(np.abs(measured)):.1e}); "
                   f"2-layer mean |E| per depth nondecreasing on {sum(d[1] >= d[0] for d in depth)}/4 seeds")
    assert ok


# -- 11 --------------------------------------------------------------------------

def test_criterion_11_fitting_round_trip(record, params):
    fitted, _ = fit_subthreshold(synthetic_sweep(params), params, seed=0)
    clean_k = max(abs(fitted.k_s_on / params.k_s_on - 1), abs(fitted.k_s_off / params.k_s_off - 1))
    noisy_k, noisy_a = 0.0, 0.0
    for seed in (1, 2, 3):
        f, _ = fit_subthreshold(synthetic_sweep(params, noise=0.01, seed=seed), params, seed=seed)
        noisy_k = max(noisy_k, abs(f.k_s_on / params.k_s_on - 1), abs(f.k_s_off / params.k_s_off - 1))
        noisy_a = max(noisy_a, abs(f.alpha_s_on - params.alpha_s_on), abs(f.alpha_s_off - params.alpha_s_off))
    ok = clean_k <= 1e-3 and noisy_k <= 0.05 and noisy_a <= 0.25
    record(11, ok, f"noiseless k rel err {clean_k:.1e}; 1% noise (3 seeds) k {noisy_k:.1%}, alpha {noisy_a:.3f}")
    assert ok


# -- 12 --------------------------------------------------------------------------

def test_criterion_12_benchmark_reproducible(record, tmp_path, blob_manifest, capsys):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["benchmark", "--manifest", str(blob_manifest), "--total-ops", "1000",
                         "--checkpoint-every", "250", "--seeds", "2", "--seed", "3", "--out-dir", str(out)])
        assert code == 0
        outs.append(out)
    capsys.readouterr()
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    ok = len(names) == 6 and same == names
    record(12, ok, f"{len(same)}/{len(names)} CSV files byte-identical across two runs")
    assert ok
