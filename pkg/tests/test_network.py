import numpy as np
import pytest

from memdrift.device import DeviceParams
from memdrift.network import (
    DenseSpec,
    evaluate,
    forward_inference,
    im2col,
    layer_error_estimate,
    lifetime,
    map_network,
    run_trajectory,
    software_forward,
)
from memdrift.signal import PulseConfig
from memdrift.workloads import blob_classifier, with_input_scales

P = DeviceParams()
PROG = {"g_min": 2e-4, "g_max": 5e-3}


def short_cfgs(net, width=1e-9):
    return [PulseConfig.identity(layer.rows, base_amplitude=0.3, base_width=width) for layer in net]


def small_mlp(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (25, 5))
    specs = with_input_scales([
        DenseSpec(rng.normal(size=(5, 6)), rng.normal(size=6) * 0.3, "relu"),
        DenseSpec(rng.normal(size=(6, 3)), rng.normal(size=3) * 0.3, "identity"),
    ], X)
    return specs, X


def test_identity_layer_passes_inputs_through():
    net = map_network([DenseSpec(np.eye(4), np.zeros(4))], P, 0, variation=0.0, **PROG)
    x = np.array([0.5, -0.25, 1.0, 0.0])
    np.testing.assert_allclose(forward_inference(net, x, short_cfgs(net)), x, atol=1e-12)


def test_fresh_network_matches_floating_point():
    specs, X = small_mlp()
    net = map_network(specs, P, 3, **PROG)
    ref = software_forward(specs, X)
    np.testing.assert_allclose(evaluate(net, X), ref, rtol=1e-9, atol=1e-12)
    for i in range(3):
        np.testing.assert_allclose(forward_inference(net, X[i], short_cfgs(net)), ref[i],
                                   rtol=1e-6, atol=1e-9)


def test_evaluation_does_not_drift():
    specs, X = small_mlp()
    net = map_network(specs, P, 0, **PROG)
    before = [layer.crossbar.w.copy() for layer in net]
    evaluate(net, X)
    for layer, w in zip(net, before):
        assert np.array_equal(layer.crossbar.w, w) and layer.crossbar.read_count == 0


def test_inference_reads_drift_every_layer():
    specs, X = small_mlp()
    net = map_network(specs, P, 0, **PROG)
    before = [layer.crossbar.w.copy() for layer in net]
    for i in range(20):
        forward_inference(net, X[i], short_cfgs(net, 1e5))
    for layer, w in zip(net, before):
        assert not np.array_equal(layer.crossbar.w, w) and layer.crossbar.read_count == 20


def test_inversion_is_transparent_to_outputs():
    specs, X = small_mlp()
    net = map_network(specs, P, 0, variation=0.0, **PROG)
    cfgs = [PulseConfig.identity(layer.rows, base_width=1e-9, inversion_fraction=0.5,
                                 inversion_mask=[True]) for layer in net]
    np.testing.assert_allclose(forward_inference(net, X[0], cfgs, sample_index=0),
                               software_forward(specs, X[:1])[0], rtol=1e-6, atol=1e-9)


def test_forward_rejects_mismatches():
    specs, X = small_mlp()
    net = map_network(specs, P, 0, **PROG)
    with pytest.raises(ValueError):
        forward_inference(net, X[0], short_cfgs(net)[:1])
    with pytest.raises(ValueError):
        forward_inference(net, X[0, :4], short_cfgs(net))
    with pytest.raises(ValueError):
        DenseSpec(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ValueError):
        DenseSpec(np.ones((2, 2)), np.ones(2), activation="tanh")


def test_conv_layer_lowers_to_patches():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    cols = im2col(img.ravel(), (2, 4, 4), 3)
    assert cols.shape == (4, 18)
    np.testing.assert_array_equal(cols[1], img[:, 0:3, 1:4].ravel())
    rng = np.random.default_rng(1)
    spec = DenseSpec(rng.normal(size=(18, 3)) * 0.3, np.zeros(3), "relu", input_scale=1.0,
                     kind="conv", conv_shape=(2, 4, 4), kernel=3)
    x = rng.uniform(-1, 1, 32)
    net = map_network([spec], P, 0, variation=0.0, **PROG)
    out = forward_inference(net, x, short_cfgs(net))
    assert net[0].kind == "conv-as-dense" and out.shape == (12,)
    np.testing.assert_allclose(out, software_forward([spec], x[None])[0], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(evaluate(net, x[None])[0], out, rtol=1e-6, atol=1e-9)


# -- layer error estimator ---------------------------------------------------------

def drifted_pair(seed, reads=1000):
    specs = [DenseSpec(np.eye(4) * 0.8, np.zeros(4), input_scale=1.0),
             DenseSpec(np.eye(4) * 3.0, np.zeros(4), input_scale=2.0)]
    X = np.random.default_rng(0).uniform(-1, 1, (20, 4))
    net = map_network(specs, P, seed, variation=0.15, **PROG)
    w0 = [layer.crossbar.w.copy() for layer in net]
    cfgs = short_cfgs(net, 1e3)
    for i in range(reads):
        forward_inference(net, X[i % 20], cfgs)
    snap = [layer.crossbar.w.copy() for layer in net]
    drifted = evaluate(net, X)
    for layer, w in zip(net, w0):
        layer.crossbar.w = w
    return net, snap, X, drifted


def test_estimator_is_zero_without_drift():
    net, _, X, _ = drifted_pair(0, reads=1)
    E = layer_error_estimate(net, [layer.crossbar.w for layer in net], X)
    assert all(np.all(e == 0) for e in E)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_estimator_reproduces_drifted_output(seed):
    net, snap, X, drifted = drifted_pair(seed)
    E = layer_error_estimate(net, snap, X)
    np.testing.assert_allclose(E[-1], drifted - evaluate(net, X), atol=1e-13)
    # error accumulates with depth
    assert np.mean(np.abs(E[1])) > np.mean(np.abs(E[0])) > 0


def test_estimator_single_layer_matches_weight_drift():
    net = map_network([DenseSpec(0.8 * np.eye(4), np.zeros(4))], P, 5, variation=0.15, **PROG)
    X = np.random.default_rng(2).uniform(-1, 1, (30, 4))
    ideal = evaluate(net, X)
    w0 = net[0].crossbar.w.copy()
    for i in range(300):
        forward_inference(net, X[i % 30], short_cfgs(net, 1e6))
    snap = [net[0].crossbar.w.copy()]
    drifted = evaluate(net, X)
    net[0].crossbar.w = w0
    E = layer_error_estimate(net, snap, X)
    np.testing.assert_allclose(E[0], drifted - ideal, atol=1e-14)
    with pytest.raises(ValueError):
        layer_error_estimate(net, [], X)


# -- trajectories ------------------------------------------------------------------

def test_drift_free_trajectory_is_flat():
    specs, X = small_mlp()
    y = np.argmax(software_forward(specs, X), axis=1)
    net = map_network(specs, P, 0)
    cfgs = short_cfgs(net, 1e7)
    tm = run_trajectory(specs, P.without_drift(), X, X, y, cfgs, total_ops=200, checkpoint_every=50,
                        seeds=(0, 1), program_kwargs=PROG)
    assert np.all(tm.per_seed == tm.per_seed[:, :1])
    assert tm.series[0] == 1.0 and tm.lifetime_ops is None
    assert tm.lifetime_or_horizon() == 200


def test_trajectory_is_seeded_and_exports_csv():
    specs, X = small_mlp()
    net = map_network(specs, P, 0)
    kw = dict(total_ops=60, checkpoint_every=20, seeds=(3,), metric="mse", program_kwargs=PROG)
    a = run_trajectory(specs, P, X, X, software_forward(specs, X), short_cfgs(net, 1e6), **kw)
    b = run_trajectory(specs, P, X, X, software_forward(specs, X), short_cfgs(net, 1e6), **kw)
    assert np.array_equal(a.per_seed, b.per_seed)
    assert a.mse_series is not None and a.accuracy_series is None
    lines = a.to_csv("aidx", comment="run").splitlines()
    assert lines[0] == "# run" and lines[1] == "op_count,metric,seed,value,config"
    assert len(lines) == 2 + 4 and lines[2].startswith("0,mse,3,")


def test_trajectory_validates_arguments():
    specs, X = small_mlp()
    cfgs = short_cfgs(map_network(specs, P, 0))
    with pytest.raises(ValueError):
        run_trajectory(specs, P, X, X, X, cfgs, total_ops=10, checkpoint_every=20)
    with pytest.raises(ValueError):
        run_trajectory(specs, P, X, X, X, cfgs, total_ops=10, checkpoint_every=5, metric="f1")


def test_lifetime_is_first_checkpoint_below_threshold():
    assert lifetime([0, 10, 20, 30], [0.9, 0.8, 0.6, 0.7], 0.65) == 20
    assert lifetime([0, 10], [0.9, 0.8], 0.5) is None


def test_deeper_network_degrades_faster():
    finals = {}
    for hidden in ((16,), (16, 16)):
        wl = blob_classifier(hidden=hidden)
        cfgs = [PulseConfig.identity(s.weights.shape[0] + 1, base_amplitude=wl.base_amplitude,
                                     base_width=wl.base_width) for s in wl.specs]
        tm = run_trajectory(wl.specs, P, wl.stream_inputs, wl.eval_inputs, wl.eval_targets, cfgs,
                            total_ops=10_000, checkpoint_every=2500, seeds=range(6),
                            program_kwargs=dict(wl.programming, variation=0.15))
        finals[hidden] = tm.series[-1]
    assert finals[(16, 16)] < finals[(16,)]
