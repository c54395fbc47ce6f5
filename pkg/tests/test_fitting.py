import numpy as np
import pytest

from memdrift.device import DeviceParams, MemristorState, integrate_step
from memdrift.fitting import (
    IVData,
    fit_subthreshold,
    simulate_sweep,
    sweep_protocol,
    synthetic_sweep,
)

P = DeviceParams()


def test_protocol_stays_below_thresholds():
    v, dwell = sweep_protocol(P)
    assert np.all((v > P.v_on) & (v < P.v_off))
    assert np.sum(v > 0) >= 100 and np.sum(v < 0) >= 100
    assert np.all(dwell > 0)


@pytest.mark.parametrize("kind,k_off", [("rectangular", 1.126e-7), ("rectangular", 5e-5), ("linear", 1.126e-7)])
def test_sweep_simulation_matches_stepping(kind, k_off):
    """The running-sum shortcut agrees with pulse-by-pulse integration, bounds included."""
    p = P.replace(window_kind=kind, k_s_off=k_off)
    v, dwell = sweep_protocol(p, 60)
    got = simulate_sweep(p, v, dwell, 0.5)
    s = MemristorState(0.5, p)
    want, peak = [], 0.0
    for vi, ti in zip(v, dwell):
        want.append(vi * s.conductance)
        s = integrate_step(s, vi, ti)
        peak = max(peak, s.w)
    np.testing.assert_allclose(got, want, rtol=1e-9)
    assert (peak == 1.0) == (k_off > 1e-6)  # the fast device hits its upper bound


def test_noiseless_round_trip_of_other_parameters():
    truth = P.replace(k_s_on=-2e-6, alpha_s_on=4.5, k_s_off=3e-7, alpha_s_off=6.0)
    fitted, rep = fit_subthreshold(synthetic_sweep(truth), P, seed=1)
    assert fitted.k_s_on == pytest.approx(truth.k_s_on, rel=1e-3)
    assert fitted.k_s_off == pytest.approx(truth.k_s_off, rel=1e-3)
    assert fitted.alpha_s_on == pytest.approx(4.5, abs=1e-3)
    assert fitted.alpha_s_off == pytest.approx(6.0, abs=1e-3)
    assert rep.refined_objective <= rep.anneal_objective
    assert float(rep.anneal_params["alpha_s_on"]).is_integer()


def test_noisy_round_trip():
    fitted, rep = fit_subthreshold(synthetic_sweep(P, noise=0.01, seed=3), P, seed=3)
    assert fitted.k_s_on == pytest.approx(P.k_s_on, rel=0.05)
    assert fitted.k_s_off == pytest.approx(P.k_s_off, rel=0.05)
    assert abs(fitted.alpha_s_on - P.alpha_s_on) <= 0.25
    assert abs(fitted.alpha_s_off - P.alpha_s_off) <= 0.25
    assert 0 < rep.refined_objective <= rep.anneal_objective


def test_fit_keeps_fixed_parameters():
    base = P.replace(r_on=150.0, k_on=-1e-3)
    fitted, _ = fit_subthreshold(synthetic_sweep(base), base, seed=0, temperatures=40)
    assert (fitted.r_on, fitted.r_off, fitted.k_on, fitted.v_on) == (150.0, base.r_off, -1e-3, base.v_on)


def test_drift_free_data_fits_negligible_rates():
    flat = P.without_drift()
    fitted, _ = fit_subthreshold(synthetic_sweep(flat), flat, seed=0, temperatures=40)
    v, dwell = sweep_protocol(P)
    moved = simulate_sweep(fitted, v, dwell, 0.5) - simulate_sweep(flat, v, dwell, 0.5)
    assert np.max(np.abs(moved)) < 1e-12
    assert abs(fitted.k_s_on) < 1e-15 and abs(fitted.k_s_off) < 1e-15


def test_fit_is_seeded():
    data = synthetic_sweep(P, noise=0.01, seed=2)
    a, _ = fit_subthreshold(data, P, seed=5, temperatures=30)
    b, _ = fit_subthreshold(data, P, seed=5, temperatures=30)
    assert a == b


def test_too_few_points_rejected():
    d = synthetic_sweep(P)
    keep = np.flatnonzero(d.voltage > 0)[:9].tolist() + np.flatnonzero(d.voltage < 0).tolist()
    with pytest.raises(ValueError, match="points per branch"):
        fit_subthreshold(IVData(d.voltage[keep], d.current[keep], d.dwell[keep]), P)


def test_above_threshold_data_rejected():
    d = synthetic_sweep(P)
    v = d.voltage.copy()
    v[3] = 0.65
    with pytest.raises(ValueError, match="thresholds"):
        fit_subthreshold(IVData(v, d.current, d.dwell), P)


def test_csv_round_trip(tmp_path):
    d = synthetic_sweep(P, points_per_branch=30, noise=0.01)
    d.to_csv(tmp_path / "s.csv", comment="seed=0")
    assert (tmp_path / "s.csv").read_text().startswith("# seed=0\nvoltage_v,current_a,dwell_s\n")
    back = IVData.from_csv(tmp_path / "s.csv")
    for name in ("voltage", "current", "dwell"):
        assert np.array_equal(getattr(back, name), getattr(d, name))


@pytest.mark.parametrize("text,match", [
    ("", "empty"),
    ("voltage_v,current_a\n0.1,1e-5\n", "missing"),
    ("voltage_v,current_a,dwell_s\n0.1,abc,1\n", "malformed"),
    ("voltage_v,current_a,dwell_s\n", "no data"),
])
def test_malformed_csv_rejected(tmp_path, text, match):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(ValueError, match=match):
        IVData.from_csv(tmp_path / "bad.csv")


def test_ivdata_validation():
    with pytest.raises(ValueError):
        IVData([0.1, 0.2], [1e-5], 1.0)
    with pytest.raises(ValueError):
        IVData([0.1], [np.nan], 1.0)
    with pytest.raises(ValueError):
        IVData([0.1], [1e-5], 0.0)
