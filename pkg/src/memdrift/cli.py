"""Command-line front end: ``memdrift <command> [options]``.

Every command takes ``--config run.json`` and ``--seed``. Settings resolve
in three layers: built-in defaults, then the config file (flat keys, or a
section named after the command), then explicit flags. The resolved
settings are validated before any simulation starts and are written next to
the outputs.

Exit codes: 0 success, 2 invalid input or configuration, 3 failure while
simulating or optimising.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .crossbar import heatmap_csv
from .device import VARIATION_MODES, DeviceParams
from .experiments import OptimizeSettings, benchmark, drift_demo, identity_configs, optimize_workload
from .fitting import IVData, check_sweep, fit_subthreshold, synthetic_sweep
from .signal import RATIO_BOUNDS, PulseConfig
from .workloads import Workload, blob_classifier, digit_autoencoder

log = logging.getLogger("memdrift")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3

BUNDLED_WORKLOADS = {"blob-mlp": blob_classifier, "digits-ae": digit_autoencoder}

COMMON = {"seed": 0, "device": None}

DEFAULTS = {
    "sweep": {"out": "sweep.csv", "points_per_branch": 150, "dwell_set": 3e3, "dwell_reset": 2e5,
              "w0": 0.5, "noise": 0.0},
    "fit": {"iv": None, "out": "fitted_device.json", "temperatures": 200, "proposals": 20,
            "cooling": 0.95, "refine_iter": 200},
    "workload": {"name": "blob-mlp", "out_dir": "workload"},
    "optimize": {"workload": "blob-mlp", "out": "manifest.json", "mode": "aidx-a", "lambda1": 0.0,
                 "lambda2": 0.0, "horizon": 500, "trial_seeds": [1000, 1001, 1002, 1003, 1004],
                 "tol": 1e-6, "max_iter": 100, "method": "aggregate", "variation": 0.15,
                 "variation_mode": "natural", "ratio_min": RATIO_BOUNDS[0], "ratio_max": RATIO_BOUNDS[1]},
    "benchmark": {"workload": "blob-mlp", "manifest": None, "out_dir": "benchmark", "total_ops": 10_000,
                  "checkpoint_every": 500, "seeds": 20, "lifetime_fraction": 0.7, "variation": 0.15,
                  "variation_mode": "natural", "heatmaps": True},
    "drift-demo": {"out": "drift_demo.csv", "n_pulses": 10_000, "checkpoint_every": 100, "g0": 0.0052,
                   "base_amplitude": 0.3, "base_width": 1e3, "skews": [0.75, 0.25]},
}


class ConfigError(ValueError):
    pass


# -- argument parsing ------------------------------------------------------------

def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memdrift", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"memdrift {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON run config; flags override its values")
        _flag(p, "seed", type=int, help="run seed (default 0)")
        _flag(p, "device", help="device parameter JSON (default: bundled TiOx fit)")
        return p

    p = command("sweep", "write a synthetic sub-threshold I-V sweep CSV")
    _flag(p, "out")
    _flag(p, "points_per_branch", type=int)
    _flag(p, "dwell_set", type=float, help="seconds per SET-branch point")
    _flag(p, "dwell_reset", type=float, help="seconds per RESET-branch point")
    _flag(p, "w0", type=float, help="initial state")
    _flag(p, "noise", type=float, help="relative current noise")

    p = command("fit", "fit sub-threshold parameters to an I-V CSV (voltage_v, current_a, dwell_s)")
    _flag(p, "iv", help="I-V CSV (default: bundled synthetic sweep)")
    _flag(p, "out")
    _flag(p, "temperatures", type=int)
    _flag(p, "proposals", type=int)
    _flag(p, "cooling", type=float)
    _flag(p, "refine_iter", type=int)

    p = command("workload", "train a bundled task and write its workload files")
    _flag(p, "name", choices=sorted(BUNDLED_WORKLOADS))
    _flag(p, "out_dir")

    p = command("optimize", "optimise per-layer pulse configs for a workload")
    _flag(p, "workload", help="workload.json path or bundled name")
    _flag(p, "out", help="pulse config manifest to write")
    _flag(p, "mode", choices=["aidx-a", "aidx-p"])
    _flag(p, "lambda1", type=float, help="amplitude ratio L2 weight (aidx-p)")
    _flag(p, "lambda2", type=float, help="width ratio L2 weight (aidx-p)")
    _flag(p, "horizon", type=int, help="simulated reads per objective evaluation")
    _flag(p, "trial_seeds", type=int, nargs="+")
    _flag(p, "tol", type=float)
    _flag(p, "max_iter", type=int)
    _flag(p, "method", choices=["aggregate", "replay", "auto"])
    _flag(p, "variation", type=float)
    _flag(p, "variation_mode", choices=list(VARIATION_MODES))
    _flag(p, "ratio_min", type=float)
    _flag(p, "ratio_max", type=float)

    p = command("benchmark", "paired baseline/AIDX inference trajectories")
    _flag(p, "workload", help="workload.json path or bundled name")
    _flag(p, "manifest", help="pulse config manifest (default: identity pulses)")
    _flag(p, "out_dir")
    _flag(p, "total_ops", type=int)
    _flag(p, "checkpoint_every", type=int)
    _flag(p, "seeds", type=int, help="number of device/stream seeds, starting at --seed")
    _flag(p, "lifetime_fraction", type=float)
    _flag(p, "variation", type=float)
    _flag(p, "variation_mode", choices=list(VARIATION_MODES))
    p.add_argument("--no-heatmaps", dest="heatmaps", action="store_false", default=argparse.SUPPRESS)

    p = command("drift-demo", "single devices under random read sequences, with and without AIDX")
    _flag(p, "out")
    _flag(p, "n_pulses", type=int)
    _flag(p, "checkpoint_every", type=int)
    _flag(p, "g0", type=float, help="initial conductance in siemens")
    _flag(p, "base_amplitude", type=float)
    _flag(p, "base_width", type=float)
    _flag(p, "skews", type=float, nargs="+", help="probability of a positive input, one per device")
    return ap


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then flags."""
    cfg = dict(COMMON)
    cfg.update(DEFAULTS[command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        section = doc.get(command, {})
        flat = {k: v for k, v in doc.items() if k not in DEFAULTS}
        for source in (flat, section):
            unknown = sorted(set(source) - set(cfg))
            if unknown:
                raise ConfigError(f"unknown {command} settings in config: {', '.join(unknown)}")
            cfg.update(source)
    for key, value in vars(args).items():
        if key in cfg:
            cfg[key] = value
    return cfg


# -- loading and validation ----------------------------------------------------

def load_device(path) -> DeviceParams:
    if path is None:
        text = resources.files("memdrift").joinpath("data/tiox_device.json").read_text()
        return DeviceParams.from_dict(json.loads(text))
    try:
        return DeviceParams.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise ConfigError(f"cannot read device file {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad device file {path}: {exc}") from None


def bundled_path(name: str):
    return resources.files("memdrift").joinpath(f"data/workloads/{name}/workload.json")


def load_workload(ref: str) -> Workload:
    path = Path(ref)
    if not path.exists() and ref in BUNDLED_WORKLOADS:
        with resources.as_file(bundled_path(ref)) as p:
            return Workload.load(p)
    if path.is_dir():
        path = path / "workload.json"
    if not path.exists():
        raise ConfigError(f"workload {ref!r} is neither a file nor one of {sorted(BUNDLED_WORKLOADS)}")
    try:
        return Workload.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load workload {path}: {exc}") from None


def load_manifest(path, workload: Workload) -> list[PulseConfig]:
    try:
        doc = json.loads(Path(path).read_text())
        cfgs = [PulseConfig.from_dict(d) for d in doc["layers"]]
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad manifest {path}: {exc}") from None
    if len(cfgs) != len(workload.specs):
        raise ConfigError(f"manifest has {len(cfgs)} layers, workload has {len(workload.specs)}")
    for cfg, spec in zip(cfgs, workload.specs):
        cfg.for_rows(spec.weights.shape[0] + 1)
    return cfgs


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _positive_int(cfg, *keys):
    for k in keys:
        _require(isinstance(cfg[k], int) and not isinstance(cfg[k], bool) and cfg[k] >= 1,
                 f"{k} must be a positive integer")


def comment_line(command: str, cfg: dict) -> str:
    return f"memdrift {__version__} {command} seed={cfg['seed']}"


def write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_json(path, doc):
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------
# Each prepare_* validates its settings and returns the simulation step, so
# configuration problems surface before any work starts.

def prepare_sweep(cfg):
    params = load_device(cfg["device"])
    _positive_int(cfg, "points_per_branch")
    _require(cfg["noise"] >= 0, "noise must be >= 0")
    _require(cfg["dwell_set"] > 0 and cfg["dwell_reset"] > 0, "dwell times must be positive")
    _require(0.0 <= cfg["w0"] <= 1.0, "w0 must lie in [0, 1]")

    def run():
        data = synthetic_sweep(params, points_per_branch=cfg["points_per_branch"], w0=cfg["w0"],
                               dwell_set=cfg["dwell_set"], dwell_reset=cfg["dwell_reset"],
                               noise=cfg["noise"], seed=cfg["seed"])
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        data.to_csv(cfg["out"], comment_line("sweep", cfg))
        return {"points": int(data.voltage.size)}
    return run


def prepare_fit(cfg):
    params = load_device(cfg["device"])
    _positive_int(cfg, "temperatures", "proposals", "refine_iter")
    _require(0.0 < cfg["cooling"] < 1.0, "cooling must lie in (0, 1)")
    try:
        if cfg["iv"] is None:
            with resources.as_file(resources.files("memdrift").joinpath("data/tiox_sweep.csv")) as p:
                data = IVData.from_csv(p)
        else:
            data = IVData.from_csv(cfg["iv"])
    except OSError as exc:
        raise ConfigError(f"cannot read I-V file: {exc.strerror}") from None
    check_sweep(data, params)

    def run():
        fitted, report = fit_subthreshold(data, params, seed=cfg["seed"], temperatures=cfg["temperatures"],
                                          proposals=cfg["proposals"], cooling=cfg["cooling"],
                                          refine_iter=cfg["refine_iter"])
        write_json(cfg["out"], fitted.to_dict())
        return {"anneal_objective": report.anneal_objective, "refined_objective": report.refined_objective}
    return run


def prepare_workload(cfg):
    _require(cfg["name"] in BUNDLED_WORKLOADS, f"unknown workload {cfg['name']!r}")

    def run():
        wl = BUNDLED_WORKLOADS[cfg["name"]](seed=cfg["seed"])
        path = wl.save(cfg["out_dir"])
        return {"manifest": str(path), "software_metric": wl.software_metric()}
    return run


def prepare_optimize(cfg):
    params = load_device(cfg["device"])
    wl = load_workload(cfg["workload"])
    _positive_int(cfg, "horizon", "max_iter")
    _require(len(cfg["trial_seeds"]) > 0, "need at least one trial seed")
    _require(cfg["variation"] >= 0, "variation must be >= 0")
    _require(cfg["variation_mode"] in VARIATION_MODES, f"variation_mode must be one of {VARIATION_MODES}")
    try:
        settings = OptimizeSettings(
            mode=cfg["mode"], lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], horizon_k=cfg["horizon"],
            trial_seeds=tuple(cfg["trial_seeds"]), tol=cfg["tol"], max_iter=cfg["max_iter"],
            method=cfg["method"], ratio_min=cfg["ratio_min"], ratio_max=cfg["ratio_max"],
            variation=cfg["variation"], variation_mode=cfg["variation_mode"])
        identity_configs(wl, settings.ratio_min, settings.ratio_max)[0].validate(params.read_limit)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    def run():
        cfgs, reports = optimize_workload(wl, params, settings, seed=cfg["seed"])
        write_json(cfg["out"], {
            "tool": f"memdrift {__version__}",
            "workload": wl.name,
            "run_config": cfg,
            "layers": [c.to_dict() for c in cfgs],
            "reports": [r.to_dict() for r in reports],
        })
        return {"selected": [r.selected for r in reports],
                "objective": [r.selected_objective for r in reports]}
    return run


def prepare_benchmark(cfg):
    params = load_device(cfg["device"])
    wl = load_workload(cfg["workload"])
    _positive_int(cfg, "total_ops", "checkpoint_every", "seeds")
    _require(cfg["total_ops"] >= cfg["checkpoint_every"], "total_ops must be >= checkpoint_every")
    _require(0.0 < cfg["lifetime_fraction"] <= 1.0, "lifetime_fraction must lie in (0, 1]")
    _require(cfg["variation"] >= 0, "variation must be >= 0")
    _require(cfg["variation_mode"] in VARIATION_MODES, f"variation_mode must be one of {VARIATION_MODES}")
    if cfg["manifest"] is None:
        cfgs = identity_configs(wl)
    else:
        cfgs = load_manifest(cfg["manifest"], wl)
    try:
        for c in cfgs:
            c.validate(params.read_limit)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seeds = tuple(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))

    def run():
        res = benchmark(wl, params, cfgs, total_ops=cfg["total_ops"], checkpoint_every=cfg["checkpoint_every"],
                        seeds=seeds, lifetime_fraction=cfg["lifetime_fraction"], variation=cfg["variation"],
                        variation_mode=cfg["variation_mode"], keep_states=cfg["heatmaps"])
        out = Path(cfg["out_dir"])
        note = comment_line("benchmark", cfg)
        base_csv = res.baseline.to_csv("baseline", note)
        aidx_csv = res.aidx.to_csv("aidx").split("\n", 1)[1]
        write_text(out / "trajectories.csv", base_csv + aidx_csv)
        write_text(out / "summary.csv", _summary_csv(res, note))
        for name, maps in res.heatmaps.items():
            for i, dG in enumerate(maps):
                write_text(out / f"delta_g_layer{i}_{name}.csv",
                           heatmap_csv(dG, cfg["total_ops"], f"{note} config={name} layer={i}"))
        summary = {
            "metric": res.baseline.metric,
            "baseline_final": float(res.baseline.series[-1]),
            "aidx_final": float(res.aidx.series[-1]),
            "baseline_lifetime_ops": res.baseline.lifetime_ops,
            "aidx_lifetime_ops": res.aidx.lifetime_ops,
            "lifetime_ratio": res.lifetime_ratio if res.baseline.metric == "accuracy" else None,
        }
        write_json(out / "summary.json", {"tool": f"memdrift {__version__}", "run_config": cfg, **summary})
        return summary
    return run


def _summary_csv(res, note: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op_count", "metric", "baseline", "aidx"])
    for k, b, a in zip(res.baseline.ops, res.baseline.series, res.aidx.series):
        w.writerow([int(k), res.baseline.metric, f"{b:.12g}", f"{a:.12g}"])
    return buf.getvalue()


def prepare_drift_demo(cfg):
    params = load_device(cfg["device"])
    _positive_int(cfg, "n_pulses", "checkpoint_every")
    _require(cfg["n_pulses"] >= cfg["checkpoint_every"], "n_pulses must be >= checkpoint_every")
    _require(isinstance(cfg["skews"], list) and len(cfg["skews"]) > 0
             and all(0.0 <= s <= 1.0 for s in cfg["skews"]), "skews must be probabilities in [0, 1]")
    _require(params.g_min <= cfg["g0"] <= params.g_max, "g0 must lie within the device conductance range")
    _require(cfg["base_width"] > 0, "base_width must be positive")
    _require(0.0 <= cfg["base_amplitude"] < params.read_limit, "base_amplitude must stay below threshold")

    def run():
        ops, traces, tuned = drift_demo(params, n_pulses=cfg["n_pulses"], g0=cfg["g0"],
                                        base_amplitude=cfg["base_amplitude"], base_width=cfg["base_width"],
                                        skews=cfg["skews"], checkpoint_every=cfg["checkpoint_every"],
                                        seed=cfg["seed"])
        buf = io.StringIO()
        buf.write(f"# {comment_line('drift-demo', cfg)}\n")
        for i, (skew, c) in enumerate(zip(cfg["skews"], tuned)):
            buf.write(f"# device {i}: skew={skew:g} A={c.amplitude_ratio[0]:.6g} D={c.width_ratio[0]:.6g} "
                      f"a={c.inversion_fraction:.6g}\n")
        n = len(cfg["skews"])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["op_count"] + [f"g_{name}_{i}_s" for name in ("baseline", "aidx") for i in range(n)]
                   + ["g_baseline_mean_s", "g_aidx_mean_s"])
        for c, k in enumerate(ops):
            row = [int(k)] + [f"{traces[name][i, c]:.12g}" for name in ("baseline", "aidx") for i in range(n)]
            row += [f"{traces[name][:, c].mean():.12g}" for name in ("baseline", "aidx")]
            w.writerow(row)
        write_text(cfg["out"], buf.getvalue())
        return {"baseline_final_mean": float(traces["baseline"][:, -1].mean()),
                "aidx_final_mean": float(traces["aidx"][:, -1].mean())}
    return run


PREPARE = {
    "sweep": prepare_sweep,
    "fit": prepare_fit,
    "workload": prepare_workload,
    "optimize": prepare_optimize,
    "benchmark": prepare_benchmark,
    "drift-demo": prepare_drift_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
        run = PREPARE[args.command](cfg)
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"memdrift {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        summary = run()
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"memdrift {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
