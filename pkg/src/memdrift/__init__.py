"""Memristance drift in crossbar inference accelerators, and pulse-level mitigation."""

from .device import DeviceParams, MemristorState, integrate_step, sample_variation, state_rate, tiox_params
from .crossbar import CrossbarArray, DifferentialWeightMap, program_weights, vmm_read
from .signal import PulseConfig, encode_input, expected_drift_rate, invert_fraction
from .optimizer import bfgs_minimize, fd_gradient, golden_section, nelder_mead_minimize
from .aidx import DriftObjective, aidx_preprocess, evaluate_e_drift, optimize_inversion
from .network import DenseSpec, forward_inference, layer_error_estimate, map_network, run_trajectory
from .fitting import IVData, fit_subthreshold, synthetic_sweep

__version__ = "0.1.0"

__all__ = [
    "CrossbarArray", "DenseSpec", "DeviceParams", "DifferentialWeightMap", "DriftObjective", "IVData",
    "MemristorState", "PulseConfig", "aidx_preprocess", "bfgs_minimize", "encode_input",
    "evaluate_e_drift", "expected_drift_rate", "fd_gradient", "fit_subthreshold", "forward_inference",
    "golden_section", "integrate_step", "invert_fraction", "layer_error_estimate", "map_network",
    "nelder_mead_minimize", "optimize_inversion", "program_weights", "run_trajectory",
    "sample_variation", "state_rate", "synthetic_sweep", "tiox_params", "vmm_read",
]
