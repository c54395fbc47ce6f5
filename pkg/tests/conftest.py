import json

import numpy as np
import pytest

from memdrift import cli
from memdrift.device import DeviceParams, tiox_params

ACCEPTANCE = {
    1: "device-model oracles",
    2: "variation statistics",
    3: "optimizer suite",
    4: "drift-balance oracle",
    5: "inversion fraction",
    6: "MLP drift mitigation",
    7: "autoencoder drift mitigation",
    8: "regularised trade-off",
    9: "differential cancellation",
    10: "layer error diagnostic",
    11: "fitting round trip",
    12: "benchmark reproducibility",
}

_results: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one acceptance verdict; printed in the terminal summary."""
    def _record(number: int, passed: bool, detail: str) -> bool:
        _results[number] = (bool(passed), detail)
        return bool(passed)
    return _record


def pytest_collection_modifyitems(config, items):
    config._acceptance_selected = any(item.path.name == "test_acceptance.py" for item in items)


def pytest_terminal_summary(terminalreporter, config):
    if not getattr(config, "_acceptance_selected", False):
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE.items():
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {title}")


@pytest.fixture(scope="session")
def params() -> DeviceParams:
    return tiox_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_workload():
    return cli.load_workload("blob-mlp")


@pytest.fixture(scope="session")
def digits_workload():
    return cli.load_workload("digits-ae")


@pytest.fixture(scope="session")
def blob_manifest(tmp_path_factory):
    """AIDX-A pulse configs for the bundled MLP, produced through the CLI."""
    out = tmp_path_factory.mktemp("optimize") / "manifest.json"
    code = cli.main(["optimize", "--workload", "blob-mlp", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def blob_manifest_doc(blob_manifest):
    return json.loads(blob_manifest.read_text())
