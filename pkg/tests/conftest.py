import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synthetic import write_dataset  # noqa: E402

_criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and report.passed:
        return
    num = dict(report.user_properties).get("criterion")
    if num is None:
        return
    prev = _criteria.get(num, "PASS")
    _criteria[num] = "PASS" if report.passed and prev == "PASS" else "FAIL"


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m:
        item.user_properties.append(("criterion", m.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        terminalreporter.write_line(f"criterion {num:>2}: {_criteria[num]}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def synthetic_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for name in ("mnist", "fashion_mnist", "cifar10"):
        write_dataset(root, name)
    return root


@pytest.fixture(scope="session")
def real_data_dir():
    return os.environ.get("MSVP_DATA_DIR")
