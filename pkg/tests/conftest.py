import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from dxtk import synth

torch.set_num_threads(1)
settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture(scope="session")
def slide_task():
    return synth.gen_task(synth.MotionFamily("Slide", 0.1, 60), synth.square(0.06), seed=3, task_id="slide")


@pytest.fixture(scope="session")
def lift_task():
    return synth.gen_task(synth.MotionFamily("GraspLift", 0.15, 120), synth.square(0.06), seed=7, task_id="lift")


@pytest.fixture(scope="session")
def small_library():
    return synth.gen_library(8, 1, synth.default_families(), synth.default_geometries())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria: one summary line each at the end of the run

_ACCEPTANCE = {}


def _criterion(nodeid):
    name = nodeid.rsplit("::", 1)[-1]
    return int(name.split("_")[2]) if name.startswith("test_criterion_") else None


@pytest.fixture
def acceptance(request):
    """``acceptance(detail)`` attaches the measured numbers to this criterion's summary line."""
    def record(detail):
        _ACCEPTANCE.setdefault(request.node.nodeid, {})["detail"] = detail
        print(f"criterion {_criterion(request.node.nodeid)}: {detail}")
    return record


def pytest_runtest_logreport(report):
    if _criterion(report.nodeid) is None:
        return
    if report.when == "call" or report.failed:
        _ACCEPTANCE.setdefault(report.nodeid, {})["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE, key=_criterion):
        entry = _ACCEPTANCE[nodeid]
        terminalreporter.write_line(
            f"criterion {_criterion(nodeid):>2}: {entry.get('outcome', 'FAIL')}  {entry.get('detail', '')}")
