import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oodbench.datasets import SyntheticSpec, make_synthetic_benchmark
from oodbench.detectors import METHODS
from oodbench.evaluation import prepare_workbench
from oodbench.numeric import RngStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_SPEC = SyntheticSpec(n_per_class=100, n_per_out_partition=60)


@pytest.fixture(scope="session")
def small_bench():
    return make_synthetic_benchmark(SMALL_SPEC, RngStream(7).child("benchmark"))


@pytest.fixture(scope="session")
def small_workbench(small_bench):
    return prepare_workbench(small_bench, METHODS, seed=7, train_overrides={"epochs": 15})


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
