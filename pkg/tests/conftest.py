import time

import numpy as np
import pytest

from oodgate.config import RunConfig
from oodgate.pipeline import run

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The full default benchmark: 5 seeds, TinyConv, rho = 0.8. Runs once per session."""
    cfg = RunConfig.from_dict({}, out=str(tmp_path_factory.mktemp("default_run")))
    t0 = time.perf_counter()
    run("all", cfg)
    cfg.elapsed = time.perf_counter() - t0
    return cfg


SMALL_CONFIG = {
    "dataset": {"synthetic": {"train_per_class": 30, "id_test_per_class": 15, "ood_test_per_class": 15}},
    "train": {"epochs": 4},
    "seeds": [0, 1],
    "scoring": {"mc_samples": 8},
    "grids": {"odin": {"temperatures": [1.0, 1000.0], "epsilons": [0.0, 1e-3]}},
}
