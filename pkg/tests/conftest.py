import os
import time
from pathlib import Path

import numpy as np
import pytest

from agemort.config import RunConfig
from agemort.experiments import run_overdose, run_twin, synthetic_batches
from agemort.overdose import OverdoseParams

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).resolve().parents[1]

_ACCEPTANCE = []


def record_acceptance(number: int, title: str, passed: bool, detail: str):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} -- {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


def wonder_data_dir():
    """Directory with recorded CDC WONDER exports, if one is available."""
    env = os.environ.get("AGEMORT_WONDER_DIR")
    candidates = [Path(env)] if env else []
    candidates.append(REPO / "data" / "wonder")
    for path in candidates:
        if path.is_dir() and any(p.suffix in (".txt", ".tsv", ".csv") for p in path.iterdir()):
            return path
    return None


@pytest.fixture(scope="session")
def twin_runs():
    """Default twin experiment for seeds 0..4 with wall-clock time."""
    start = time.perf_counter()
    runs = [run_twin(RunConfig(seed=s).resolved("twin")) for s in range(5)]
    return runs, time.perf_counter() - start


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def reduced_profile(**overrides):
    """CI profile for the overdose filter: M=1000 and a 0.2-year step."""
    return RunConfig(ensemble_size=1000, delta_t=0.2, **overrides).resolved("forecast")


@pytest.fixture(scope="session")
def synthetic_forecast():
    """Reduced-profile forecast through 2023 on model-generated 1999-2020 deaths."""
    cfg = reduced_profile()
    obs = synthetic_batches(cfg, OverdoseParams(), range(cfg.first_year, cfg.last_year + 1), seed=11)
    start = time.perf_counter()
    res = run_overdose(cfg, obs, forecast=True)
    return res, obs, time.perf_counter() - start
