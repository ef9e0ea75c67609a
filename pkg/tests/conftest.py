import time
from importlib import resources

import numpy as np
import pytest

from cctraj import pipeline
from cctraj.config import load_config

ACCEPTANCE_LINES: list[str] = []


def config_path(name: str):
    return resources.files("cctraj") / "data" / f"{name}.toml"


@pytest.fixture(scope="session")
def uniform_cfg():
    return load_config(config_path("dubins_uniform"))


@pytest.fixture(scope="session")
def mixture_cfg():
    return load_config(config_path("dubins_mixture"))


def _end_to_end(cfg):
    t0 = time.perf_counter()
    art = pipeline.run_calibration(cfg)
    problem, result = pipeline.plan(cfg, art)
    outcome = None
    if result.status != "infeasible":
        outcome = pipeline.simulate(cfg, result.trajectory, art)
    return {"art": art, "problem": problem, "result": result, "sim": outcome,
            "elapsed": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def e2e_uniform(uniform_cfg):
    return _end_to_end(uniform_cfg)


@pytest.fixture(scope="session")
def e2e_mixture(mixture_cfg):
    return _end_to_end(mixture_cfg)


@pytest.fixture(scope="session")
def baseline_mixture(mixture_cfg):
    return pipeline.run_baseline(mixture_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
