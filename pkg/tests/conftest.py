import numpy as np
import pytest

from envshift.synthgen import ScenarioConfig, generate_scenario

# (criterion id, passed, detail) lines recorded by the acceptance suite
ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE_LINES.append((criterion, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_LINES:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {criterion}: {detail}")


@pytest.fixture(scope="session")
def small_cfg():
    return ScenarioConfig(regime="D", n_train_envs=3, n_test_envs=2, samples_per_env=40, seed=7)


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return generate_scenario(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
