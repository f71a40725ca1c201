import time

import pytest

from emso.lab import ExperimentConfig, build_pipeline

from helpers import ACCEPTANCE_LINES

TINY = {
    "synthetic_lines": 300,
    "n_forget": 10,
    "n_retain": 200,
    "n_val": 40,
    "n_prompts": 8,
    "base_epochs": 2,
    "target_ma": 0.9,
}


@pytest.fixture(scope="session")
def pipeline():
    """Default-size corpus, base model and theta_o memorized to MA >= 0.95."""
    t = time.process_time()
    p = build_pipeline(ExperimentConfig())
    p.build_cpu_seconds = time.process_time() - t
    return p


@pytest.fixture(scope="session")
def tiny_config():
    return ExperimentConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny(tiny_config):
    return build_pipeline(tiny_config)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
