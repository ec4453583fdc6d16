from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from branchformer.train import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CONFIG = ROOT / "configs" / "seqclass_reference.json"

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# acceptance lines, appended by tests/test_acceptance.py and echoed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def reference_config() -> TrainConfig:
    return TrainConfig.from_json(REFERENCE_CONFIG)


class TrainedRuns:
    """Reference-config training runs, each trained once per session."""

    def __init__(self):
        self._cache = {}
        self.seconds = {}

    def get(self, attention: str = "mhsa", branch_dropout_p: float = 0.0, block_type: str = "branchformer"):
        key = (attention, branch_dropout_p, block_type)
        if key not in self._cache:
            base = reference_config()
            enc = base.encoder.replace(attention=attention, branch_dropout_p=branch_dropout_p, block_type=block_type)
            start = time.perf_counter()
            self._cache[key] = train(base.replace(encoder=enc), write=False)
            self.seconds[key] = time.perf_counter() - start
        return self._cache[key]


@pytest.fixture(scope="session")
def trained() -> TrainedRuns:
    return TrainedRuns()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
