import sys
from pathlib import Path

import pytest

from promptbo.annotator import BackendConfig, Prompt, SimulatedBackend
from promptbo.bench import BASE_SEED, default_oracle, synthetic_examples
from promptbo.dataset import partition
from promptbo.scorer import Scorer

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_RESULTS = []


@pytest.fixture
def oracle():
    return default_oracle(0)


@pytest.fixture
def backend(oracle):
    return SimulatedBackend(oracle, BackendConfig(rng_seed=0))


@pytest.fixture
def scorer(backend):
    return Scorer(backend)


@pytest.fixture
def examples():
    return synthetic_examples(200, seed=3)


@pytest.fixture
def part(examples):
    return partition(examples, 40, 30, rng_seed=1)


@pytest.fixture
def base_prompt():
    return Prompt(BASE_SEED)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d} {name}: {detail}")
