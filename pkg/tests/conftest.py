import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from wasd.model import PlantedModelSpec, ToyTransformerConfig, build_planted_model, build_toy_transformer
from wasd.suites import load_planted_suite

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"
CONFIGS = ROOT / "configs"

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def toy():
    return build_toy_transformer(ToyTransformerConfig(seed=42))


@pytest.fixture(scope="session")
def small_toy():
    return build_toy_transformer(ToyTransformerConfig(vocab_size=8, d_model=8, mlp_hidden=4, max_context=8, seed=3))


@pytest.fixture(scope="session")
def planted_suite():
    return load_planted_suite(DATA / "planted_suite.json")


@pytest.fixture
def planted2():
    # two planted neurons, thresholds high enough that few prompts meet both
    spec = PlantedModelSpec(vocab_size=10, neuron_count=6, planted_set=((1, 0.7), (4, 0.6)), target_token=3, seed=11)
    return build_planted_model(spec)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
