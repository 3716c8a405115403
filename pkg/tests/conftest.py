import numpy as np
import pytest

from gnio.synth import random_sequence, synth_generate

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)


WALK_SEGMENTS = [
    {"kind": "stationary", "duration": 2.0},
    {"kind": "walk", "duration": 20.0, "speed": 1.2, "step_freq": 1.8, "bob": 0.04, "surge": 0.1, "turn_rate": 0.1},
    {"kind": "arc_turn", "duration": 10.0, "radius": 3.0, "speed": 1.0},
    {"kind": "walk", "duration": 26.0, "speed": 1.0, "step_freq": 1.6, "bob": 0.03},
]


@pytest.fixture(scope="session")
def short_walk():
    """12 s noiseless walk at 100 Hz."""
    segs = [{"kind": "stationary", "duration": 2.0},
            {"kind": "walk", "duration": 8.0, "speed": 1.0, "step_freq": 1.6, "bob": 0.03, "turn_rate": 0.2}]
    return synth_generate(segs, rate=100.0, seed=0, tilt=(0.05, -0.03))


@pytest.fixture(scope="session")
def noisy_short():
    return random_sequence(77, duration=20.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
