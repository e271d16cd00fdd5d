import numpy as np
import pytest

from ctxtransducer.cli import tiny_model_config
from ctxtransducer.context import Segment, Session, Utterance
from ctxtransducer.network import Transducer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Transducer.initialise(tiny_model_config(), seed=3)


def make_session(rng, lengths=(4, 5, 4), dim=3, vocab=3, sid="t"):
    utts = []
    for i, n in enumerate(lengths):
        labels = tuple(int(y) for y in rng.integers(1, vocab + 1, size=2))
        utts.append(Utterance(sid, i, rng.normal(size=(n, dim)), [Segment(1, n, labels)]))
    return Session(sid, utts)


@pytest.fixture
def tiny_session(rng):
    return make_session(rng)


# -- acceptance summary ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
