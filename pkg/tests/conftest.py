import time

import pytest

from voxpigment.calib import synth_pigment_set
from voxpigment.gamut import build_color_lut, build_rhok_lut

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def default_set():
    return synth_pigment_set("default")


@pytest.fixture(scope="session")
def absorber_set():
    return synth_pigment_set("absorber-heavy")


@pytest.fixture(scope="session")
def flat_set():
    return synth_pigment_set("flat-absorber")


@pytest.fixture(scope="session")
def lut33(default_set):
    """33^3 colour LUT of the default set, with its build time in seconds."""
    t0 = time.perf_counter()
    lut = build_color_lut(default_set, 33)
    return lut, time.perf_counter() - t0


@pytest.fixture(scope="session")
def rhok_lut(default_set):
    return build_rhok_lut(default_set)


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary."""
    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
