import math

import numpy as np
import pytest
from hypothesis import settings, strategies as st

from qspam.qcore import BlochVector
from qspam.spam_model import SpamParams

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_params(rng: np.random.Generator, epsilon: bool = True, phases: bool = True) -> SpamParams:
    """A valid parameter set away from the degenerate corners of the model."""
    am = rng.uniform(0.5, 0.995)
    lim = 1 - am
    dl = rng.uniform(-0.9 * lim, 0.9 * lim)
    theta = rng.uniform(0, math.acos(0.3))
    phi = rng.uniform(-math.pi, math.pi)
    r = rng.uniform(0.5, 1.0)
    a = BlochVector(r * math.sin(theta) * math.cos(phi), r * math.sin(theta) * math.sin(phi), r * math.cos(theta))
    eps = rng.uniform(0, 0.05) if epsilon else 0.0
    pp = rng.uniform(-math.pi, math.pi) if phases else 0.0
    return SpamParams(am, dl, a, eps, phi_pp=pp)


@st.composite
def spam_params(draw, epsilon: bool = True, phases: bool = True):
    am = draw(st.floats(0.5, 0.995))
    dl = draw(st.floats(-0.9, 0.9)) * (1 - am)
    theta = draw(st.floats(0, math.acos(0.3)))
    phi = draw(st.floats(-math.pi, math.pi))
    r = draw(st.floats(0.5, 1.0))
    a = BlochVector(r * math.sin(theta) * math.cos(phi), r * math.sin(theta) * math.sin(phi), r * math.cos(theta))
    eps = draw(st.floats(0, 0.05)) if epsilon else 0.0
    pp = draw(st.floats(-math.pi, math.pi)) if phases else 0.0
    return SpamParams(am, dl, a, eps, phi_pp=pp)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# parameter fixture used throughout: alpha_m 0.9, delta 0.05, alpha_sp (0.02, 0.01, 0.98)
@pytest.fixture
def ref_params():
    return SpamParams(0.9, 0.05, BlochVector(0.02, 0.01, 0.98))


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
