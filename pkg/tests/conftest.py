"""Shared small models and helpers for the test suite."""

import math

import pytest

from otfunif.model import ModelSpec, StateFactor, TimeFactor, TransitionClass
from otfunif.stepper import _plan_for


def klass(name, change, const, exponents, gmin=None, gmax=None, tf=None):
    n = len(change)
    return TransitionClass(
        name,
        tuple(gmin or (0,) * n),
        tuple(gmax or (None,) * n),
        tuple(change),
        tf or TimeFactor(),
        StateFactor(const, tuple(exponents)),
    )


def two_state(a=0.7, b=0.3, horizon=5.0):
    """One molecule switching between A and B; conservation keeps it finite."""
    classes = (
        klass("a_to_b", (-1, 1), a, (1, 0), (1, 0)),
        klass("b_to_a", (1, -1), b, (0, 1), (0, 1)),
    )
    return ModelSpec(("A", "B"), classes, (((1, 0), 1.0),), horizon, "two_state")


def bounded_pair(horizon=10.0):
    """Finite homogeneous 2-species model bounded by upper guards (11 x 11 states)."""
    classes = (
        klass("make_x", (1, 0), 1.0, (0, 0), gmax=(9, None)),
        klass("lose_x", (-1, 0), 0.1, (1, 0), (1, 0)),
        klass("make_y", (0, 1), 0.5, (1, 0), gmax=(None, 9)),
        klass("lose_y", (0, -1), 0.2, (0, 1), (0, 1)),
    )
    return ModelSpec(("X", "Y"), classes, (((0, 0), 1.0),), horizon, "bounded_pair")


def linear_cascade(horizon=10.0):
    """Linear rates with a growing inflow; moment equations are exact for it."""
    growth = TimeFactor(2.0, 0.2, math.inf, "affine")
    classes = (
        klass("inflow", (1, 0), 1.0, (0, 0), tf=growth),
        klass("decay_x", (-1, 0), 0.2, (1, 0), (1, 0)),
        klass("convert", (-1, 1), 0.1, (1, 0), (1, 0)),
        klass("decay_y", (0, -1), 0.1, (0, 1), (0, 1)),
    )
    return ModelSpec(("X", "Y"), classes, (((0, 0), 1.0),), horizon, "linear_cascade")


def pure_death(x0=10, rate=0.1, horizon=5.0):
    classes = (klass("death", (-1,), rate, (1,), (1,)),)
    return ModelSpec(("X",), classes, (((x0,), 1.0),), horizon, "pure_death")


def plan(spec, x_max, t, delta, epsilon=1e-10, R_star=5):
    return _plan_for(tuple(x_max), t, delta, epsilon, R_star, spec)


@pytest.fixture(scope="session")
def gene():
    from otfunif.model import gene_expression

    return gene_expression()


@pytest.fixture(scope="session")
def switch():
    from otfunif.model import exclusive_switch

    return exclusive_switch()


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
