import numpy as np
import pytest

from blanketmh.distributions import Bernoulli, Categorical, Normal
from blanketmh.graph import Model, addr, random_variable


class SwitchModel(Model):
    """Open-universe toy: ``k`` picks which of two latent means feeds the observation."""

    name = "switch"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("k")])

    @random_variable
    def k(self, read):
        return Bernoulli(0.5)

    @random_variable
    def mu(self, read, i):
        return Normal(3.0 * i, 1.0)

    @random_variable
    def obs(self, read):
        return Normal(read("mu", int(read("k"))), 0.5)


class CountModel(Model):
    """Number of summed terms is itself random."""

    name = "count"

    def __init__(self, observations=None):
        super().__init__(observations, queries=[addr("n")])

    @random_variable
    def n(self, read):
        return Categorical((0.2, 0.3, 0.5))

    @random_variable
    def term(self, read, i):
        return Normal(0.0, 1.0)

    @random_variable
    def total(self, read):
        return Normal(sum(read("term", i) for i in range(read("n") + 1)), 0.3)


class SelfLoop(Model):
    @random_variable
    def a(self, read):
        return Normal(read("a"), 1.0)


class TwoCycle(Model):
    @random_variable
    def a(self, read):
        return Normal(read("b"), 1.0)

    @random_variable
    def b(self, read):
        return Normal(read("a"), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def switch_model():
    return SwitchModel({addr("obs"): 2.5})


@pytest.fixture
def count_model():
    return CountModel({addr("total"): 1.0})


# one "PASS/FAIL criterion N: ..." line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
