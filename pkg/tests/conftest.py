import numpy as np
import pytest

from sphere_shadow.dynamics import SystemParams
from sphere_shadow.shadow import ChainSpec, solve
from sphere_shadow.skeleton import build_graph, periodic_words

SWEEP = [1e-2, 3e-3, 1e-3, 3e-4]
ALPHABET = [(1, 1, 1), (3, 2, 1)]


@pytest.fixture(scope="session")
def params0():
    return SystemParams(eps=0.0, h=0.0)


@pytest.fixture(scope="session")
def graph2(params0):
    return build_graph(0.0, 2, params0)


@pytest.fixture(scope="session")
def chain11(graph2):
    return ChainSpec.from_word(graph2, [(1, 1, 1)])


@pytest.fixture(scope="session")
def sweep_shadows(chain11, params0):
    return {eps: solve(chain11, eps, params0) for eps in SWEEP}


@pytest.fixture(scope="session")
def word_shadows(graph2, params0):
    out = []
    for word, sign in periodic_words(graph2, ALPHABET, 4):
        chain = ChainSpec.from_word(graph2, word, start_sign=sign)
        out.append((chain, solve(chain, 1e-3, params0)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
