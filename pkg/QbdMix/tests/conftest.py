from pathlib import Path

import pytest

from QbdMix.factorization import solve_level_dependent
from QbdMix.model import DenseChain, LevelBlocks, QbdModel, builtin_model, load_model

DATA = Path(__file__).resolve().parent.parent / "data"

FLEET_SEEDS = list(range(20))


@pytest.fixture(scope="session")
def bd():
    return builtin_model("bd", {"p": 0.2, "q": 0.4})


@pytest.fixture(scope="session")
def bd_f(bd):
    return solve_level_dependent(bd)


@pytest.fixture(scope="session")
def two_phase():
    return builtin_model("two_phase", {"rho": 0.5})


@pytest.fixture(scope="session")
def two_phase_f(two_phase):
    return solve_level_dependent(two_phase)


@pytest.fixture(scope="session")
def n3():
    return load_model(DATA / "two_phase_n3.json")


@pytest.fixture(scope="session")
def n3_f(n3):
    return solve_level_dependent(n3)


@pytest.fixture(scope="session")
def two_state():
    return DenseChain.from_matrix([[0.5, 0.5], [0.5, 0.5]])


@pytest.fixture(scope="session")
def fleet():
    return [builtin_model("random", {"levels": 3, "phases": 3, "seed": s}) for s in FLEET_SEEDS]


@pytest.fixture(scope="session", params=[0, 7, 13])
def random_model(request):
    model = builtin_model("random", {"levels": 3, "phases": 3, "seed": request.param})
    return model, solve_level_dependent(model)


@pytest.fixture(scope="session")
def sticky():
    """Level 0 holds with probability 0.999 under a tail with sp(R) = 0.9."""
    return QbdModel((1, 1, 1), [[0.999]], [[0.001]], (LevelBlocks([[0.5]], [[0.4]], [[0.1]]),),
                    LevelBlocks([[0.4]], [[0.24]], [[0.36]]), 2)


@pytest.fixture(scope="session")
def sticky_f(sticky):
    return solve_level_dependent(sticky)


@pytest.fixture(scope="session")
def two_level():
    """The 2-state chain a = b = 0.5 as a QBD whose tail never moves up."""
    return QbdModel((1, 1), [[0.5]], [[0.5]], (), LevelBlocks([[0.5]], [[0.5]], [[0.0]]), 1)
