import pytest

from _fixtures import CORRIDOR
from reachplan.scenario import load_scenario


@pytest.fixture
def corridor():
    return load_scenario(CORRIDOR)
