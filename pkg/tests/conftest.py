import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fbsde_game_lab import market_game as mg
from fbsde_game_lab.scenario import load_scenario

settings.register_profile(
    "lab", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("lab")


@pytest.fixture(scope="session")
def default_scenario():
    return load_scenario("default")


@pytest.fixture(scope="session")
def default_state(default_scenario):
    """The bundled desk-scale game, 20000 paths."""
    return mg.simulate_game(default_scenario)


@pytest.fixture(scope="session")
def fresh_state(default_scenario):
    """Independent sample of the same game, for oracles that must not share noise."""
    return mg.simulate_game(default_scenario.with_paths(seed=default_scenario.seed + 1))


@pytest.fixture(scope="session")
def small_state(default_scenario):
    return mg.simulate_game(default_scenario.with_paths(4000, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
