"""Shared fixtures: one small simulated dataset and fitted chains per model."""

import pytest

from secrsel.mcmc import McmcConfig, fit
from secrsel.model import ModelId
from secrsel.simulate import Scenario, simulate_dataset

from test_simulate import small_design


@pytest.fixture(scope="session")
def busy_data():
    """Small, information-rich dataset (several captured, some unlinked rows)."""
    scenario = Scenario("busy", 0.3, 0.8, 0.4, 0.25)
    return simulate_dataset(scenario, small_design(), seed=11)


@pytest.fixture(scope="session")
def busy_chains(busy_data):
    """Short real chains for every model on the shared dataset."""
    data, _ = busy_data
    cfg = dict(n_iter=900, burn_in=300, seed=5)
    return {model: fit(model, data, McmcConfig(**cfg)) for model in ModelId}
