import numpy as np
import pytest
import torch

from tracerbench.pipeline import preprocess
from tracerbench.refsolver import Scenario, simulate


def small_scenario(n_steps=60, n_lat=16, n_lon=32, n_lev=3, seed=0):
    return Scenario(
        n_lat=n_lat, n_lon=n_lon, n_lev=n_lev, n_steps=n_steps, seed=seed,
        winds=[{"scheme": "solid_body", "alpha": 0.0, "period_days": 64},
               {"scheme": "deformational", "period_days": 30, "amplitude": 0.15}],
        initial={"kind": "blobs", "background": 400.0,
                 "blobs": [{"lat": 20, "lon": 100, "amplitude": 5, "radius": 25}]},
    )


@pytest.fixture(scope="session")
def small_world():
    """Preprocessed ``(dataset, stats, audit)`` on a 16x32x3 grid."""
    return preprocess(simulate(small_scenario()))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
