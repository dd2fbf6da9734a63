import numpy as np
import pytest

from hbrl.world import DemandField, GridSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def single_hotspot(center, spread, grid=None, **kw):
    """Demand field with one hotspot, normalized on ``grid`` (or to its own peak)."""
    params = dict(drift_rate=1.0, drift_bound=75.0, trials=100, request_prob=0.05)
    params.update(kw)
    field = DemandField(np.array([center], dtype=float), np.array([spread], dtype=float), **params)
    if grid is not None:
        field.normalize_on(grid)
    return field


@pytest.fixture
def table_grid():
    return GridSpec(2000.0, 2000.0, 20.0)
