import numpy as np
import pytest

from falcon_dp.schedule import schedule_from_betas


def schedule_with_abars(abars):
    """Build a schedule whose cumulative alpha products hit the given values."""
    abars = np.asarray(abars, dtype=np.float64)
    prev = np.concatenate(([1.0], abars[:-1]))
    betas = 1.0 - abars / prev
    return schedule_from_betas(betas)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
