import numpy as np
import pytest

from hmeglm.expfam import bernoulli, exponential, gaussian, poisson, truncated_exponential, truncated_poisson

ALL_FAMILIES = [
    gaussian(1.0),
    gaussian(0.5),
    poisson(),
    truncated_poisson(5),
    truncated_poisson(30),
    bernoulli(),
    exponential(),
    truncated_exponential(3.0),
]


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def family_id(fam):
    return str(fam)
