import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ivgae import tensor as T
from ivgae.dataio import CATEGORICAL, CONTINUOUS, ColumnSchema, Dataset

settings.register_profile("ci", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def clean_tape():
    T.active_tape().reset()
    yield
    T.active_tape().reset()


def make_dataset(cont: np.ndarray, cats: dict[str, tuple[np.ndarray, int]] | None = None) -> Dataset:
    """Continuous columns x0.. from ``cont`` followed by the given categorical columns."""
    cont = np.atleast_2d(np.asarray(cont, dtype=float))
    schema = [ColumnSchema(f"x{j}", CONTINUOUS) for j in range(cont.shape[1])]
    cols = [cont]
    for name, (codes, c) in (cats or {}).items():
        schema.append(ColumnSchema(name, CATEGORICAL, tuple(f"k{m}" for m in range(c))))
        cols.append(np.asarray(codes, dtype=float)[:, None])
    return Dataset(tuple(schema), np.hstack(cols))


@pytest.fixture
def small_mixed():
    from ivgae.synth import mixed_type

    return mixed_type(40, n_continuous=3, n_categorical=2, n_categories=3, seed=1)
