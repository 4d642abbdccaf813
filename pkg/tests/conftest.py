import datetime

import numpy as np
import pytest

from phenoquant.model.features import (
    FeatureMatrix,
    ObservationTable,
    RawPixelRecord,
    apply_preprocessor,
    fit_preprocessor,
)
from phenoquant.model.train import LossConfig, TrainConfig, TrainingSet
from phenoquant.synth import SynthConfig, generate

TINY_TRAIN = dict(epochs=2, batch_size=8, chunk_size=16, width=8, depth=2, skip_into=2)


def make_record(pixel_id: int, **overrides) -> RawPixelRecord:
    values = {
        "vegetation_height": 20.0 + pixel_id,
        "forest_mix_rate": 0.1 * (pixel_id % 10),
        "elevation": 500.0 + 10 * pixel_id,
        "eastness": 0.5,
        "northness": -0.5,
    }
    values.update(overrides.pop("continuous", {}))
    return RawPixelRecord(
        pixel_id,
        values,
        overrides.pop("species_id", "picea"),
        overrides.pop("habitat_counts", {"meadow": 60, "forest": 40}),
        **overrides,
    )


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SynthConfig(n_pixels=40, years=(2020,), cadence=7, dropout=0.2, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    state = fit_preprocessor(small_corpus.records)
    features = apply_preprocessor(state, small_corpus.records)
    matrix = FeatureMatrix.from_features(features, state.n_continuous, state.n_habitats)
    return state, TrainingSet.build(matrix, small_corpus.observation_table())


@pytest.fixture
def tiny_train_config():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def loss_config():
    return LossConfig()


def observation_table(rows) -> ObservationTable:
    """Observations from ``(pixel_id, "YYYY-MM-DD", ndvi)`` tuples"""
    pixel_id, dates, ndvi = zip(*rows) if rows else ((), (), ())
    return ObservationTable.from_columns(
        np.asarray(pixel_id, dtype=np.int64),
        np.array([datetime.date.fromisoformat(d) for d in dates], dtype="datetime64[D]"),
        np.asarray(ndvi, dtype=np.float64),
    )
