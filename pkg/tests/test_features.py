import datetime
import math

import numpy as np
from numpy.testing import assert_allclose
import pytest

from conftest import make_record
from phenoquant import errors
from phenoquant.misc.const import MaskFlag, RejectReason
from phenoquant.model.features import (
    FeatureMatrix,
    ObservationTable,
    PreprocessorState,
    RawObservation,
    apply_preprocessor,
    filter_observations,
    filter_table,
    fit_preprocessor,
)

FEATURES = ("vegetation_height", "forest_mix_rate", "elevation", "eastness", "northness")
DAY = datetime.date(2020, 7, 1)


def raw(ndvi=0.5, ndsi=0.0, mask=MaskFlag(0)):
    return RawObservation(1, DAY, ndvi, ndsi, mask)


class TestQualityFilter:
    def test_clean_observation_is_retained(self):
        result = filter_observations([raw()])
        assert len(result.retained) == 1
        assert result.retained[0].t == pytest.approx(182 / 366)
        assert not result.tally

    @pytest.mark.parametrize("observation, reason", [
        (raw(mask=MaskFlag.NO_DATA | MaskFlag.CLOUD), RejectReason.NO_DATA),
        (raw(mask=MaskFlag.CLOUD | MaskFlag.TERRAIN_SHADOW), RejectReason.CLOUD),
        (raw(mask=MaskFlag.CLOUD_SHADOW), RejectReason.CLOUD_SHADOW),
        (raw(mask=MaskFlag.TERRAIN_SHADOW, ndsi=0.9), RejectReason.TERRAIN_SHADOW),
        (raw(ndsi=0.43, ndvi=2.0), RejectReason.SNOW),
        (raw(ndvi=1.0000001), RejectReason.OUTLIER),
        (raw(ndvi=-0.1000001), RejectReason.OUTLIER),
    ])
    def test_first_failing_rule_is_counted(self, observation, reason):
        result = filter_observations([observation])
        assert result.retained == []
        assert result.tally == {reason: 1}

    def test_boundaries_are_retained(self):
        result = filter_observations([raw(ndvi=-0.1), raw(ndvi=1.0), raw(ndsi=0.4299)])
        assert len(result.retained) == 3

    def test_malformed_records_are_reported(self):
        bad = RawObservation(2, DAY, math.nan)
        result = filter_observations([raw(), bad])
        assert len(result.retained) == 1
        assert result.tally[RejectReason.MALFORMED] == 1
        assert [i for i, _ in result.errors] == [1]

    def test_columnwise_filter_agrees(self):
        ndvi = np.array([0.5, 0.5, 0.5, 1.5, 0.3])
        ndsi = np.array([0.0, 0.5, 0.0, 0.0, 0.0])
        mask = np.array([0, 0, int(MaskFlag.CLOUD), 0, 0])
        dates = np.array(["2020-07-01"] * 4 + ["NaT"], dtype="datetime64[D]")
        with pytest.warns(errors.MalformedRecordWarning):
            table, tally = filter_table(np.arange(5), dates, ndvi, ndsi, mask)
        assert table.pixel_id.tolist() == [0]
        assert tally == {
            RejectReason.SNOW: 1, RejectReason.CLOUD: 1, RejectReason.OUTLIER: 1, RejectReason.MALFORMED: 1
        }


class TestObservationTable:
    def test_normalised_days(self):
        table = ObservationTable.from_columns(
            [1, 1, 1], np.array(["2020-01-01", "2020-12-31", "2021-12-31"], dtype="datetime64[D]"), [0.1] * 3
        )
        assert_allclose(table.t, [0.0, 365 / 366, 364 / 365])
        assert table.bucket.tolist() == [0, 365, 364]

    def test_sorted_by_pixel_then_date(self):
        table = ObservationTable.from_columns(
            [2, 1, 2], np.array(["2020-03-01", "2020-05-01", "2020-01-01"], dtype="datetime64[D]"), [0.1, 0.2, 0.3]
        ).sorted_by_pixel()
        assert table.pixel_id.tolist() == [1, 2, 2]
        assert table.ndvi.tolist() == [0.2, 0.3, 0.1]

    def test_mismatched_columns(self):
        with pytest.raises(errors.ShapeMismatchError):
            ObservationTable(np.zeros(2, dtype=np.int64), np.zeros(1, dtype="datetime64[D]"), np.zeros(2), np.zeros(2))


class TestPreprocessor:
    def test_moments_and_imputation(self):
        corpus = [make_record(i) for i in range(1, 5)]
        corpus.append(make_record(5, continuous={"vegetation_height": None, "forest_mix_rate": math.nan}))
        state = fit_preprocessor(corpus, FEATURES)

        heights = np.array([21.0, 22.0, 23.0, 24.0])
        mixes = np.array([0.1, 0.2, 0.3, 0.4])
        assert state.means[0] == pytest.approx(heights.mean())
        assert state.stds[0] == pytest.approx(heights.std())
        assert state.impute_values[0] == pytest.approx(heights.mean())
        assert state.impute_values[1] == pytest.approx(np.median(mixes))

        features = apply_preprocessor(state, corpus)
        assert features[-1].continuous[0] == pytest.approx(0.0)
        assert features[-1].continuous[1] == pytest.approx((np.median(mixes) - mixes.mean()) / mixes.std())

    def test_constant_feature_warns(self):
        corpus = [make_record(i) for i in range(1, 4)]
        with pytest.warns(errors.DegenerateFeatureWarning):
            state = fit_preprocessor(corpus, FEATURES)
        assert state.stds[FEATURES.index("eastness")] == 1.0

    def test_unseen_categories_map_to_unknown(self):
        state = fit_preprocessor([make_record(1), make_record(2, species_id="fagus")], FEATURES)
        assert state.species_codes == ("Unknown", "fagus", "picea")
        assert state.habitat_codes == ("Unknown", "forest", "meadow")

        unseen = make_record(3, species_id="larix", habitat_counts={"meadow": 30, "bog": 10})
        (features,) = apply_preprocessor(state, [unseen])
        assert features.species_id == 0
        assert features.habitat_weights == {0: pytest.approx(0.25), 2: pytest.approx(0.75)}

    def test_category_lookups_are_built_once(self):
        state = fit_preprocessor([make_record(1), make_record(2, species_id="fagus")], FEATURES)
        lookup = state._species_lookup
        assert [state.species_index(code) for code in ("fagus", "picea", "larix", None)] == [1, 2, 0, 0]
        assert state._species_lookup is lookup
        assert state.habitat_index("meadow") == 2
        assert state._habitat_lookup is state._habitat_lookup

    def test_habitat_weights_sum_to_one(self):
        state = fit_preprocessor([make_record(i) for i in range(1, 4)], FEATURES)
        empty = make_record(9, habitat_counts={})
        for features in apply_preprocessor(state, [make_record(4), empty]):
            assert sum(features.habitat_weights.values()) == pytest.approx(1.0)

    def test_invalid_records_are_skipped(self):
        state = fit_preprocessor([make_record(i) for i in range(1, 4)], FEATURES)
        skipped = []
        too_many = make_record(7, habitat_counts={"meadow": 101})
        bad_aspect = make_record(8, continuous={"eastness": 1.5})
        with pytest.warns(errors.MalformedRecordWarning):
            features = apply_preprocessor(state, [make_record(1), too_many, bad_aspect], skipped=skipped)
        assert [f.pixel_id for f in features] == [1]
        assert skipped == [7, 8]

    def test_empty_corpus(self):
        with pytest.raises(errors.EmptyInputError):
            fit_preprocessor([], FEATURES)

    def test_feature_missing_everywhere(self):
        with pytest.raises(errors.MissingFeatureError):
            fit_preprocessor([make_record(1)], (*FEATURES, "twi"))

    def test_state_round_trips_through_dict(self):
        state = fit_preprocessor([make_record(i) for i in range(1, 4)], FEATURES)
        assert PreprocessorState.from_dict(state.to_dict()) == state
        with pytest.raises(errors.CheckpointError):
            PreprocessorState.from_dict({"means": []})


class TestFeatureMatrix:
    def test_stacking_and_lookup(self):
        state = fit_preprocessor([make_record(i) for i in range(1, 6)], FEATURES)
        matrix = FeatureMatrix.from_features(
            apply_preprocessor(state, [make_record(i) for i in (5, 3, 1)]), state.n_continuous, state.n_habitats
        )
        assert matrix.continuous.shape == (3, len(FEATURES))
        assert_allclose(matrix.habitat.sum(axis=1), 1.0)
        assert matrix.index_of(np.array([1, 5, 1])).tolist() == [2, 0, 2]
        assert matrix.row(1).pixel_id == 3
        with pytest.raises(KeyError):
            matrix.index_of(np.array([4]))
