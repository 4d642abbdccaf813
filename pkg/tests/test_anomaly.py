import datetime

import numpy as np
from numpy.testing import assert_allclose
import pandas as pd
import pytest

from conftest import observation_table
from phenoquant import errors
from phenoquant.analysis.anomaly import (
    AnomalyConfig,
    AnomalyTable,
    MergeRule,
    ascii_grid,
    case_study,
    daily_fraction,
    pixel_fraction,
    score,
    score_table,
    seasonal_fraction,
    snapshot_map,
)
from phenoquant.model.curve import PhenologyParams, QuantileCurveSet
from phenoquant.model.features import NdviObservation


def flat(level: float) -> PhenologyParams:
    return PhenologyParams(level, level, 0.3, -2.0, 0.7, -2.0)


QUARTILES = QuantileCurveSet(flat(0.25), flat(0.5), flat(0.75))


def observation(ndvi: float) -> NdviObservation:
    return NdviObservation(1, datetime.date(2020, 6, 1), 152 / 366, ndvi)


def scored(rows, quartiles=(0.25, 0.5, 0.75), config=AnomalyConfig()) -> AnomalyTable:
    observations = observation_table(rows)
    return score_table(observations, np.tile(quartiles, (len(observations), 1)), config)


class TestScore:
    def test_threshold_is_strict(self):
        at_threshold = score(observation(-0.5), QUARTILES)
        assert at_threshold.score == pytest.approx(-1.5)
        assert not at_threshold.is_negative_anomaly

        below = score(observation(-0.51), QUARTILES)
        assert below.score == pytest.approx(-1.52)
        assert below.is_negative_anomaly

    def test_score_is_relative_to_lower_quartile(self):
        record = score(observation(0.5), QUARTILES)
        assert record.score == pytest.approx(0.5)
        assert record.iqr == pytest.approx(0.5)
        assert record.usable

    def test_narrow_range_is_unusable(self):
        narrow = QuantileCurveSet(flat(0.5), flat(0.5), flat(0.5005))
        with pytest.warns(errors.UnusableIQRWarning):
            record = score(observation(-0.1), narrow)
        assert np.isnan(record.score)
        assert not record.usable and not record.is_negative_anomaly

    def test_positive_anomalies(self):
        config = AnomalyConfig(positive=True)
        assert score(observation(1.6), QUARTILES, config).is_positive_anomaly
        assert not score(observation(1.5), QUARTILES, config).is_positive_anomaly
        assert not score(observation(1.6), QUARTILES).is_positive_anomaly
        wider = AnomalyConfig(positive=True, positive_margin=2.0)
        assert not score(observation(1.6), QUARTILES, wider).is_positive_anomaly

    def test_table_agrees_with_single_scores(self):
        values = [-0.51, -0.5, 0.1, 1.6]
        table = scored([(1, f"2020-06-0{i + 1}", v) for i, v in enumerate(values)], config=AnomalyConfig(positive=True))
        for record, value in zip(table, values):
            single = score(observation(value), QUARTILES, AnomalyConfig(positive=True))
            assert record.score == pytest.approx(single.score)
            assert record.is_negative_anomaly == single.is_negative_anomaly
            assert record.is_positive_anomaly == single.is_positive_anomaly
        assert table.flag.tolist() == [True, False, False, False]
        assert table.positive.tolist() == [False, False, False, True]

    def test_table_marks_unusable_rows(self):
        with pytest.warns(errors.UnusableIQRWarning):
            table = scored([(1, "2020-06-01", -3.0)], quartiles=(0.4, 0.4, 0.4))
        assert not table.usable[0] and not table.flag[0]
        assert np.isnan(table.score[0])

    def test_frame_round_trip(self):
        table = scored([(1, "2020-06-01", -0.6), (2, "2020-06-02", 0.3)])
        frame = table.frame()
        assert frame["flag"].tolist() == [1, 0]
        again = AnomalyTable.from_frame(frame.astype(str))
        assert_allclose(again.score, table.score)
        assert again.flag.tolist() == [True, False]
        assert (again.date == table.date).all()


@pytest.fixture
def records():
    # Pixel 1 is flagged on both June dates, pixel 2 on the first only, pixel 3 never
    return scored([
        (1, "2020-06-01", -0.6), (2, "2020-06-01", -0.7), (3, "2020-06-01", 0.5),
        (1, "2020-06-11", -0.8), (2, "2020-06-11", 0.4), (3, "2020-06-11", 0.5),
        (1, "2020-12-15", 0.5), (1, "2021-01-15", -0.6), (3, "2021-04-01", 0.5),
    ])


class TestAggregation:
    def test_daily_fraction(self, records):
        daily = daily_fraction(records)
        june_first = records.bucket[0]
        assert daily.usable[june_first] == 3
        assert daily.fraction[june_first] == pytest.approx(2 / 3)
        assert np.isnan(daily.fraction[0])
        assert daily.overall == pytest.approx(4 / 9)
        assert daily.per_date["fraction"].tolist()[:2] == pytest.approx([2 / 3, 1 / 3])
        assert daily.frame().shape == (366, 5)

    def test_december_belongs_to_the_next_winter(self, records):
        seasons = seasonal_fraction(records).set_index(["year", "season"])
        assert seasons.loc[(2021, "winter"), "usable"] == 2
        assert seasons.loc[(2021, "winter"), "fraction"] == pytest.approx(0.5)
        assert seasons.loc[(2020, "summer"), "flagged"] == 3
        assert seasons.loc[(2021, "spring"), "fraction"] == 0.0

    def test_pixel_fraction(self, records):
        result = pixel_fraction(records)
        per_pixel = result.per_pixel.set_index("pixel_id")["fraction"]
        assert per_pixel.to_dict() == pytest.approx({1: 0.75, 2: 0.5, 3: 0.0})
        histogram = result.histogram
        assert len(histogram) == 100
        assert histogram.loc[75, "pixels"] == 1
        assert histogram.loc[50, "pixels"] == 1
        assert histogram.loc[0, "pixels"] == 1
        summary = result.summary()
        assert summary["pixels"] == 3 and summary["excluded"] == 0
        assert summary["share_without_anomaly"] == pytest.approx(1 / 3)

    def test_fraction_of_one_lands_in_the_last_bin(self):
        result = pixel_fraction(scored([(1, "2020-06-01", -1.0)]))
        assert result.histogram["pixels"].iloc[-1] == 1

    def test_pixels_without_usable_records_are_excluded(self):
        with pytest.warns(errors.UnusableIQRWarning):
            table = scored([(1, "2020-06-01", 0.1)], quartiles=(0.3, 0.3, 0.3))
        result = pixel_fraction(table)
        assert result.excluded == 1
        assert result.summary()["pixels"] == 0
        assert daily_fraction(table).overall is None

    @pytest.mark.parametrize("merge, expected", [(MergeRule.ANY, [1, 1, 0]), (MergeRule.ALL, [1, 0, 0])])
    def test_snapshot_merge(self, records, merge, expected):
        window = (datetime.date(2020, 6, 1), datetime.date(2020, 6, 30))
        snapshot = snapshot_map(records, window, merge)
        assert snapshot["pixel_id"].tolist() == [1, 2, 3]
        assert snapshot["flag"].tolist() == expected
        assert snapshot["dates"].tolist() == [2, 2, 2]
        assert snapshot["score"].iloc[0] == pytest.approx(-2.1)

    def test_snapshot_from_date_list(self, records):
        snapshot = snapshot_map(records, [datetime.date(2020, 6, 11)])
        assert snapshot["flag"].tolist() == [1, 0, 0]

    def test_ascii_grid(self, records):
        snapshot = snapshot_map(records, (datetime.date(2020, 6, 1), datetime.date(2020, 6, 30)))
        coords = pd.DataFrame({"pixel_id": [1, 2, 3, 4], "row": [0, 0, 1, 1], "col": [0, 1, 0, 1]})
        text = ascii_grid(snapshot, coords, column="flag")
        lines = text.splitlines()
        assert lines[:2] == ["ncols 2", "nrows 2"]
        assert lines[-2:] == ["1 1", "0 -9999"]


class TestCaseStudy:
    def test_series_per_area(self, records):
        series = case_study(records, affected=[1, 2], control=[3])
        affected = series.area("affected")
        assert affected["date"].tolist()[:2] == ["2020-06-01", "2020-06-11"]
        assert affected["fraction"].tolist()[:2] == [1.0, 0.5]
        assert affected["pixels"].tolist()[0] == 2
        control = series.area("control")
        assert control["fraction"].eq(0.0).all()
        assert control["median"].tolist()[0] == pytest.approx(0.5)

    def test_empty_set(self, records):
        with pytest.raises(errors.EmptyInputError):
            case_study(records, affected=[], control=[3])
