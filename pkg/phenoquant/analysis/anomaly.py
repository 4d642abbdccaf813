"""
Anomaly scoring and its aggregations.

An observation ``y`` at normalised day ``t`` scores
``(y - f25(t)) / (f75(t) - f25(t))``. Scores strictly below the threshold
(-1.5 by default) mark a negative anomaly. Where the interquartile range
falls below a floor the score is undefined and the record is kept as
unusable: it is never flagged and left out of every fraction.
"""
from collections.abc import Iterable, Iterator
import dataclasses
import datetime
import enum
import logging
from typing import Self
from warnings import warn

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from .. import errors
from ..misc.const import (
    ANOMALY_THRESHOLD,
    HISTOGRAM_BIN_WIDTH,
    IQR_FLOOR,
    N_DAY_BUCKETS,
    QUANTILES,
    ROLLING_WINDOW,
    Season,
)
from ..misc.days import day_bucket
from ..model.curve import QuantileCurveSet, evaluate
from ..model.features import NdviObservation, ObservationTable
from .metrics import circular_rolling_mean

__all__ = (
    "AnomalyConfig",
    "AnomalyRecord",
    "AnomalyTable",
    "DailyFraction",
    "PixelFraction",
    "MergeRule",
    "CaseStudySeries",
    "score",
    "score_table",
    "daily_fraction",
    "seasonal_fraction",
    "pixel_fraction",
    "snapshot_map",
    "ascii_grid",
    "case_study",
)

_LOWER, _UPPER = QUANTILES.index(0.25), QUANTILES.index(0.75)


@dataclasses.dataclass(frozen=True)
class AnomalyConfig:
    """
    :param threshold: :class:`float` Scores strictly below flag a negative anomaly
    :param iqr_floor: :class:`float` Smallest usable interquartile range
    :param positive: :class:`bool` Also flag ``y > f75 + positive_margin * IQR``
    """
    threshold: float = ANOMALY_THRESHOLD
    iqr_floor: float = IQR_FLOOR
    positive: bool = False
    positive_margin: float = 1.5

    def __post_init__(self):
        if self.iqr_floor <= 0:
            raise ValueError("iqr_floor must be positive")
        if self.positive_margin < 0:
            raise ValueError("positive_margin must not be negative")


@dataclasses.dataclass(frozen=True)
class AnomalyRecord:
    """The score of one observation with the quantile values behind it

    :param score: :class:`float` NaN when the record is unusable
    :param usable: :class:`bool` The interquartile range reached the floor
    """
    pixel_id: int
    date: datetime.date
    score: float
    is_negative_anomaly: bool
    f25: float
    f75: float
    iqr: float
    usable: bool
    is_positive_anomaly: bool = False


def score(
        observation: NdviObservation,
        curves: QuantileCurveSet,
        config: AnomalyConfig=AnomalyConfig()
) -> AnomalyRecord:
    """Score one observation against the quantile curves of its pixel"""
    f25 = float(evaluate(curves.lower, observation.t))
    f75 = float(evaluate(curves.upper, observation.t))
    iqr = f75 - f25
    if iqr < config.iqr_floor:
        warn(f"pixel {observation.pixel_id}: IQR {iqr:.3g} below floor", errors.UnusableIQRWarning)
        return AnomalyRecord(observation.pixel_id, observation.date, np.nan, False, f25, f75, iqr, False)
    value = (observation.ndvi - f25) / iqr
    return AnomalyRecord(
        observation.pixel_id,
        observation.date,
        value,
        value < config.threshold,
        f25,
        f75,
        iqr,
        True,
        config.positive and observation.ndvi > f75 + config.positive_margin * iqr,
    )


@dataclasses.dataclass(frozen=True)
class AnomalyTable:
    """Scored observations held column-wise"""
    pixel_id: NDArray[np.int64]
    date: NDArray[np.datetime64]
    t: NDArray[np.float64]
    ndvi: NDArray[np.float64]
    score: NDArray[np.float64]
    flag: NDArray[np.bool_]
    positive: NDArray[np.bool_]
    usable: NDArray[np.bool_]
    f25: NDArray[np.float64]
    f75: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.pixel_id)

    def __iter__(self) -> Iterator[AnomalyRecord]:
        for i in range(len(self)):
            yield AnomalyRecord(
                int(self.pixel_id[i]),
                self.date[i].astype(datetime.date),
                float(self.score[i]),
                bool(self.flag[i]),
                float(self.f25[i]),
                float(self.f75[i]),
                float(self.f75[i] - self.f25[i]),
                bool(self.usable[i]),
                bool(self.positive[i]),
            )

    @property
    def bucket(self) -> NDArray[np.int64]:
        return day_bucket(self.t)

    def take(self, index) -> Self:
        return type(self)(*(getattr(self, f.name)[index] for f in dataclasses.fields(self)))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "pixel_id": self.pixel_id,
            "date": np.datetime_as_string(self.date, unit="D"),
            "t": self.t,
            "ndvi": self.ndvi,
            "score": self.score,
            "flag": self.flag.astype(np.int8),
            "positive": self.positive.astype(np.int8),
            "usable": self.usable.astype(np.int8),
            "f25": self.f25,
            "f75": self.f75,
        })

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> Self:
        """Inverse of :meth:`frame`; normalised days are taken as written"""
        def numbers(column, dtype=np.float64):
            return pd.to_numeric(frame[column]).to_numpy(dtype=dtype)

        return cls(
            numbers("pixel_id", np.int64),
            pd.to_datetime(frame["date"], format="%Y-%m-%d").to_numpy(dtype="datetime64[D]"),
            numbers("t"),
            numbers("ndvi"),
            pd.to_numeric(frame["score"], errors="coerce").to_numpy(dtype=np.float64),
            numbers("flag", np.int8).astype(bool),
            numbers("positive", np.int8).astype(bool),
            numbers("usable", np.int8).astype(bool),
            numbers("f25"),
            numbers("f75"),
        )

    @classmethod
    def from_records(cls, records: Iterable[AnomalyRecord], t: ArrayLike, ndvi: ArrayLike) -> Self:
        records = list(records)
        return cls(
            np.array([r.pixel_id for r in records], dtype=np.int64),
            np.array([r.date for r in records], dtype="datetime64[D]"),
            np.asarray(t, dtype=np.float64),
            np.asarray(ndvi, dtype=np.float64),
            np.array([r.score for r in records], dtype=np.float64),
            np.array([r.is_negative_anomaly for r in records], dtype=bool),
            np.array([r.is_positive_anomaly for r in records], dtype=bool),
            np.array([r.usable for r in records], dtype=bool),
            np.array([r.f25 for r in records], dtype=np.float64),
            np.array([r.f75 for r in records], dtype=np.float64),
        )


def score_table(
        observations: ObservationTable,
        quartiles: ArrayLike,
        config: AnomalyConfig=AnomalyConfig()
) -> AnomalyTable:
    """Vectorised :func:`score`

    :param observations: :class:`ObservationTable`
    :param quartiles: Predicted quantiles at every observation, shape ``(n, 3)``
    """
    quartiles = np.asarray(quartiles, dtype=np.float64).reshape(len(observations), len(QUANTILES))
    f25 = quartiles[:, _LOWER]
    f75 = quartiles[:, _UPPER]
    iqr = f75 - f25
    usable = iqr >= config.iqr_floor
    if not usable.all():
        warn(
            f"{int((~usable).sum())} observations have an IQR below {config.iqr_floor}",
            errors.UnusableIQRWarning
        )
    scores = np.full(len(observations), np.nan)
    scores[usable] = (observations.ndvi[usable] - f25[usable]) / iqr[usable]
    flag = usable & (np.where(usable, scores, 0.0) < config.threshold)
    positive = np.zeros(len(observations), dtype=bool)
    if config.positive:
        positive = usable & (observations.ndvi > f75 + config.positive_margin * iqr)
    logging.info(
        "Scored %d observations: %d flagged, %d unusable",
        len(observations), int(flag.sum()), int((~usable).sum())
    )
    return AnomalyTable(
        observations.pixel_id,
        observations.date,
        observations.t,
        observations.ndvi,
        scores,
        flag,
        positive,
        usable,
        f25,
        f75,
    )


def _ratio(flagged, usable) -> NDArray[np.float64]:
    flagged = np.asarray(flagged, dtype=np.float64)
    usable = np.asarray(usable, dtype=np.float64)
    return np.divide(flagged, usable, out=np.full(flagged.shape, np.nan), where=usable > 0)


@dataclasses.dataclass(frozen=True)
class DailyFraction:
    """Share of usable records flagged, per day of the year and per date

    :param fraction: :class:`NDArray` shape ``(366,)``, NaN for buckets without usable records
    :param rolling: :class:`NDArray` Circular rolling mean of ``fraction``
    :param overall: :class:`float|None` Flagged over usable across all records
    :param per_date: :class:`DataFrame` Columns ``date, flagged, usable, fraction``
    """
    flagged: NDArray[np.int64]
    usable: NDArray[np.int64]
    fraction: NDArray[np.float64]
    rolling: NDArray[np.float64]
    overall: float|None
    per_date: pd.DataFrame

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bucket": np.arange(N_DAY_BUCKETS),
            "flagged": self.flagged,
            "usable": self.usable,
            "fraction": self.fraction,
            "rolling": self.rolling,
        })


def _per_date(records: AnomalyTable) -> pd.DataFrame:
    frame = pd.DataFrame({
        "date": np.datetime_as_string(records.date, unit="D"),
        "flagged": records.flag & records.usable,
        "usable": records.usable,
    })
    grouped = frame.groupby("date", sort=True)[["flagged", "usable"]].sum().reset_index()
    grouped["fraction"] = _ratio(grouped["flagged"], grouped["usable"])
    return grouped


def daily_fraction(records: AnomalyTable, window: int=ROLLING_WINDOW) -> DailyFraction:
    """Anomalous share of usable records per day bucket and per acquisition date"""
    buckets = records.bucket
    usable = np.bincount(buckets[records.usable], minlength=N_DAY_BUCKETS)
    flagged = np.bincount(buckets[records.flag & records.usable], minlength=N_DAY_BUCKETS)
    fraction = _ratio(flagged, usable)
    total = int(usable.sum())
    overall = None if total == 0 else int(flagged.sum()) / total
    return DailyFraction(
        flagged,
        usable,
        fraction,
        circular_rolling_mean(fraction, window),
        overall,
        _per_date(records),
    )


def seasonal_fraction(records: AnomalyTable) -> pd.DataFrame:
    """
    Anomalous share per meteorological season.

    December counts towards the winter of the following year, so a winter
    row spans December to February.
    """
    dates = pd.to_datetime(np.datetime_as_string(records.date, unit="D"))
    seasons = [str(Season.of(d)) for d in dates]
    year = dates.year.to_numpy() + (dates.month.to_numpy() == 12)
    frame = pd.DataFrame({
        "year": year,
        "season": seasons,
        "flagged": records.flag & records.usable,
        "usable": records.usable,
    })
    grouped = frame.groupby(["year", "season"], sort=True)[["flagged", "usable"]].sum().reset_index()
    grouped["fraction"] = _ratio(grouped["flagged"], grouped["usable"])
    return grouped


@dataclasses.dataclass(frozen=True)
class PixelFraction:
    """Per-pixel anomalous share and its distribution

    :param per_pixel: :class:`DataFrame` Columns ``pixel_id, flagged, usable, fraction``
    :param histogram: :class:`DataFrame` Columns ``lower, upper, pixels`` with bins of width 0.01
    :param excluded: :class:`int` Pixels without a usable record
    """
    per_pixel: pd.DataFrame
    histogram: pd.DataFrame
    excluded: int

    def summary(self) -> dict:
        fractions = self.per_pixel["fraction"].to_numpy()
        if fractions.size == 0:
            return {"pixels": 0, "excluded": self.excluded, "share_without_anomaly": None,
                    "mean": None, "p99": None}
        return {
            "pixels": int(fractions.size),
            "excluded": self.excluded,
            "share_without_anomaly": float((fractions == 0).mean()),
            "mean": float(fractions.mean()),
            "p99": float(np.percentile(fractions, 99)),
        }


def pixel_fraction(records: AnomalyTable, bin_width: float=HISTOGRAM_BIN_WIDTH) -> PixelFraction:
    """Share of each pixel's usable records that were flagged"""
    frame = pd.DataFrame({
        "pixel_id": records.pixel_id,
        "flagged": records.flag & records.usable,
        "usable": records.usable,
    })
    grouped = frame.groupby("pixel_id", sort=True)[["flagged", "usable"]].sum().reset_index()
    empty = grouped["usable"] == 0
    excluded = int(empty.sum())
    if excluded:
        logging.info("Excluding %d pixels without usable records", excluded)
    grouped = grouped[~empty].reset_index(drop=True)
    grouped["fraction"] = grouped["flagged"] / grouped["usable"]

    n_bins = round(1.0 / bin_width)
    # Nudge keeps exact multiples of the bin width out of the bin below
    bins = np.clip(np.floor(grouped["fraction"].to_numpy() / bin_width + 1e-9), 0, n_bins - 1).astype(np.int64)
    edges = np.arange(n_bins + 1) * bin_width
    histogram = pd.DataFrame({
        "lower": edges[:-1],
        "upper": edges[1:],
        "pixels": np.bincount(bins, minlength=n_bins),
    })
    return PixelFraction(grouped, histogram, excluded)


class MergeRule(enum.Enum):
    ANY = "any"
    """Flagged if flagged on any date of the window"""
    ALL = "all"
    """Flagged only if flagged on every usable date of the window"""

    def __str__(self) -> str:
        return self.value


def snapshot_map(
        records: AnomalyTable,
        window: tuple[datetime.date, datetime.date]|Iterable[datetime.date],
        merge: MergeRule=MergeRule.ANY
) -> pd.DataFrame:
    """Merge the records of a date window into one state per pixel

    :param window: An inclusive ``(first, last)`` date pair or a collection of dates
    :param merge: :class:`MergeRule`

    Returns
    -------
    :class:`DataFrame`
        Columns ``pixel_id, flag, score, dates``; ``score`` is the most
        negative usable score in the window, NaN if there is none
    """
    dates = records.date
    if isinstance(window, tuple) and len(window) == 2:
        first, last = np.datetime64(window[0], "D"), np.datetime64(window[1], "D")
        inside = (dates >= first) & (dates <= last)
    else:
        inside = np.isin(dates, np.array(list(window), dtype="datetime64[D]"))
    chosen = records.take(inside)

    frame = pd.DataFrame({
        "pixel_id": chosen.pixel_id,
        "flag": chosen.flag & chosen.usable,
        "usable": chosen.usable,
        "score": np.where(chosen.usable, chosen.score, np.nan),
    })
    grouped = frame.groupby("pixel_id", sort=True)
    flagged = grouped["flag"].sum()
    usable = grouped["usable"].sum()
    if merge is MergeRule.ANY:
        flag = flagged > 0
    else:
        flag = (usable > 0) & (flagged == usable)
    return pd.DataFrame({
        "pixel_id": flagged.index.to_numpy(dtype=np.int64),
        "flag": flag.to_numpy().astype(np.int8),
        "score": grouped["score"].min().to_numpy(),
        "dates": grouped.size().to_numpy(),
    })


def ascii_grid(
        snapshot: pd.DataFrame,
        coords: pd.DataFrame,
        column: str="score",
        nodata: float=-9999.0
) -> str:
    """
    Render a snapshot column on the raster given by ``coords`` (``pixel_id,
    row, col``). The first line after the header block is the top row.
    Cells without a value hold ``nodata``.
    """
    located = coords.merge(snapshot[["pixel_id", column]], on="pixel_id", how="left")
    if located.empty:
        raise errors.EmptyInputError("No pixel of the snapshot has a grid position")
    row0, col0 = int(located["row"].min()), int(located["col"].min())
    n_rows = int(located["row"].max()) - row0 + 1
    n_cols = int(located["col"].max()) - col0 + 1
    grid = np.full((n_rows, n_cols), nodata, dtype=np.float64)
    values = located[column].to_numpy(dtype=np.float64)
    values = np.where(np.isnan(values), nodata, values)
    grid[located["row"].to_numpy() - row0, located["col"].to_numpy() - col0] = values

    lines = [
        f"ncols {n_cols}",
        f"nrows {n_rows}",
        f"xllcorner {col0}",
        f"yllcorner {row0}",
        "cellsize 1",
        f"NODATA_value {nodata:g}",
    ]
    lines += [" ".join(f"{v:.6g}" for v in row) for row in grid]
    return "\n".join(lines) + "\n"


@dataclasses.dataclass(frozen=True)
class CaseStudySeries:
    """Score distribution and anomalous share per date, for two pixel sets

    :param frame: :class:`DataFrame` Columns ``area, date, pixels, q25, median, q75, fraction``
    """
    frame: pd.DataFrame

    def area(self, name: str) -> pd.DataFrame:
        return self.frame[self.frame["area"] == name].reset_index(drop=True)


def case_study(
        records: AnomalyTable,
        affected: ArrayLike,
        control: ArrayLike
) -> CaseStudySeries:
    """Per acquisition date, score percentiles and anomalous share of each area

    Dates on which an area has no usable record are left out for that area.

    Raises
    ------
    :class:`EmptyInputError`
        One of the pixel sets is empty
    """
    parts = []
    for name, pixels in (("affected", affected), ("control", control)):
        pixels = np.unique(np.asarray(pixels, dtype=np.int64))
        if pixels.size == 0:
            raise errors.EmptyInputError(f"The {name} pixel set is empty")
        members = np.isin(records.pixel_id, pixels) & records.usable
        frame = pd.DataFrame({
            "date": np.datetime_as_string(records.date[members], unit="D"),
            "score": records.score[members],
            "flag": records.flag[members],
        })
        grouped = frame.groupby("date", sort=True)
        part = pd.DataFrame({
            "pixels": grouped.size(),
            "q25": grouped["score"].quantile(0.25),
            "median": grouped["score"].median(),
            "q75": grouped["score"].quantile(0.75),
            "fraction": grouped["flag"].mean(),
        }).reset_index()
        part.insert(0, "area", name)
        parts.append(part)
    frame = pd.concat(parts, ignore_index=True)
    frame["fraction"] = frame["fraction"].astype(np.float64)
    return CaseStudySeries(frame)
