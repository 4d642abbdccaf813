"""
Goodness of fit of quantile predictions.

The report mirrors the usual quantile-model table: pinball loss, the share
of a reference model's pinball loss that is explained (D²), empirical
coverage, and point metrics of the median. Undefined values are
:const:`None` (NaN inside per-day arrays), never 0.
"""
from collections.abc import Mapping
import dataclasses
import enum
import json
import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from .. import errors
from ..misc.const import N_DAY_BUCKETS, QUANTILES, ROLLING_WINDOW, SCHEMA_VERSION
from ..model.features import ObservationTable

__all__ = (
    "MedianMode",
    "MedianMetrics",
    "PerDaySkill",
    "FitReport",
    "pinball_loss",
    "circular_rolling_mean",
    "evaluate",
    "per_day_skill",
    "summary_frame",
)


class MedianMode(enum.Enum):
    """How the median point metrics are formed"""
    OBSERVATION = "observation"
    """Every observation against the predicted median at its day"""
    DAY_MEDIAN = "day_median"
    """Per day bucket, the observed median against the mean predicted median"""

    def __str__(self) -> str:
        return self.value


def pinball_loss(y: ArrayLike, predictions: ArrayLike, quantiles=QUANTILES) -> NDArray[np.float64]:
    """Per-observation pinball loss, shape ``(n, len(quantiles))``"""
    residual = np.asarray(y, dtype=np.float64)[:, None] - np.asarray(predictions, dtype=np.float64)
    levels = np.asarray(quantiles)
    return np.where(residual >= 0.0, levels * residual, (levels - 1.0) * residual)


def _skill(model: float, reference: float) -> float|None:
    return None if reference == 0.0 else 1.0 - model / reference


def circular_rolling_mean(values: ArrayLike, window: int=ROLLING_WINDOW) -> NDArray[np.float64]:
    """
    Centred rolling mean that wraps around the ends of the series.

    NaN entries are ignored; a window holding only NaN stays NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    half = window // 2
    if values.size == 0:
        return values.copy()
    padded = np.concatenate([values[-half:], values, values[:half]], axis=0) if half else values
    rolled = pd.DataFrame(padded.reshape(len(padded), -1)).rolling(window, center=True, min_periods=1).mean()
    return rolled.to_numpy()[half:half + len(values)].reshape(values.shape)


@dataclasses.dataclass(frozen=True)
class MedianMetrics:
    mode: MedianMode
    n: int
    mae: float
    rmse: float
    bias: float
    r2: float|None

    @classmethod
    def compute(cls, mode: MedianMode, observed: NDArray, predicted: NDArray) -> "MedianMetrics":
        residual = predicted - observed
        sst = float(((observed - observed.mean())**2).sum())
        sse = float((residual**2).sum())
        return cls(
            mode,
            len(observed),
            float(np.abs(residual).mean()),
            float(np.sqrt((residual**2).mean())),
            float(predicted.mean() - observed.mean()),
            None if sst == 0.0 else 1.0 - sse / sst,
        )

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "mode": self.mode.value}


@dataclasses.dataclass(frozen=True)
class PerDaySkill:
    """D² per day bucket against a climatology

    :param d2: :class:`NDArray` shape ``(366, 3)``, NaN where undefined
    :param rolling: :class:`NDArray` Circular 7-day rolling mean of ``d2``
    :param counts: :class:`NDArray` Observations per bucket
    """
    d2: NDArray[np.float64]
    rolling: NDArray[np.float64]
    counts: NDArray[np.int64]

    def frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"bucket": np.arange(N_DAY_BUCKETS), "n": self.counts})
        for k, q in enumerate(QUANTILES):
            frame[f"d2_q{round(q * 100)}"] = self.d2[:, k]
        for k, q in enumerate(QUANTILES):
            frame[f"d2_q{round(q * 100)}_rolling"] = self.rolling[:, k]
        return frame


@dataclasses.dataclass(frozen=True)
class FitReport:
    """Goodness of fit of one model against a named reference

    :param pinball: :class:`tuple[float, ...]` Mean pinball loss per quantile
    :param d2: :class:`tuple[float|None, ...]` Explained share of the reference's pinball loss
    :param coverage: :class:`tuple[float, ...]` Share of observations at or below each prediction
    :param median: :class:`dict[MedianMode, MedianMetrics]`
    :param per_day: :class:`PerDaySkill|None` Present when climatology predictions were given
    """
    model: str
    reference: str
    n_observations: int
    pinball: tuple[float, ...]
    reference_pinball: tuple[float, ...]
    d2: tuple[float|None, ...]
    coverage: tuple[float, ...]
    median: Mapping[MedianMode, MedianMetrics]
    per_day: PerDaySkill|None = None

    def to_dict(self) -> dict:
        document = {
            "model": self.model,
            "reference": self.reference,
            "n_observations": self.n_observations,
            "quantiles": list(QUANTILES),
            "pinball": list(self.pinball),
            "reference_pinball": list(self.reference_pinball),
            "d2": list(self.d2),
            "coverage": list(self.coverage),
            "median": {mode.value: m.to_dict() for mode, m in self.median.items()},
        }
        if self.per_day is not None:
            document["per_day_d2"] = [
                [None if np.isnan(v) else float(v) for v in row] for row in self.per_day.d2
            ]
        return document

    def to_json(self, command: str) -> str:
        document = {"schema_version": SCHEMA_VERSION, "command": command, **self.to_dict()}
        return json.dumps(document, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _as_ndvi(observations: ObservationTable|ArrayLike) -> NDArray[np.float64]:
    if isinstance(observations, ObservationTable):
        return observations.ndvi
    return np.asarray(observations, dtype=np.float64).reshape(-1)


def _bucket_medians(ndvi, predicted, buckets) -> tuple[NDArray, NDArray]:
    frame = pd.DataFrame({"bucket": buckets, "y": ndvi, "f": predicted})
    grouped = frame.groupby("bucket", sort=True)
    return grouped["y"].median().to_numpy(), grouped["f"].mean().to_numpy()


def evaluate(
        predictions: ArrayLike,
        reference_predictions: ArrayLike,
        observations: ObservationTable,
        *,
        climatology_predictions: ArrayLike|None=None,
        model: str="model",
        reference: str="reference"
) -> FitReport:
    """Compare aligned predictions with observations

    :param predictions: Model quartiles at every observation, shape ``(n, 3)``
    :param reference_predictions: Reference quartiles, shape ``(n, 3)``
    :param observations: :class:`ObservationTable`
    :param climatology_predictions: Climatology quartiles for the per-day skill
    :param model: :class:`str` Name of the model in the report
    :param reference: :class:`str` Name of the reference in the report

    Raises
    ------
    :class:`EmptyInputError`
        There are no observations
    :class:`ShapeMismatchError`
        Predictions and observations are not aligned
    """
    y = _as_ndvi(observations)
    if y.size == 0:
        raise errors.EmptyInputError("Cannot evaluate on an empty observation set")
    predictions = np.asarray(predictions, dtype=np.float64)
    reference_predictions = np.asarray(reference_predictions, dtype=np.float64)
    for name, array in (("model", predictions), ("reference", reference_predictions)):
        if array.shape != (len(y), len(QUANTILES)):
            raise errors.ShapeMismatchError(
                f"{name} predictions have shape {array.shape}, expected {(len(y), len(QUANTILES))}"
            )

    pinball = pinball_loss(y, predictions).mean(axis=0)
    reference_pinball = pinball_loss(y, reference_predictions).mean(axis=0)
    d2 = tuple(_skill(m, r) for m, r in zip(pinball, reference_pinball))
    if any(v is None for v in d2):
        logging.warning("Reference %s has zero pinball loss; D² is undefined", reference)
    coverage = tuple(float(v) for v in (y[:, None] <= predictions).mean(axis=0))

    median_index = QUANTILES.index(0.5)
    median = {
        MedianMode.OBSERVATION: MedianMetrics.compute(
            MedianMode.OBSERVATION, y, predictions[:, median_index]
        )
    }
    if isinstance(observations, ObservationTable):
        observed, predicted = _bucket_medians(y, predictions[:, median_index], observations.bucket)
        median[MedianMode.DAY_MEDIAN] = MedianMetrics.compute(MedianMode.DAY_MEDIAN, observed, predicted)

    per_day = None
    if climatology_predictions is not None:
        per_day = per_day_skill(predictions, climatology_predictions, observations)

    return FitReport(
        model,
        reference,
        len(y),
        tuple(float(v) for v in pinball),
        tuple(float(v) for v in reference_pinball),
        d2,
        coverage,
        median,
        per_day,
    )


def per_day_skill(
        predictions: ArrayLike,
        climatology_predictions: ArrayLike,
        observations: ObservationTable,
        window: int=ROLLING_WINDOW
) -> PerDaySkill:
    """D² against the climatology for each of the 366 day buckets

    Buckets without observations, or where the climatology has zero
    pinball loss, are NaN. The rolling mean wraps around the year end.
    """
    buckets = observations.bucket
    counts = np.bincount(buckets, minlength=N_DAY_BUCKETS)
    model_loss = pinball_loss(observations.ndvi, predictions)
    reference_loss = pinball_loss(observations.ndvi, climatology_predictions)

    d2 = np.full((N_DAY_BUCKETS, len(QUANTILES)), np.nan)
    for k in range(len(QUANTILES)):
        model_sum = np.bincount(buckets, weights=model_loss[:, k], minlength=N_DAY_BUCKETS)
        reference_sum = np.bincount(buckets, weights=reference_loss[:, k], minlength=N_DAY_BUCKETS)
        defined = (counts > 0) & (reference_sum > 0.0)
        d2[defined, k] = 1.0 - model_sum[defined] / reference_sum[defined]
    return PerDaySkill(d2, circular_rolling_mean(d2, window), counts)


def summary_frame(reports: list[FitReport]) -> pd.DataFrame:
    """One row per report and median mode, in the column layout of a fit table"""
    rows = []
    for report in reports:
        for mode, median in report.median.items():
            row = {"model": report.model, "reference": report.reference, "n": report.n_observations}
            for prefix, values in (
                    ("pinball", report.pinball), ("d2", report.d2), ("coverage", report.coverage)
            ):
                for q, value in zip(QUANTILES, values):
                    row[f"{prefix}_q{round(q * 100)}"] = value
            row.update({
                "mae": median.mae,
                "rmse": median.rmse,
                "bias": median.bias,
                "r2": median.r2,
                "median_mode": mode.value,
            })
            rows.append(row)
    return pd.DataFrame(rows)
