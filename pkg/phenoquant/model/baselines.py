"""
Reference quantile models that ignore pixel covariates.

The global baseline pools every observation into one set of quartiles, the
climatology baseline keeps one set per day of the year. Both use the linear
interpolation quantile definition (numpy's default, "type 7").
"""
from collections.abc import Mapping
import logging
from typing import Self

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .. import errors
from ..misc.const import N_DAY_BUCKETS, QUANTILES, ModelKind
from ..misc.days import day_bucket
from .base import BaseQuantileModel
from .features import ObservationTable

__all__ = (
    "GlobalBaseline",
    "ClimatologyBaseline",
    "fit_global",
    "fit_climatology",
    "predict",
)


def _ndvi_of(observations: ObservationTable|ArrayLike) -> NDArray[np.float64]:
    if isinstance(observations, ObservationTable):
        return observations.ndvi
    return np.asarray(observations, dtype=np.float64).reshape(-1)


class GlobalBaseline(BaseQuantileModel):
    """One day-independent value per quantile level

    :param values: Three quartile values in :data:`QUANTILES` order
    """

    kind = ModelKind.GLOBAL
    __slots__ = ("values",)

    def __init__(self, values: ArrayLike):
        self.values = np.asarray(values, dtype=np.float64).reshape(len(QUANTILES))
        if np.any(np.diff(self.values) < -1e-12):
            raise ValueError("Baseline quantiles must be non-decreasing")

    def __repr__(self):
        return f"{type(self).__name__}({self.values.tolist()!r})"

    def predict_at(self, t: ArrayLike) -> NDArray[np.float64]:
        t = np.asarray(t, dtype=np.float64)
        return np.broadcast_to(self.values, t.shape + (len(QUANTILES),)).copy()

    def predict_grid(self, features, t_grid):
        return self.predict_at(np.asarray(t_grid, dtype=np.float64).reshape(-1))[None]

    def to_dict(self) -> dict:
        return {"quantiles": list(QUANTILES), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, document: Mapping) -> Self:
        try:
            return cls(document["values"])
        except (KeyError, ValueError) as e:
            raise errors.CheckpointError(f"Global baseline entry is invalid: {e}") from e


class ClimatologyBaseline(BaseQuantileModel):
    """Quartile values per day bucket

    :param values: Array of shape ``(366, 3)``
    """

    kind = ModelKind.CLIMATOLOGY
    __slots__ = ("values",)

    def __init__(self, values: ArrayLike):
        self.values = np.asarray(values, dtype=np.float64).reshape(N_DAY_BUCKETS, len(QUANTILES))
        if np.any(np.diff(self.values, axis=1) < -1e-12):
            raise ValueError("Baseline quantiles must be non-decreasing in every bucket")

    def predict_at(self, t: ArrayLike) -> NDArray[np.float64]:
        return self.values[day_bucket(t)]

    def predict_grid(self, features, t_grid):
        return self.predict_at(np.asarray(t_grid, dtype=np.float64).reshape(-1))[None]

    def predict(self, observations, features=None):
        return self.values[observations.bucket]

    def to_dict(self) -> dict:
        return {"quantiles": list(QUANTILES), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, document: Mapping) -> Self:
        try:
            return cls(document["values"])
        except (KeyError, ValueError) as e:
            raise errors.CheckpointError(f"Climatology baseline entry is invalid: {e}") from e


def fit_global(observations: ObservationTable|ArrayLike) -> GlobalBaseline:
    """Pool all observations into one set of empirical quartiles

    Raises
    ------
    :class:`EmptyInputError`
        No observations were given
    """
    ndvi = _ndvi_of(observations)
    if ndvi.size == 0:
        raise errors.EmptyInputError("Cannot fit a baseline without observations")
    return GlobalBaseline(np.quantile(ndvi, QUANTILES))


def fit_climatology(observations: ObservationTable) -> ClimatologyBaseline:
    """Empirical quartiles per day bucket

    Buckets without observations are filled by linear interpolation between
    the nearest filled buckets on either side, wrapping around the year end.

    Raises
    ------
    :class:`EmptyInputError`
        No observations were given
    """
    if len(observations) == 0:
        raise errors.EmptyInputError("Cannot fit a baseline without observations")

    buckets = observations.bucket
    order = np.argsort(buckets, kind="stable")
    sorted_buckets = buckets[order]
    sorted_ndvi = observations.ndvi[order]
    filled = np.unique(sorted_buckets)
    starts = np.searchsorted(sorted_buckets, filled, side="left")
    ends = np.searchsorted(sorted_buckets, filled, side="right")

    known = np.array([
        np.quantile(sorted_ndvi[start:end], QUANTILES) for start, end in zip(starts, ends)
    ])
    values = np.empty((N_DAY_BUCKETS, len(QUANTILES)))
    values[filled] = known
    empty = np.setdiff1d(np.arange(N_DAY_BUCKETS), filled)
    if empty.size:
        logging.info("Climatology: interpolating %d empty day buckets", empty.size)
        for q in range(len(QUANTILES)):
            if filled.size == 1:
                values[empty, q] = known[0, q]
            else:
                values[empty, q] = np.interp(empty, filled, known[:, q], period=N_DAY_BUCKETS)
    return ClimatologyBaseline(values)


def predict(baseline: GlobalBaseline|ClimatologyBaseline, t: ArrayLike) -> NDArray[np.float64]:
    """Three quantile values per normalised day; the global baseline ignores ``t``"""
    return baseline.predict_at(t)
