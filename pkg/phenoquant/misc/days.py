"""Day-of-year normalisation.

A date maps to ``t = (day_of_year - 1) / days_in_year`` so that January 1
is 0 and December 31 stays below 1. Day buckets index the 366 possible days
of a year, bucket 365 only ever being filled by December 31 of a leap year.
"""
import calendar
import datetime

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .const import N_DAY_BUCKETS

__all__ = (
    "days_in_year",
    "normalize_date",
    "normalize_dates",
    "day_bucket",
    "bucket_grid",
)

# Guards floor() against t * 366 landing an ulp below an integer
_BUCKET_EPS = 1e-9


def days_in_year(year: int) -> int:
    return 366 if calendar.isleap(year) else 365


def normalize_date(date: datetime.date) -> float:
    """Normalised day of the year of a single date"""
    return (date.timetuple().tm_yday - 1) / days_in_year(date.year)


def normalize_dates(dates: ArrayLike) -> NDArray[np.float64]:
    """Vectorised :func:`normalize_date` over anything numpy can read as datetime64"""
    days = np.asarray(dates, dtype="datetime64[D]")
    years = days.astype("datetime64[Y]")
    day_of_year = (days - years.astype("datetime64[D]")).astype(np.int64)
    year_length = (
        (years + 1).astype("datetime64[D]") - years.astype("datetime64[D]")
    ).astype(np.int64)
    return day_of_year / year_length


def day_bucket(t: ArrayLike) -> NDArray[np.int64]:
    """
    Day bucket (0 to 365) of normalised days.

    For leap years ``t * 366`` is an exact day index, for common years
    ``k / 365 * 366`` keeps its integer part ``k`` for every ``k < 365``.
    """
    buckets = np.floor(np.asarray(t, dtype=np.float64) * N_DAY_BUCKETS + _BUCKET_EPS)
    return np.clip(buckets, 0, N_DAY_BUCKETS - 1).astype(np.int64)


def bucket_grid() -> NDArray[np.float64]:
    """Normalised day at the start of every bucket, as seen in a leap year"""
    return np.arange(N_DAY_BUCKETS) / N_DAY_BUCKETS
