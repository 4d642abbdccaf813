"""
Per-pixel covariates and greenness observations.

Raw records come in with missing values and quality flags; this module
filters observations, learns the standardisation and category dictionaries
from a training corpus and turns raw pixel records into model-ready
:class:`PixelFeatures`.
"""
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
import dataclasses
import datetime
import functools
import logging
import math
from typing import Self
from warnings import warn

import numpy as np
from numpy.typing import NDArray

from .. import errors
from ..misc.const import (
    CONTINUOUS_FEATURES,
    FOREST_MIX_RATE,
    NDSI_SNOW_THRESHOLD,
    NDVI_CEILING,
    NDVI_FLOOR,
    UNKNOWN_CODE,
    UNKNOWN_INDEX,
    MaskFlag,
    RejectReason,
)
from ..misc.days import day_bucket, normalize_date, normalize_dates

__all__ = (
    "RawPixelRecord",
    "PixelFeatures",
    "RawObservation",
    "NdviObservation",
    "ObservationTable",
    "FilterResult",
    "PreprocessorState",
    "FeatureMatrix",
    "reject_reasons",
    "filter_observations",
    "filter_table",
    "fit_preprocessor",
    "apply_preprocessor",
)

HABITAT_TOTAL = 100
"""Number of 1 m sub-pixels behind one habitat frequency vector"""

_MASK_RULES = (
    (RejectReason.NO_DATA, MaskFlag.NO_DATA),
    (RejectReason.CLOUD, MaskFlag.CLOUD),
    (RejectReason.CLOUD_SHADOW, MaskFlag.CLOUD_SHADOW),
    (RejectReason.TERRAIN_SHADOW, MaskFlag.TERRAIN_SHADOW),
)
# Position 0 marks a retained observation
_REASON_CODES = (None,) + tuple(RejectReason)


@dataclasses.dataclass(frozen=True)
class RawPixelRecord:
    """Covariates of one pixel as delivered, before preprocessing

    :param pixel_id: :class:`int` Opaque 64-bit pixel identifier
    :param continuous: :class:`Mapping[str, float|None]` Continuous covariates,
        ``None`` or NaN marking a missing value
    :param species_id: :class:`str|None` Primary tree species code
    :param habitat_counts: :class:`Mapping[str, int]` Sub-pixel counts per habitat code
    :param row: :class:`int|None` Grid row, if the pixel sits on a raster
    :param col: :class:`int|None` Grid column
    """
    pixel_id: int
    continuous: Mapping[str, float|None]
    species_id: str|None = None
    habitat_counts: Mapping[str, int] = dataclasses.field(default_factory=dict)
    row: int|None = None
    col: int|None = None

    def value(self, feature: str) -> float:
        """The value of a continuous feature, NaN when missing"""
        value = self.continuous.get(feature)
        return math.nan if value is None else float(value)

    def validate(self) -> None:
        """
        Raises
        ------
        :class:`ValueError`
            The record breaks one of its invariants
        """
        counts = list(self.habitat_counts.values())
        if any(int(c) != c or c < 0 for c in counts):
            raise ValueError(f"pixel {self.pixel_id}: habitat counts must be non-negative integers")
        if sum(counts) > HABITAT_TOTAL:
            raise ValueError(f"pixel {self.pixel_id}: habitat counts exceed {HABITAT_TOTAL}")
        for feature in ("eastness", "northness"):
            value = self.value(feature)
            if not math.isnan(value) and not -1.0 <= value <= 1.0:
                raise ValueError(f"pixel {self.pixel_id}: {feature} must lie in [-1, 1], was {value}")


@dataclasses.dataclass(frozen=True)
class PixelFeatures:
    """Model-ready covariates of one pixel

    :param pixel_id: :class:`int`
    :param continuous: :class:`NDArray` Standardised continuous covariates
    :param species_id: :class:`int` Dense species index, 0 for Unknown
    :param habitat_weights: :class:`Mapping[int, float]` Habitat index to weight, summing to 1
    """
    pixel_id: int
    continuous: NDArray[np.float64]
    species_id: int
    habitat_weights: Mapping[int, float]


@dataclasses.dataclass(frozen=True)
class RawObservation:
    """An observation as delivered, before quality filtering"""
    pixel_id: int
    date: datetime.date
    ndvi: float
    ndsi: float = 0.0
    mask_flags: MaskFlag = MaskFlag(0)


@dataclasses.dataclass(frozen=True)
class NdviObservation:
    """A retained greenness measurement

    :param t: :class:`float` Normalised day of the year in [0, 1)
    """
    pixel_id: int
    date: datetime.date
    t: float
    ndvi: float
    ndsi: float|None = None
    mask_flags: MaskFlag|None = None

    @classmethod
    def from_raw(cls, raw: RawObservation) -> Self:
        return cls(
            raw.pixel_id,
            raw.date,
            normalize_date(raw.date),
            float(raw.ndvi),
            float(raw.ndsi),
            MaskFlag(raw.mask_flags)
        )


@dataclasses.dataclass(frozen=True)
class ObservationTable:
    """Retained observations held column-wise, the form every model consumes

    :param pixel_id: :class:`NDArray[int64]`
    :param date: :class:`NDArray[datetime64[D]]`
    :param t: :class:`NDArray[float64]` Normalised days
    :param ndvi: :class:`NDArray[float64]`
    """
    pixel_id: NDArray[np.int64]
    date: NDArray[np.datetime64]
    t: NDArray[np.float64]
    ndvi: NDArray[np.float64]

    def __post_init__(self):
        n = len(self.pixel_id)
        if not (len(self.date) == len(self.t) == len(self.ndvi) == n):
            raise errors.ShapeMismatchError("Observation columns differ in length")

    def __len__(self) -> int:
        return len(self.pixel_id)

    def __iter__(self) -> Iterator[NdviObservation]:
        for pixel_id, date, t, ndvi in zip(self.pixel_id, self.date, self.t, self.ndvi):
            yield NdviObservation(int(pixel_id), date.astype(datetime.date), float(t), float(ndvi))

    @property
    def bucket(self) -> NDArray[np.int64]:
        """Day bucket of every observation"""
        return day_bucket(self.t)

    @classmethod
    def from_columns(cls, pixel_id, date, ndvi) -> Self:
        """Build a table, deriving normalised days from the dates"""
        date = np.asarray(date, dtype="datetime64[D]")
        return cls(
            np.asarray(pixel_id, dtype=np.int64),
            date,
            normalize_dates(date),
            np.asarray(ndvi, dtype=np.float64),
        )

    @classmethod
    def from_observations(cls, observations: Iterable[NdviObservation]) -> Self:
        observations = list(observations)
        return cls(
            np.array([o.pixel_id for o in observations], dtype=np.int64),
            np.array([o.date for o in observations], dtype="datetime64[D]"),
            np.array([o.t for o in observations], dtype=np.float64),
            np.array([o.ndvi for o in observations], dtype=np.float64),
        )

    @classmethod
    def empty(cls) -> Self:
        return cls.from_observations(())

    def take(self, index) -> Self:
        return type(self)(self.pixel_id[index], self.date[index], self.t[index], self.ndvi[index])

    def sorted_by_pixel(self) -> Self:
        """A copy ordered by pixel and then date, stable for ties"""
        order = np.lexsort((self.date.astype(np.int64), self.pixel_id))
        return self.take(order)


@dataclasses.dataclass
class FilterResult:
    """Outcome of :func:`filter_observations`

    :param retained: :class:`list[NdviObservation]`
    :param tally: :class:`Counter[RejectReason]` Rejections per first failing rule
    :param errors: :class:`list[tuple[int, str]]` Position and message of malformed records
    """
    retained: list[NdviObservation]
    tally: Counter
    errors: list[tuple[int, str]]


def reject_reasons(
        ndvi: NDArray[np.float64],
        ndsi: NDArray[np.float64],
        mask: NDArray[np.int64]
) -> NDArray[np.int8]:
    """
    Vectorised rule check. Returns 0 for retained observations and otherwise
    ``1 + position`` of the first failing :class:`RejectReason`.
    """
    ndvi = np.asarray(ndvi, dtype=np.float64)
    ndsi = np.asarray(ndsi, dtype=np.float64)
    mask = np.asarray(mask)
    codes = np.zeros(ndvi.shape, dtype=np.int8)

    malformed = ~np.isfinite(ndvi) | ~np.isfinite(ndsi) | (mask < 0)
    mask = np.where(malformed, 0, mask).astype(np.int64)
    rules = [(RejectReason.MALFORMED, malformed)]
    rules += [(reason, (mask & int(bit)) != 0) for reason, bit in _MASK_RULES]
    rules += [
        (RejectReason.SNOW, ndsi >= NDSI_SNOW_THRESHOLD),
        (RejectReason.OUTLIER, (ndvi < NDVI_FLOOR) | (ndvi > NDVI_CEILING)),
    ]
    # Later assignments must not overwrite an earlier failing rule
    for reason, failed in reversed(rules):
        codes[failed] = _REASON_CODES.index(reason)
    return codes


def filter_observations(observations: Sequence[RawObservation]) -> FilterResult:
    """Apply the quality rules to raw observations

    An observation is retained if no mask bit is set, its snow index is
    below 0.43 and its NDVI lies in [-0.1, 1]. Rejections are counted
    under the first failing rule in the order no-data, cloud, cloud shadow,
    terrain shadow, snow, outlier.

    :param observations: :class:`Sequence[RawObservation]`

    Returns
    -------
    :class:`FilterResult`
    """
    ndvi = np.empty(len(observations))
    ndsi = np.empty(len(observations))
    mask = np.empty(len(observations), dtype=np.int64)
    error_entries: list[tuple[int, str]] = []
    for i, obs in enumerate(observations):
        try:
            ndvi[i] = float(obs.ndvi)
            ndsi[i] = float(obs.ndsi)
            mask[i] = int(obs.mask_flags)
            obs.date.timetuple()
        except (TypeError, ValueError, AttributeError) as e:
            ndvi[i], ndsi[i], mask[i] = math.nan, math.nan, -1
            error_entries.append((i, str(e)))

    codes = reject_reasons(ndvi, ndsi, mask)
    reported = {i for i, _ in error_entries}
    tally: Counter = Counter()
    retained: list[NdviObservation] = []
    for i, (obs, code) in enumerate(zip(observations, codes)):
        if code:
            reason = _REASON_CODES[code]
            tally[reason] += 1
            if reason is RejectReason.MALFORMED and i not in reported:
                error_entries.append((i, "non-finite value or negative mask"))
            continue
        retained.append(NdviObservation.from_raw(obs))

    logging.info(
        "Retained %d of %d observations; rejected %s",
        len(retained), len(observations),
        ", ".join(f"{reason}={tally[reason]}" for reason in RejectReason if tally[reason]) or "none"
    )
    return FilterResult(retained, tally, sorted(error_entries))


def filter_table(
        pixel_id: NDArray[np.int64],
        date: NDArray[np.datetime64],
        ndvi: NDArray[np.float64],
        ndsi: NDArray[np.float64],
        mask: NDArray[np.int64]
) -> tuple[ObservationTable, Counter]:
    """Column-wise :func:`filter_observations`

    Rows with a NaT date count as malformed. Returns the retained
    observations and the rejection tally.
    """
    ndvi = np.where(np.isnat(date), np.nan, ndvi)
    codes = reject_reasons(ndvi, ndsi, mask)
    tally = Counter({
        reason: int(n) for reason, n in zip(_REASON_CODES[1:], np.bincount(codes, minlength=len(_REASON_CODES))[1:])
        if n
    })
    if tally[RejectReason.MALFORMED]:
        warn(f"Skipping {tally[RejectReason.MALFORMED]} malformed observations", errors.MalformedRecordWarning)
    keep = codes == 0
    logging.info(
        "Retained %d of %d observations; rejected %s",
        int(keep.sum()), len(codes),
        ", ".join(f"{reason}={tally[reason]}" for reason in RejectReason if tally[reason]) or "none"
    )
    return ObservationTable.from_columns(pixel_id[keep], date[keep], ndvi[keep]), tally


@dataclasses.dataclass(frozen=True)
class PreprocessorState:
    """Everything learned from the training corpus

    :param feature_names: :class:`tuple[str, ...]` Continuous feature order
    :param means: :class:`tuple[float, ...]` Means over non-missing values
    :param stds: :class:`tuple[float, ...]` Population standard deviations
    :param impute_values: :class:`tuple[float, ...]` Replacement for missing values
    :param species_codes: :class:`tuple[str, ...]` Species code per dense index, index 0 is Unknown
    :param habitat_codes: :class:`tuple[str, ...]` Habitat code per dense index, index 0 is Unknown
    """
    feature_names: tuple[str, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]
    impute_values: tuple[float, ...]
    species_codes: tuple[str, ...]
    habitat_codes: tuple[str, ...]

    @property
    def n_continuous(self) -> int:
        return len(self.feature_names)

    @property
    def n_species(self) -> int:
        """Number of known species, not counting Unknown"""
        return len(self.species_codes) - 1

    @property
    def n_habitats(self) -> int:
        """Number of known habitats, not counting Unknown"""
        return len(self.habitat_codes) - 1

    def species_index(self, code: str|None) -> int:
        return self._species_lookup.get(code, UNKNOWN_INDEX)

    def habitat_index(self, code: str) -> int:
        return self._habitat_lookup.get(code, UNKNOWN_INDEX)

    @functools.cached_property
    def _species_lookup(self) -> dict[str|None, int]:
        return {code: i for i, code in enumerate(self.species_codes) if i != UNKNOWN_INDEX}

    @functools.cached_property
    def _habitat_lookup(self) -> dict[str, int]:
        return {code: i for i, code in enumerate(self.habitat_codes) if i != UNKNOWN_INDEX}

    def to_dict(self) -> dict:
        return {key: list(value) for key, value in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, document: Mapping) -> Self:
        try:
            return cls(**{
                field.name: tuple(document[field.name]) for field in dataclasses.fields(cls)
            })
        except (KeyError, TypeError) as e:
            raise errors.CheckpointError(f"Preprocessor state is incomplete: {e}") from e


def _valid_records[R: RawPixelRecord](records: Iterable[R], skipped: list|None) -> list[R]:
    valid = []
    for record in records:
        try:
            record.validate()
        except ValueError as e:
            warn(str(e), errors.MalformedRecordWarning)
            if skipped is not None:
                skipped.append(record.pixel_id)
            continue
        valid.append(record)
    return valid


def fit_preprocessor(
        corpus: Sequence[RawPixelRecord],
        feature_names: Sequence[str]=CONTINUOUS_FEATURES
) -> PreprocessorState:
    """Learn standardisation moments, imputation values and category dictionaries

    Moments are taken over non-missing values only. Missing values are
    replaced by the corpus mean, except the forest mix rate which uses the
    corpus median.

    :param corpus: :class:`Sequence[RawPixelRecord]` The training pixels
    :param feature_names: :class:`Sequence[str]` Continuous features to use, in order

    Raises
    ------
    :class:`EmptyInputError`
        The corpus holds no valid record
    :class:`MissingFeatureError`
        A feature is missing for every record
    """
    corpus = _valid_records(corpus, None)
    if not corpus:
        raise errors.EmptyInputError("Cannot fit a preprocessor on an empty corpus")

    values = np.array([[r.value(f) for f in feature_names] for r in corpus], dtype=np.float64)
    means, stds, impute = [], [], []
    for j, feature in enumerate(feature_names):
        column = values[:, j]
        present = column[~np.isnan(column)]
        if present.size == 0:
            raise errors.MissingFeatureError(feature)
        mean = float(np.mean(present))
        std = float(np.std(present))
        if std == 0.0:
            warn(f"Feature {feature!r} is constant over the corpus", errors.DegenerateFeatureWarning)
            std = 1.0
        means.append(mean)
        stds.append(std)
        impute.append(float(np.median(present)) if feature == FOREST_MIX_RATE else mean)
        missing = column.size - present.size
        if missing:
            logging.info("Feature %s: imputing %d missing values with %.6g", feature, missing, impute[-1])

    species = sorted({r.species_id for r in corpus if r.species_id not in (None, "", UNKNOWN_CODE)})
    habitats = sorted({
        code for r in corpus for code, count in r.habitat_counts.items()
        if count > 0 and code != UNKNOWN_CODE
    })
    logging.debug("Fitted preprocessor with %d species and %d habitats", len(species), len(habitats))
    return PreprocessorState(
        tuple(feature_names),
        tuple(means),
        tuple(stds),
        tuple(impute),
        (UNKNOWN_CODE, *species),
        (UNKNOWN_CODE, *habitats),
    )


def apply_preprocessor(
        state: PreprocessorState,
        records: Iterable[RawPixelRecord],
        *,
        skipped: list|None=None
) -> list[PixelFeatures]:
    """Turn raw records into :class:`PixelFeatures`

    :param state: :class:`PreprocessorState` From :func:`fit_preprocessor`
    :param records: :class:`Iterable[RawPixelRecord]`
    :param skipped: :class:`list|None` Collects the ids of malformed records, which are left out

    Returns
    -------
    :class:`list[PixelFeatures]`
    """
    means = np.asarray(state.means)
    stds = np.asarray(state.stds)
    impute = np.asarray(state.impute_values)
    species_lookup = state._species_lookup
    habitat_lookup = state._habitat_lookup

    features = []
    for record in _valid_records(records, skipped):
        raw = np.array([record.value(f) for f in state.feature_names], dtype=np.float64)
        raw = np.where(np.isnan(raw), impute, raw)

        weights: dict[int, float] = {}
        total = sum(record.habitat_counts.values())
        for code, count in record.habitat_counts.items():
            if count > 0:
                index = habitat_lookup.get(code, UNKNOWN_INDEX)
                weights[index] = weights.get(index, 0.0) + count / total
        if not weights:
            weights = {UNKNOWN_INDEX: 1.0}

        features.append(PixelFeatures(
            int(record.pixel_id),
            (raw - means) / stds,
            species_lookup.get(record.species_id, UNKNOWN_INDEX),
            dict(sorted(weights.items())),
        ))
    return features


@dataclasses.dataclass(frozen=True)
class FeatureMatrix:
    """:class:`PixelFeatures` of many pixels stacked for batched network passes

    :param pixel_ids: :class:`NDArray` shape ``(n,)``
    :param continuous: :class:`NDArray` shape ``(n, n_continuous)``
    :param species: :class:`NDArray` shape ``(n,)``, dense species indices
    :param habitat: :class:`NDArray` shape ``(n, n_habitats + 1)``, dense habitat weights
    """
    pixel_ids: NDArray[np.int64]
    continuous: NDArray[np.float64]
    species: NDArray[np.int64]
    habitat: NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.pixel_ids)

    @classmethod
    def from_features(cls, features: Sequence[PixelFeatures], n_continuous: int, n_habitats: int) -> Self:
        habitat = np.zeros((len(features), n_habitats + 1), dtype=np.float64)
        for i, f in enumerate(features):
            for index, weight in f.habitat_weights.items():
                habitat[i, index] = weight
        continuous = np.array([f.continuous for f in features], dtype=np.float64).reshape(len(features), n_continuous)
        return cls(
            np.array([f.pixel_id for f in features], dtype=np.int64),
            continuous,
            np.array([f.species_id for f in features], dtype=np.int64),
            habitat,
        )

    def take(self, index) -> Self:
        return type(self)(
            self.pixel_ids[index],
            self.continuous[index],
            self.species[index],
            self.habitat[index],
        )

    def row(self, i: int) -> PixelFeatures:
        nonzero = np.flatnonzero(self.habitat[i])
        return PixelFeatures(
            int(self.pixel_ids[i]),
            self.continuous[i].copy(),
            int(self.species[i]),
            {int(h): float(self.habitat[i, h]) for h in nonzero},
        )

    def index_of(self, pixel_ids: NDArray[np.int64]) -> NDArray[np.int64]:
        """Row positions of the given pixel ids

        Raises
        ------
        :class:`KeyError`
            A pixel id has no row
        """
        order = np.argsort(self.pixel_ids, kind="stable")
        sorted_ids = self.pixel_ids[order]
        pixel_ids = np.asarray(pixel_ids, dtype=np.int64)
        pos = np.searchsorted(sorted_ids, pixel_ids)
        pos = np.clip(pos, 0, max(len(sorted_ids) - 1, 0))
        if len(sorted_ids) == 0 or not np.all(sorted_ids[pos] == pixel_ids):
            missing = np.setdiff1d(pixel_ids, sorted_ids)
            raise KeyError(f"No features for pixels {missing[:5].tolist()}")
        return order[pos]
