"""
Synthetic corpora with known quantile curves.

Each pixel gets covariates drawn from fixed distributions. A fixed random
smooth map turns the covariates into the pixel's median curve and noise
spread, so the covariates carry the signal a conditional model should
learn. Observations are::

    y = f50(t) + spread(t) * xi

where ``xi`` is standard logistic noise divided by ``ln 3`` (quartiles at
exactly -1 and +1) and ``spread(t) = s0 + s1 * bracket(t)`` follows the
seasonal bracket of the median curve. The true quartile curves are then
double logistic curves themselves and never cross.
"""
from collections.abc import Iterator
import dataclasses
import datetime
import enum
import logging
import math
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from .misc.const import CONTINUOUS_FEATURES, NDSI_SNOW_THRESHOLD, QUANTILES, MaskFlag
from .misc.days import normalize_dates
from .misc.tables import pixel_records_frame, write_table
from .model.curve import NDVI_MAX, NDVI_MIN, QuantileCurveSet, curve_values
from .model.features import ObservationTable, RawPixelRecord, filter_table

__all__ = (
    "RecoveryShape",
    "Injection",
    "SynthConfig",
    "GroundTruth",
    "SyntheticCorpus",
    "generate",
    "empirical_quantile_oracle",
    "write_corpus",
)

LOGISTIC_QUARTILE = math.log(3.0)
"""Upper quartile of the standard logistic distribution"""

# Location and scale of every continuous covariate; the map standardises with these
FEATURE_DISTRIBUTIONS = {
    "vegetation_height": ("uniform", 5.0, 40.0),
    "forest_mix_rate": ("beta", 2.0, 2.0),
    "elevation": ("uniform", 300.0, 2200.0),
    "slope": ("uniform", 0.0, 45.0),
    "eastness": ("aspect_sin", 0.0, 1.0),
    "northness": ("aspect_cos", 0.0, 1.0),
    "twi": ("normal", 8.0, 2.0),
    "tri": ("uniform", 0.0, 20.0),
    "mean_curvature": ("normal", 0.0, 0.5),
    "profile_curvature": ("normal", 0.0, 0.5),
    "plan_curvature": ("normal", 0.0, 0.5),
    "roughness": ("uniform", 0.0, 10.0),
    "flow_accumulation": ("lognormal", 3.0, 1.0),
}

_CONTAMINATIONS = ("no_data", "cloud", "cloud_shadow", "terrain_shadow", "snow")
_CONTAMINATION_FLAGS = {
    "no_data": MaskFlag.NO_DATA,
    "cloud": MaskFlag.CLOUD,
    "cloud_shadow": MaskFlag.CLOUD_SHADOW,
    "terrain_shadow": MaskFlag.TERRAIN_SHADOW,
}


class RecoveryShape(enum.Enum):
    STEP = "step"
    """The full drop lasts for the whole window"""
    LINEAR = "linear"
    """The drop shrinks linearly from full at the start towards zero at the end"""

    def __str__(self) -> str:
        return self.value


@dataclasses.dataclass(frozen=True)
class Injection:
    """A disturbance lowering the greenness of a share of the pixels

    :param fraction: :class:`float` Share of pixels affected, in [0, 1]
    :param start: :class:`datetime.date` First affected day
    :param duration: :class:`int` Length of the window in days
    :param drop: :class:`float` Depth in units of the true interquartile range
    :param shape: :class:`RecoveryShape`
    """
    fraction: float
    start: datetime.date
    duration: int
    drop: float
    shape: RecoveryShape = RecoveryShape.STEP

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("Injection fraction must lie in [0, 1]")
        if self.drop <= 0:
            raise ValueError("Injection drop must be positive")
        if self.duration < 1:
            raise ValueError("Injection duration must be at least one day")
        object.__setattr__(self, "shape", RecoveryShape(self.shape))

    def factor(self, dates: NDArray[np.datetime64]) -> NDArray[np.float64]:
        """Share of the full drop applied on each date, 0 outside the window"""
        elapsed = (dates - np.datetime64(self.start, "D")).astype(np.int64)
        inside = (elapsed >= 0) & (elapsed < self.duration)
        if self.shape is RecoveryShape.STEP:
            return inside.astype(np.float64)
        return np.where(inside, 1.0 - elapsed / self.duration, 0.0)


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    """Everything that determines a synthetic corpus

    :param cadence: :class:`int` Days between acquisitions
    :param dropout: :class:`float` Probability that an acquisition is missing
    :param spread: :class:`float` Typical half interquartile range of the noise
    :param seasonal_spread: :class:`float` Relative narrowing of the spread in the growing season, in [0, 1)
    :param contamination: :class:`float` Share of observations emitted with a quality defect
    :param missing_rate: :class:`float` Share of missing vegetation height and mix rate values
    :param map_seed: :class:`int` Seed of the covariate to curve map
    :param seed: :class:`int` Seed of everything else
    """
    n_pixels: int = 2000
    years: tuple[int, ...] = (2019, 2020)
    cadence: int = 5
    dropout: float = 0.3
    spread: float = 0.04
    seasonal_spread: float = 0.0
    contamination: float = 0.0
    missing_rate: float = 0.0
    n_species: int = 5
    n_habitats: int = 6
    grid_width: int = 50
    map_seed: int = 7
    seed: int = 0
    injections: tuple[Injection, ...] = ()

    def __post_init__(self):
        if self.n_pixels < 0:
            raise ValueError("n_pixels must not be negative")
        if self.cadence < 1:
            raise ValueError("cadence must be at least one day")
        for name in ("dropout", "contamination", "missing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.spread < 0:
            raise ValueError("spread must not be negative")
        if not 0.0 <= self.seasonal_spread < 1.0:
            raise ValueError("seasonal_spread must lie in [0, 1)")
        if self.n_species < 1 or self.n_habitats < 1 or self.grid_width < 1:
            raise ValueError("n_species, n_habitats and grid_width must be positive")
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "injections", tuple(self.injections))


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    """What the generator knows and a model should recover

    :param pixel_ids: :class:`NDArray` shape ``(n,)``
    :param curves: :class:`NDArray` True quartile curve parameters, shape ``(n, 3, 6)``
    :param observations: :class:`DataFrame` Columns ``pixel_id, date, t, clean,
        drop, noisy, injected, contamination``; ``clean`` is the undisturbed
        median, ``drop`` what an injection took off it
    :param injected_pixels: :class:`tuple[NDArray, ...]` Affected pixels per injection
    """
    pixel_ids: NDArray[np.int64]
    curves: NDArray[np.float64]
    observations: pd.DataFrame
    injected_pixels: tuple[NDArray[np.int64], ...] = ()

    def curve_set(self, pixel_id: int) -> QuantileCurveSet:
        return QuantileCurveSet.from_array(self.curves[self.index_of(pixel_id)])

    def index_of(self, pixel_id: int) -> int:
        index = np.flatnonzero(self.pixel_ids == pixel_id)
        if index.size == 0:
            raise KeyError(f"No pixel {pixel_id}")
        return int(index[0])

    def quartiles(self, pixel_ids: ArrayLike, t: ArrayLike) -> NDArray[np.float64]:
        """True quartiles at pairs of pixel and normalised day, shape ``(n, 3)``"""
        order = np.argsort(self.pixel_ids)
        rows = order[np.searchsorted(self.pixel_ids[order], np.asarray(pixel_ids, dtype=np.int64))]
        return curve_values(self.curves[rows], np.asarray(t, dtype=np.float64)[:, None])

    def curves_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"pixel_id": self.pixel_ids})
        names = ("ndvi_min", "ndvi_max", "sos", "matsos", "sen", "eossen")
        for k, q in enumerate(QUANTILES):
            for j, name in enumerate(names):
                frame[f"q{round(q * 100)}_{name}"] = self.curves[:, k, j]
        return frame

    def injections_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "injection": np.concatenate(
                [np.full(len(p), k, dtype=np.int64) for k, p in enumerate(self.injected_pixels)]
            ) if self.injected_pixels else np.empty(0, dtype=np.int64),
            "pixel_id": np.concatenate(self.injected_pixels) if self.injected_pixels else np.empty(0, dtype=np.int64),
        })


@dataclasses.dataclass(frozen=True)
class SyntheticCorpus:
    """Output of :func:`generate`; unpacks to ``(records, observations, truth)``

    :param records: :class:`list[RawPixelRecord]`
    :param observations: :class:`DataFrame` Raw observations with columns
        ``pixel_id, date, ndvi, ndsi, mask``
    :param truth: :class:`GroundTruth`
    """
    records: list[RawPixelRecord]
    observations: pd.DataFrame
    truth: GroundTruth

    def __iter__(self) -> Iterator:
        return iter((self.records, self.observations, self.truth))

    def observation_table(self) -> ObservationTable:
        """The observations that pass the quality filter"""
        frame = self.observations
        table, _ = filter_table(
            frame["pixel_id"].to_numpy(dtype=np.int64),
            frame["date"].to_numpy(dtype="datetime64[D]"),
            frame["ndvi"].to_numpy(dtype=np.float64),
            frame["ndsi"].to_numpy(dtype=np.float64),
            frame["mask"].to_numpy(dtype=np.int64),
        )
        return table


class _CovariateMap:
    """The fixed smooth map from covariates to the median curve and spread"""

    def __init__(self, config: SynthConfig):
        rng = np.random.default_rng(config.map_seed)
        n_cont = len(CONTINUOUS_FEATURES)
        self.linear = rng.normal(0.0, 0.5 / math.sqrt(n_cont), (7, n_cont))
        self.pairs = rng.normal(0.0, 0.15 / math.sqrt(n_cont), (7, n_cont))
        self.species = rng.normal(0.0, 0.4, (config.n_species + 1, 7))
        self.habitat = rng.normal(0.0, 0.4, (config.n_habitats, 7))
        self.habitat_preference = rng.dirichlet(np.ones(config.n_habitats))
        self.species_preference = rng.dirichlet(np.full(config.n_species, 2.0))

    def __call__(self, z: NDArray, species: int, habitat: NDArray) -> NDArray[np.float64]:
        # Smooth and bounded, so every level and date stays in range
        signal = self.linear @ z + self.pairs @ (z * np.roll(z, 1)) + self.species[species] + habitat @ self.habitat
        return np.tanh(signal)


def _standardise(values: NDArray) -> NDArray[np.float64]:
    z = np.empty(len(CONTINUOUS_FEATURES))
    for j, feature in enumerate(CONTINUOUS_FEATURES):
        kind, a, b = FEATURE_DISTRIBUTIONS[feature]
        match kind:
            case "uniform":
                z[j] = (values[j] - (a + b) / 2) / ((b - a) / math.sqrt(12))
            case "beta":
                z[j] = (values[j] - 0.5) / math.sqrt(1 / (4 * (2 * a + 1)))
            case "normal":
                z[j] = (values[j] - a) / b
            case "lognormal":
                z[j] = (math.log(values[j]) - a) / b
            case _:
                z[j] = values[j] * math.sqrt(2)
    return z


def _draw_covariates(rng: np.random.Generator) -> NDArray[np.float64]:
    values = np.empty(len(CONTINUOUS_FEATURES))
    aspect = rng.uniform(0.0, 2 * math.pi)
    for j, feature in enumerate(CONTINUOUS_FEATURES):
        kind, a, b = FEATURE_DISTRIBUTIONS[feature]
        match kind:
            case "uniform":
                values[j] = rng.uniform(a, b)
            case "beta":
                values[j] = rng.beta(a, b)
            case "normal":
                values[j] = rng.normal(a, b)
            case "lognormal":
                values[j] = rng.lognormal(a, b)
            case "aspect_sin":
                values[j] = math.sin(aspect)
            case "aspect_cos":
                values[j] = math.cos(aspect)
    return values


def _inverse_softplus(g: float) -> float:
    return float(np.log(np.expm1(g)))


def _true_curves(u: NDArray, spread: float, seasonal: float) -> NDArray[np.float64]:
    low = 0.25 + 0.08 * u[0]
    high = 0.72 + 0.10 * u[1]
    sos = 0.33 + 0.06 * u[2]
    sen = 0.74 + 0.05 * u[3]
    matsos = _inverse_softplus(0.08 + 0.03 * u[4])
    eossen = _inverse_softplus(0.10 + 0.03 * u[5])
    s0 = spread * math.exp(0.3 * u[6])
    s1 = -seasonal * s0
    # spread(t) = s0 + s1 * bracket(t) shifts both levels of the median curve
    return np.array([
        [low - s0, high - s0 - s1, sos, matsos, sen, eossen],
        [low, high, sos, matsos, sen, eossen],
        [low + s0, high + s0 + s1, sos, matsos, sen, eossen],
    ])


def _acquisition_dates(rng: np.random.Generator, config: SynthConfig) -> NDArray[np.datetime64]:
    blocks = []
    for year in config.years:
        start = np.datetime64(f"{year}-01-01", "D") + int(rng.integers(0, config.cadence))
        end = np.datetime64(f"{year + 1}-01-01", "D")
        blocks.append(np.arange(start, end, np.timedelta64(config.cadence, "D")))
    dates = np.concatenate(blocks) if blocks else np.empty(0, dtype="datetime64[D]")
    return dates[rng.random(len(dates)) >= config.dropout]


def generate(config: SynthConfig=SynthConfig()) -> SyntheticCorpus:
    """Draw a corpus; identical configs give identical corpora

    Each pixel draws from its own substream of ``config.seed``, injections
    pick their pixels from streams of their own.
    """
    covariate_map = _CovariateMap(config)
    streams = np.random.SeedSequence(config.seed).spawn(config.n_pixels)
    pixel_ids = np.arange(1, config.n_pixels + 1, dtype=np.int64)

    injected_pixels = []
    for k, injection in enumerate(config.injections):
        rng = np.random.default_rng([config.seed, 1_000_003, k])
        count = round(injection.fraction * config.n_pixels)
        injected_pixels.append(np.sort(rng.choice(pixel_ids, size=count, replace=False)))

    records: list[RawPixelRecord] = []
    curves = np.empty((config.n_pixels, len(QUANTILES), 6))
    columns: dict[str, list] = {key: [] for key in (
        "pixel_id", "date", "ndvi", "ndsi", "mask", "t", "clean", "drop", "noisy", "injected", "contamination"
    )}
    for i, (pixel_id, stream) in enumerate(zip(pixel_ids, streams)):
        rng = np.random.default_rng(stream)
        values = _draw_covariates(rng)
        species = int(rng.choice(config.n_species, p=covariate_map.species_preference)) + 1
        if rng.random() < 0.05:
            species = 0
        weights = rng.dirichlet(covariate_map.habitat_preference * 5.0 + 0.1)
        counts = rng.multinomial(100, weights)
        u = covariate_map(_standardise(values), species, counts / 100.0)
        curves[i] = _true_curves(u, config.spread, config.seasonal_spread)

        continuous = {f: float(v) for f, v in zip(CONTINUOUS_FEATURES, values)}
        for feature in ("vegetation_height", "forest_mix_rate"):
            if rng.random() < config.missing_rate:
                continuous[feature] = None
        records.append(RawPixelRecord(
            int(pixel_id),
            continuous,
            None if species == 0 else f"species_{species}",
            {f"habitat_{h}": int(c) for h, c in enumerate(counts) if c > 0},
            i // config.grid_width,
            i % config.grid_width,
        ))

        dates = _acquisition_dates(rng, config)
        t = normalize_dates(dates)
        clean = curve_values(curves[i, 1], t)
        bracket = curve_values(np.r_[0.0, 1.0, curves[i, 1, 2:]], t)
        half_iqr = (curves[i, 2, NDVI_MIN] - curves[i, 1, NDVI_MIN]) + (
            (curves[i, 2, NDVI_MAX] - curves[i, 2, NDVI_MIN]) - (curves[i, 1, NDVI_MAX] - curves[i, 1, NDVI_MIN])
        ) * bracket
        noise = rng.logistic(0.0, 1.0, len(dates)) / LOGISTIC_QUARTILE

        drop = np.zeros(len(dates))
        for injection, affected in zip(config.injections, injected_pixels):
            if pixel_id in affected:
                drop += injection.drop * 2.0 * half_iqr * injection.factor(dates)
        noisy = clean - drop + half_iqr * noise

        ndvi = noisy.copy()
        ndsi = rng.uniform(-0.3, 0.2, len(dates))
        mask = np.zeros(len(dates), dtype=np.int64)
        defect = np.full(len(dates), "", dtype=object)
        contaminated = rng.random(len(dates)) < config.contamination
        kinds = rng.integers(0, len(_CONTAMINATIONS), len(dates))
        for j in np.flatnonzero(contaminated):
            kind = _CONTAMINATIONS[kinds[j]]
            defect[j] = kind
            if kind == "snow":
                ndsi[j] = rng.uniform(NDSI_SNOW_THRESHOLD, 0.9)
                ndvi[j] = rng.uniform(-0.1, 0.3)
            else:
                mask[j] = int(_CONTAMINATION_FLAGS[kind])
                if kind == "cloud":
                    ndvi[j] = rng.uniform(-0.2, 0.2)

        columns["pixel_id"].append(np.full(len(dates), pixel_id, dtype=np.int64))
        columns["date"].append(dates)
        columns["ndvi"].append(ndvi)
        columns["ndsi"].append(ndsi)
        columns["mask"].append(mask)
        columns["t"].append(t)
        columns["clean"].append(clean)
        columns["drop"].append(drop)
        columns["noisy"].append(noisy)
        columns["injected"].append(drop > 0.0)
        columns["contamination"].append(defect)

    merged = {
        key: np.concatenate(parts) if parts else np.empty(0, dtype="datetime64[D]" if key == "date" else np.float64)
        for key, parts in columns.items()
    }
    dates = np.asarray(merged["date"], dtype="datetime64[D]")
    observations = pd.DataFrame({
        "pixel_id": merged["pixel_id"].astype(np.int64),
        "date": dates,
        "ndvi": merged["ndvi"].astype(np.float64),
        "ndsi": merged["ndsi"].astype(np.float64),
        "mask": merged["mask"].astype(np.int64),
    })
    truth = GroundTruth(
        pixel_ids,
        curves,
        pd.DataFrame({
            "pixel_id": merged["pixel_id"].astype(np.int64),
            "date": dates,
            "t": merged["t"].astype(np.float64),
            "clean": merged["clean"].astype(np.float64),
            "drop": merged["drop"].astype(np.float64),
            "noisy": merged["noisy"].astype(np.float64),
            "injected": merged["injected"].astype(bool),
            "contamination": merged["contamination"].astype(object),
        }),
        tuple(injected_pixels),
    )
    logging.info(
        "Generated %d pixels and %d observations (%d injected, %d contaminated)",
        config.n_pixels, len(observations), int(truth.observations["injected"].sum()),
        int((truth.observations["contamination"] != "").sum())
    )
    return SyntheticCorpus(records, observations, truth)


def empirical_quantile_oracle(
        truth: GroundTruth,
        pixel_id: int,
        t: float,
        n_draws: int=100_000,
        seed: int=0
) -> NDArray[np.float64]:
    """Monte Carlo quartiles of the noise model of one pixel at one day"""
    params = truth.curves[truth.index_of(pixel_id)]
    median = float(curve_values(params[1], t))
    half_iqr = float(curve_values(params[2], t)) - median
    rng = np.random.default_rng(seed)
    draws = median + half_iqr * rng.logistic(0.0, 1.0, n_draws) / LOGISTIC_QUARTILE
    return np.quantile(draws, QUANTILES)


def write_corpus(corpus: SyntheticCorpus, directory: str|Path, command: str="synth") -> list[Path]:
    """Write the corpus in the formats ``prep`` reads plus the truth sidecars"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    observations = corpus.observations.assign(
        date=np.datetime_as_string(corpus.observations["date"].to_numpy(dtype="datetime64[D]"), unit="D")
    )
    truth_observations = corpus.truth.observations.assign(
        date=observations["date"].to_numpy(),
        injected=corpus.truth.observations["injected"].astype(np.int8),
    )
    outputs = {
        "pixels.csv": pixel_records_frame(corpus.records),
        "raw_observations.csv": observations,
        "truth_observations.csv": truth_observations,
        "truth_curves.csv": corpus.truth.curves_frame(),
        "truth_injections.csv": corpus.truth.injections_frame(),
    }
    for name, frame in outputs.items():
        write_table(directory / name, frame, command)
    return [directory / name for name in outputs]
