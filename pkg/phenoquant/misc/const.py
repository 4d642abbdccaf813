from enum import Enum, IntEnum, IntFlag
import datetime
from typing import Self

SCHEMA_VERSION = 1

QUANTILES = (0.25, 0.5, 0.75)
"""Quantile block order of every network output and curve set"""
N_CURVE_PARAMS = 6
N_OUTPUTS = len(QUANTILES) * N_CURVE_PARAMS

CROSSING_PAIRS = ((0, 1), (1, 2), (0, 2))
"""Index pairs into :data:`QUANTILES` that must not cross"""

NDVI_FLOOR = -0.1
NDVI_CEILING = 1.0
NDSI_SNOW_THRESHOLD = 0.43

ANOMALY_THRESHOLD = -1.5
IQR_FLOOR = 1e-3

N_DAY_BUCKETS = 366
CROSSING_GRID_SIZE = 52
ROLLING_WINDOW = 7
HISTOGRAM_BIN_WIDTH = 0.01

UNKNOWN_INDEX = 0
UNKNOWN_CODE = "Unknown"

VEGETATION_HEIGHT = "vegetation_height"
FOREST_MIX_RATE = "forest_mix_rate"
CONTINUOUS_FEATURES = (
    VEGETATION_HEIGHT,
    FOREST_MIX_RATE,
    "elevation",
    "slope",
    "eastness",
    "northness",
    "twi",
    "tri",
    "mean_curvature",
    "profile_curvature",
    "plan_curvature",
    "roughness",
    "flow_accumulation",
)
SPECIES_DIM = 4
HABITAT_DIM = 8


class MaskFlag(IntFlag):
    """Quality mask bits attached to every raw observation"""
    NO_DATA = 0b0001
    CLOUD = 0b0010
    CLOUD_SHADOW = 0b0100
    TERRAIN_SHADOW = 0b1000


class RejectReason(Enum):
    """
    Why an observation was dropped.
    The declaration order is the order in which the rules are tried.
    """
    NO_DATA = "no_data"
    CLOUD = "cloud"
    CLOUD_SHADOW = "cloud_shadow"
    TERRAIN_SHADOW = "terrain_shadow"
    SNOW = "snow"
    OUTLIER = "outlier"
    MALFORMED = "malformed"

    def __str__(self) -> str:
        return self.value


class ExitCode(IntEnum):
    OK = 0
    UNEXPECTED = 1
    USAGE = 2
    MISSING_COLUMNS = 3
    SCHEMA_VERSION = 4
    DIMENSION_MISMATCH = 5
    MISSING_INPUT = 6
    EMPTY_INPUT = 7
    NON_FINITE = 8


class ModelKind(Enum):
    CONDITIONAL = "conditional"
    GLOBAL = "global"
    CLIMATOLOGY = "climatology"

    def __str__(self) -> str:
        return self.value


class Season(Enum):
    """Meteorological seasons, valued by the month they begin in"""
    SPRING = 3
    SUMMER = 6
    AUTUMN = 9
    WINTER = 12

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def of(cls, date: datetime.date) -> Self:
        for season in (cls.WINTER, cls.AUTUMN, cls.SUMMER, cls.SPRING):
            if date.month >= season.value:
                return season
        return cls.WINTER
