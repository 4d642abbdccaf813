__version__ = "1.0.0"

from .model.curve import PhenologyParams, QuantileCurveSet
from .model.features import (
    FeatureMatrix,
    ObservationTable,
    PreprocessorState,
    RawPixelRecord,
    apply_preprocessor,
    filter_observations,
    fit_preprocessor,
)
from .model.base import BaseQuantileModel, ConditionalModel
from .model.baselines import ClimatologyBaseline, GlobalBaseline, fit_climatology, fit_global
from .model.train import Checkpoint, LossConfig, TrainConfig, TrainingSet, fit
from .analysis.anomaly import AnomalyConfig, AnomalyTable, score_table
from .analysis.metrics import FitReport, evaluate
from .synth import Injection, SynthConfig, generate
from . import errors
