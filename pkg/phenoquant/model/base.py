import abc

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..misc.const import ModelKind
from .curve import QuantileCurveSet, curve_values, transform_raw_array
from .features import FeatureMatrix, ObservationTable, PreprocessorState
from .net import NetworkWeights, forward_batch

# Rows per forward pass when predicting, keeps activations small
PREDICT_ROWS = 4096


class BaseQuantileModel(abc.ABC):
    """Abstract base class for everything that predicts the three quartiles.
    Any subclass must override :meth:`BaseQuantileModel.predict_grid`.
    """

    kind: ModelKind

    @abc.abstractmethod
    def predict_grid(
        self,
        features: FeatureMatrix|None,
        t_grid: ArrayLike
    ) -> NDArray[np.float64]:
        """
        Quantile values of every pixel on a grid of normalised days.

        :param features: :class:`FeatureMatrix|None`
            Pixels to predict for. Models that ignore covariates accept
            :const:`None` and return a single row.
        :param t_grid: Normalised days

        Returns
        -------
        :class:`NDArray`
            Array of shape ``(n_pixels, len(t_grid), 3)``
        """

    def predict(
        self,
        observations: ObservationTable,
        features: FeatureMatrix|None=None
    ) -> NDArray[np.float64]:
        """
        Quantile values at the day and pixel of every observation.

        Returns
        -------
        :class:`NDArray`
            Array of shape ``(len(observations), 3)``
        """
        return self.predict_grid(None, observations.t)[0]


class ConditionalModel(BaseQuantileModel):
    """The trained network together with the preprocessing it expects

    :param weights: :class:`NetworkWeights`
    :param preprocessor: :class:`PreprocessorState`
    """

    kind = ModelKind.CONDITIONAL
    __slots__ = ("weights", "preprocessor")

    def __init__(self, weights: NetworkWeights, preprocessor: PreprocessorState):
        self.weights = weights
        self.preprocessor = preprocessor

    def curve_params(self, features: FeatureMatrix) -> NDArray[np.float64]:
        """Valid curve parameters of every pixel, shape ``(n, 3, 6)``"""
        blocks = []
        for start in range(0, len(features), PREDICT_ROWS):
            raw, _ = forward_batch(self.weights, features.take(slice(start, start + PREDICT_ROWS)))
            blocks.append(transform_raw_array(raw.reshape(len(raw), 3, 6)))
        if not blocks:
            return np.empty((0, 3, 6))
        return np.concatenate(blocks)

    def curve_sets(self, features: FeatureMatrix) -> list[QuantileCurveSet]:
        return [QuantileCurveSet.from_array(p) for p in self.curve_params(features)]

    def predict_grid(self, features, t_grid):
        if features is None:
            raise ValueError("The conditional model needs pixel features")
        params = self.curve_params(features)
        t_grid = np.asarray(t_grid, dtype=np.float64).reshape(-1)
        return curve_values(params[:, None, :, :], t_grid[None, :, None])

    def predict(self, observations, features=None):
        if features is None:
            raise ValueError("The conditional model needs pixel features")
        rows = features.index_of(observations.pixel_id)
        unique_rows, inverse = np.unique(rows, return_inverse=True)
        params = self.curve_params(features.take(unique_rows))
        return curve_values(params[inverse], observations.t[:, None])
