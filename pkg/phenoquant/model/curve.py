"""
The double logistic seasonal curve.

A curve is described by six phenological parameters. Levels and dates are
kept in their valid ranges by :func:`transform_raw`; the two transition
widths stay unconstrained and are passed through the softplus ``g`` inside
the curve::

    f(t) = ndvi_min + (ndvi_max - ndvi_min) * [
        sigmoid(4 (t - sos) / g(matsos) - 2) - sigmoid(4 (t - sen) / g(eossen) - 2)
    ]

Parameter arrays are laid out along their last axis in the field order of
:class:`PhenologyParams`.
"""
from collections.abc import Sequence
import dataclasses
from typing import Self

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from ..errors import DomainError
from ..misc.const import NDVI_CEILING, NDVI_FLOOR, QUANTILES

__all__ = (
    "PhenologyParams",
    "QuantileCurveSet",
    "softplus",
    "evaluate",
    "evaluate_batch",
    "evaluate_gradient",
    "curve_values",
    "curve_gradients",
    "transform_raw",
    "transform_raw_array",
    "transform_vjp",
)

NDVI_MIN, NDVI_MAX, SOS, MATSOS, SEN, EOSSEN = range(6)
"""Positions of the parameters along the last axis of a parameter array"""

# Raw network outputs are ordered (min, max, sos, sen, matsos, eossen)
_RAW_ORDER = (NDVI_MIN, NDVI_MAX, SOS, SEN, MATSOS, EOSSEN)
_LEVEL_SPAN = NDVI_CEILING - NDVI_FLOOR


@dataclasses.dataclass(frozen=True)
class PhenologyParams:
    """The six parameters of one seasonal curve

    :param ndvi_min: :class:`float` Dormant-season greenness
    :param ndvi_max: :class:`float` Peak greenness
    :param sos: :class:`float` Start of season (normalised day)
    :param matsos: :class:`float` Green-up duration before the softplus
    :param sen: :class:`float` Start of senescence (normalised day)
    :param eossen: :class:`float` Senescence duration before the softplus
    """
    ndvi_min: float
    ndvi_max: float
    sos: float
    matsos: float
    sen: float
    eossen: float

    def as_array(self) -> NDArray[np.float64]:
        return np.array(dataclasses.astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values: ArrayLike) -> Self:
        return cls(*(float(v) for v in np.asarray(values, dtype=np.float64).reshape(6)))

    @property
    def greenup_width(self) -> float:
        return float(softplus(self.matsos))

    @property
    def senescence_width(self) -> float:
        return float(softplus(self.eossen))


@dataclasses.dataclass(frozen=True)
class QuantileCurveSet:
    """Lower quartile, median and upper quartile curves of one pixel"""
    lower: PhenologyParams
    median: PhenologyParams
    upper: PhenologyParams

    def __iter__(self):
        return iter((self.lower, self.median, self.upper))

    def as_array(self) -> NDArray[np.float64]:
        """Parameters as a ``(3, 6)`` array in :data:`QUANTILES` order"""
        return np.stack([p.as_array() for p in self])

    @classmethod
    def from_array(cls, values: ArrayLike) -> Self:
        rows = np.asarray(values, dtype=np.float64).reshape(len(QUANTILES), 6)
        return cls(*(PhenologyParams.from_array(row) for row in rows))


def softplus(x: ArrayLike) -> NDArray[np.float64]:
    # logaddexp evaluates x + log1p(exp(-x)) for positive x, so it never overflows
    return np.logaddexp(0.0, x)


def _check_t(t: ArrayLike) -> NDArray[np.float64]:
    t = np.asarray(t, dtype=np.float64)
    if t.size and not (np.all(t >= 0.0) and np.all(t <= 1.0)):
        raise DomainError("Normalised day must lie in [0, 1]")
    return t


def _terms(params: NDArray[np.float64], t: NDArray[np.float64]):
    g_up = softplus(params[..., MATSOS])
    g_down = softplus(params[..., EOSSEN])
    s_up = expit(4.0 * (t - params[..., SOS]) / g_up - 2.0)
    s_down = expit(4.0 * (t - params[..., SEN]) / g_down - 2.0)
    return g_up, g_down, s_up, s_down


def curve_values(params: ArrayLike, t: ArrayLike) -> NDArray[np.float64]:
    """
    Evaluate curves elementwise, broadcasting ``params[..., :]`` against ``t``.
    No range check is made on ``t``.
    """
    params = np.asarray(params, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    _, _, s_up, s_down = _terms(params, t)
    low = params[..., NDVI_MIN]
    return low + (params[..., NDVI_MAX] - low) * (s_up - s_down)


def curve_gradients(
        params: ArrayLike,
        t: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Curve values and their partial derivatives with respect to the six
    parameters.

    Returns
    -------
    :class:`tuple[NDArray, NDArray]`
        The values, shaped like the broadcast of ``params[..., 0]`` and ``t``,
        and the gradient with one more trailing axis of length 6.
    """
    params = np.asarray(params, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    g_up, g_down, s_up, s_down = _terms(params, t)
    low = params[..., NDVI_MIN]
    amplitude = params[..., NDVI_MAX] - low
    bracket = s_up - s_down
    values = low + amplitude * bracket

    slope_up = amplitude * s_up * (1.0 - s_up)
    slope_down = amplitude * s_down * (1.0 - s_down)
    lag_up = t - params[..., SOS]
    lag_down = t - params[..., SEN]

    grad = np.empty(values.shape + (6,), dtype=np.float64)
    grad[..., NDVI_MIN] = 1.0 - bracket
    grad[..., NDVI_MAX] = bracket
    grad[..., SOS] = -4.0 * slope_up / g_up
    grad[..., MATSOS] = -4.0 * slope_up * lag_up / g_up**2 * expit(params[..., MATSOS])
    grad[..., SEN] = 4.0 * slope_down / g_down
    grad[..., EOSSEN] = 4.0 * slope_down * lag_down / g_down**2 * expit(params[..., EOSSEN])
    return values, grad


def evaluate(params: PhenologyParams, t: float) -> float:
    """Evaluate one curve at one normalised day

    :param params: :class:`PhenologyParams` Parameters, as produced by :func:`transform_raw`
    :param t: :class:`float` Normalised day in [0, 1]

    Raises
    ------
    :class:`DomainError`
        ``t`` lies outside [0, 1]
    """
    return float(curve_values(params.as_array(), _check_t(t)))


def evaluate_gradient(params: PhenologyParams, t: float) -> tuple[float, NDArray[np.float64]]:
    """Curve value at ``t`` and its six partial derivatives in field order"""
    values, grad = curve_gradients(params.as_array(), _check_t(t))
    return float(values), grad


def evaluate_batch(
        curves: Sequence[QuantileCurveSet]|ArrayLike,
        t_grid: ArrayLike
) -> NDArray[np.float64]:
    """Evaluate the quantile curves of many pixels on a grid of days

    :param curves: Either a sequence of :class:`QuantileCurveSet` or an
        array of shape ``(n, 3, 6)``
    :param t_grid: Normalised days in [0, 1]

    Returns
    -------
    :class:`NDArray`
        Array of shape ``(n, len(t_grid), 3)``
    """
    if isinstance(curves, Sequence) and curves and isinstance(curves[0], QuantileCurveSet):
        params = np.stack([c.as_array() for c in curves])
    else:
        params = np.asarray(curves, dtype=np.float64).reshape(-1, len(QUANTILES), 6)
    t_grid = _check_t(t_grid).reshape(-1)
    return curve_values(params[:, None, :, :], t_grid[None, :, None])


def transform_raw_array(raw: ArrayLike) -> NDArray[np.float64]:
    """Map unconstrained values ``raw[..., :6]`` onto valid parameters"""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DomainError("Raw curve parameters must be finite")
    r_min, r_max, r_sos, r_sen, r_up, r_down = np.moveaxis(raw, -1, 0)

    params = np.empty(raw.shape, dtype=np.float64)
    low = NDVI_FLOOR + _LEVEL_SPAN * expit(r_min)
    params[..., NDVI_MIN] = low
    params[..., NDVI_MAX] = low + (NDVI_CEILING - low) * expit(r_max)
    params[..., SOS] = expit(r_sos)
    params[..., SEN] = expit(r_sen)
    params[..., MATSOS] = r_up
    params[..., EOSSEN] = r_down
    return params


def transform_vjp(raw: ArrayLike, grad_params: ArrayLike) -> NDArray[np.float64]:
    """Pull a gradient with respect to parameters back onto the raw values"""
    raw = np.asarray(raw, dtype=np.float64)
    grad_params = np.asarray(grad_params, dtype=np.float64)
    s_min = expit(raw[..., 0])
    s_max = expit(raw[..., 1])
    low = NDVI_FLOOR + _LEVEL_SPAN * s_min
    d_low = _LEVEL_SPAN * s_min * (1.0 - s_min)

    grad_raw = np.empty(np.broadcast_shapes(raw.shape, grad_params.shape), dtype=np.float64)
    g_low = grad_params[..., NDVI_MIN]
    g_high = grad_params[..., NDVI_MAX]
    grad_raw[..., 0] = d_low * (g_low + g_high * (1.0 - s_max))
    grad_raw[..., 1] = g_high * (NDVI_CEILING - low) * s_max * (1.0 - s_max)
    for position, target in enumerate(_RAW_ORDER[2:], start=2):
        if target in (SOS, SEN):
            s = expit(raw[..., position])
            grad_raw[..., position] = grad_params[..., target] * s * (1.0 - s)
        else:
            grad_raw[..., position] = grad_params[..., target]
    return grad_raw


def transform_raw(raw: ArrayLike) -> PhenologyParams:
    """Map six unconstrained values onto a valid :class:`PhenologyParams`

    :param raw: Six finite reals in network output order
        ``(min, max, sos, sen, matsos, eossen)``

    Raises
    ------
    :class:`DomainError`
        One of the values is not finite
    """
    return PhenologyParams.from_array(transform_raw_array(np.asarray(raw).reshape(6)))
