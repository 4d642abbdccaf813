"""
Training of the conditional quantile network.

The loss has three parts: a day-weighted pinball loss per quantile, a
periodicity penalty tying each curve's value at ``t = 0`` to its value at
``t = 1``, and a non-crossing penalty averaged over a uniform grid of days.
Gradients are propagated by hand through the curve, the parameter
transform and the network, and applied with AdamW under an exponentially
decaying learning rate.
"""
from collections.abc import Callable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
import dataclasses
import json
import logging
from pathlib import Path
from typing import Self

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .. import errors
from ..misc.codec import assemble_array, disassemble_array, quantize
from ..misc.const import (
    CROSSING_GRID_SIZE,
    CROSSING_PAIRS,
    N_CURVE_PARAMS,
    N_DAY_BUCKETS,
    QUANTILES,
    SCHEMA_VERSION,
    ModelKind,
)
from .base import BaseQuantileModel, ConditionalModel
from .baselines import ClimatologyBaseline, GlobalBaseline
from .curve import QuantileCurveSet, curve_gradients, curve_values, transform_raw_array, transform_vjp
from .features import FeatureMatrix, ObservationTable, PreprocessorState
from .net import NetConfig, NetworkWeights, backward, forward_batch

__all__ = (
    "LossConfig",
    "TrainConfig",
    "DayWeights",
    "LossBreakdown",
    "ObservationBatch",
    "TrainingSet",
    "AdamState",
    "EpochLog",
    "Checkpoint",
    "Trainer",
    "pinball_term",
    "total_loss",
    "loss_gradient",
    "learning_rate",
    "adamw_step",
    "chunked_loader",
    "fit",
)

_N_Q = len(QUANTILES)

# Pixels per gradient shard. Shards are reduced in order, so the result
# does not depend on how many threads process them.
SHARD_SIZE = 256

MOMENT_DTYPE = "<f8"


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """Weights and shape of the composite loss

    :param lambda_per: :class:`float` Weight of the periodicity penalty
    :param lambda_nc: :class:`float` Weight of the non-crossing penalty
    :param grid_size: :class:`int` Days on which crossing is checked
    """
    quantiles: tuple[float, ...] = QUANTILES
    lambda_per: float = 1.0
    lambda_nc: float = 10.0
    crossing_pairs: tuple[tuple[int, int], ...] = CROSSING_PAIRS
    grid_size: int = CROSSING_GRID_SIZE

    def __post_init__(self):
        if self.lambda_per < 0 or self.lambda_nc < 0:
            raise ValueError("Loss weights must be non-negative")
        if len(self.quantiles) != _N_Q or any(
            not 0 < q < 1 for q in self.quantiles
        ) or any(a >= b for a, b in zip(self.quantiles, self.quantiles[1:])):
            raise ValueError(f"Quantiles must be {_N_Q} strictly increasing levels in (0, 1)")
        if self.grid_size < 2:
            raise ValueError("The crossing grid needs at least two days")
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        object.__setattr__(self, "crossing_pairs", tuple(tuple(p) for p in self.crossing_pairs))

    @property
    def grid(self) -> NDArray[np.float64]:
        return np.linspace(0.0, 1.0, self.grid_size)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimisation schedule and network size

    Defaults follow the published training protocol.

    :param epochs: :class:`int` Epochs to train in one call of :func:`fit`
    :param schedule_epochs: :class:`int` Length of the learning-rate decay in
        epochs, counted from the first epoch of the run. ``0`` spans the
        epochs already trained plus ``epochs``.
    """
    epochs: int = 20
    schedule_epochs: int = 0
    batch_size: int = 1024
    chunk_size: int = 8192
    learning_rate: float = 0.005
    lr_final_factor: float = 0.01
    weight_decay: float = 0.0001
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    width: int = 256
    depth: int = 8
    skip_into: int = 5

    def __post_init__(self):
        if self.epochs < 0 or self.schedule_epochs < 0:
            raise ValueError("epochs and schedule_epochs must not be negative")
        if min(self.batch_size, self.chunk_size) < 1:
            raise ValueError("batch_size and chunk_size must be positive")
        if self.batch_size > self.chunk_size:
            raise ValueError("batch_size must not exceed chunk_size")
        if self.learning_rate <= 0 or self.lr_final_factor <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and lr_final_factor must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("Invalid AdamW moment parameters")

    def net_config(self, state: PreprocessorState) -> NetConfig:
        return NetConfig.for_preprocessor(
            state, width=self.width, depth=self.depth, skip_into=min(self.skip_into, self.depth)
        )


@dataclasses.dataclass(frozen=True)
class DayWeights:
    """Per day-bucket observation weights

    Each non-empty bucket gets a weight inversely proportional to its
    number of observations, scaled so that the mean over non-empty buckets
    is 1. Empty buckets weigh 0.
    """
    weights: NDArray[np.float64]

    @classmethod
    def from_buckets(cls, buckets: ArrayLike) -> Self:
        counts = np.bincount(np.asarray(buckets, dtype=np.int64), minlength=N_DAY_BUCKETS)
        weights = np.zeros(N_DAY_BUCKETS)
        filled = counts > 0
        if filled.any():
            if np.all(counts[filled] == counts[filled][0]):
                # Equal counts weigh exactly 1
                weights[filled] = 1.0
            else:
                inverse = 1.0 / counts[filled]
                weights[filled] = inverse / inverse.mean()
        return cls(weights)

    @classmethod
    def uniform(cls) -> Self:
        return cls(np.ones(N_DAY_BUCKETS))

    def __getitem__(self, buckets) -> NDArray[np.float64]:
        return self.weights[buckets]


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """Loss components of one batch

    :param pinball: :class:`NDArray` Day-weighted mean pinball loss per quantile
    :param periodicity: :class:`float` Unweighted periodicity penalty
    :param crossing: :class:`float` Unweighted non-crossing penalty
    :param total: :class:`float` Pinball sum plus the weighted penalties
    """
    pinball: NDArray[np.float64]
    periodicity: float
    crossing: float
    total: float

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.pinball + other.pinball,
            self.periodicity + other.periodicity,
            self.crossing + other.crossing,
            self.total + other.total,
        )


@dataclasses.dataclass(frozen=True)
class ObservationBatch:
    """Observations of a batch of pixels

    :param pixel: :class:`NDArray` Position of each observation's pixel within the batch
    :param t: :class:`NDArray` Normalised days
    :param ndvi: :class:`NDArray` Observed greenness
    :param bucket: :class:`NDArray` Day buckets
    :param n_pixels: :class:`int` Number of pixels in the batch
    """
    pixel: NDArray[np.int64]
    t: NDArray[np.float64]
    ndvi: NDArray[np.float64]
    bucket: NDArray[np.int64]
    n_pixels: int

    def __len__(self) -> int:
        return len(self.pixel)

    @classmethod
    def from_table(cls, table: ObservationTable, pixel_ids: ArrayLike) -> Self:
        """Batch of the given pixels, in that order, from a table of their observations"""
        pixel_ids = np.asarray(pixel_ids, dtype=np.int64)
        order = np.argsort(pixel_ids, kind="stable")
        pos = np.searchsorted(pixel_ids[order], table.pixel_id)
        pos = np.clip(pos, 0, max(len(pixel_ids) - 1, 0))
        if len(pixel_ids) == 0 or not np.all(pixel_ids[order][pos] == table.pixel_id):
            raise errors.EmptyInputError("Every observation needs a prediction for its pixel")
        return cls(order[pos], table.t, table.ndvi, table.bucket, len(pixel_ids))


def pinball_term(y: ArrayLike, f_q: ArrayLike, q: float) -> NDArray[np.float64]:
    """Pinball loss of predicted quantile ``f_q`` against observation ``y``

    Raises
    ------
    :class:`DomainError`
        ``q`` is not in (0, 1)
    """
    if not 0.0 < q < 1.0:
        raise errors.DomainError(f"Quantile level must lie in (0, 1), was {q}")
    residual = np.asarray(y, dtype=np.float64) - np.asarray(f_q, dtype=np.float64)
    return np.where(residual >= 0.0, q * residual, (q - 1.0) * residual)


def _pinball_slope(y: NDArray, f: NDArray, q: NDArray) -> NDArray[np.float64]:
    # Derivative with respect to f; at y == f the y < f branch is used
    return np.where(y > f, -q, 1.0 - q)


def _segment_sum(values: NDArray[np.float64], segment: NDArray[np.int64], n: int) -> NDArray[np.float64]:
    flat = values.reshape(len(segment), -1)
    out = np.empty((n, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(segment, weights=flat[:, k], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def _as_params(curves: Sequence[QuantileCurveSet]|ArrayLike) -> NDArray[np.float64]:
    if isinstance(curves, Sequence) and curves and isinstance(curves[0], QuantileCurveSet):
        return np.stack([c.as_array() for c in curves])
    return np.asarray(curves, dtype=np.float64).reshape(-1, _N_Q, N_CURVE_PARAMS)


def _loss_terms(
        params: NDArray[np.float64],
        batch: ObservationBatch,
        day_weights: DayWeights,
        config: LossConfig,
        normalizers: tuple[int, int]|None,
        with_gradient: bool
) -> tuple[LossBreakdown, NDArray[np.float64]|None]:
    if batch.n_pixels == 0 or len(batch) == 0:
        raise errors.EmptyInputError("Cannot compute the loss of an empty batch")
    if params.shape[0] != batch.n_pixels:
        raise errors.ShapeMismatchError(
            f"{params.shape[0]} predictions for a batch of {batch.n_pixels} pixels"
        )
    n_obs, n_pix = normalizers if normalizers is not None else (len(batch), batch.n_pixels)
    levels = np.asarray(config.quantiles)
    weights = day_weights[batch.bucket]

    obs_params = params[batch.pixel]
    t_obs = batch.t[:, None]
    if with_gradient:
        f_obs, df_obs = curve_gradients(obs_params, t_obs)
    else:
        f_obs, df_obs = curve_values(obs_params, t_obs), None
    y = batch.ndvi[:, None]
    residual = y - f_obs
    losses = np.where(residual >= 0.0, levels * residual, (levels - 1.0) * residual)
    pinball = (weights[:, None] * losses).sum(axis=0) / n_obs

    ends = np.array([0.0, 1.0])
    if with_gradient:
        f_ends, df_ends = curve_gradients(params[:, None, :, :], ends[None, :, None])
    else:
        f_ends, df_ends = curve_values(params[:, None, :, :], ends[None, :, None]), None
    gap = f_ends[:, 0, :] - f_ends[:, 1, :]
    periodicity = float((gap**2).sum() / n_pix)

    grid = config.grid
    if with_gradient:
        f_grid, df_grid = curve_gradients(params[:, None, :, :], grid[None, :, None])
    else:
        f_grid, df_grid = curve_values(params[:, None, :, :], grid[None, :, None]), None
    crossing = 0.0
    d_grid = np.zeros_like(f_grid) if with_gradient else None
    for i, j in config.crossing_pairs:
        excess = f_grid[..., i] - f_grid[..., j]
        active = excess > 0.0
        crossing += float(np.where(active, excess, 0.0).sum())
        if with_gradient:
            d_grid[..., i] += active
            d_grid[..., j] -= active
    crossing /= n_pix * len(grid)

    total = float(pinball.sum() + config.lambda_per * periodicity + config.lambda_nc * crossing)
    breakdown = LossBreakdown(pinball, periodicity, crossing, total)
    if not with_gradient:
        return breakdown, None

    d_obs = weights[:, None] * _pinball_slope(y, f_obs, levels) / n_obs
    grad = _segment_sum(d_obs[..., None] * df_obs, batch.pixel, batch.n_pixels)
    d_gap = (2.0 * config.lambda_per / n_pix) * gap
    grad += d_gap[..., None] * (df_ends[:, 0] - df_ends[:, 1])
    grad += (config.lambda_nc / (n_pix * len(grid))) * (d_grid[..., None] * df_grid).sum(axis=1)
    return breakdown, grad


def total_loss(
        predictions: Sequence[QuantileCurveSet]|ArrayLike,
        observations: ObservationBatch,
        day_weights: DayWeights,
        config: LossConfig=LossConfig(),
        *,
        normalizers: tuple[int, int]|None=None
) -> LossBreakdown:
    """The composite loss of a batch

    :param predictions: Curve sets of the batch pixels, as :class:`QuantileCurveSet`
        or an array of shape ``(n_pixels, 3, 6)``
    :param observations: :class:`ObservationBatch` Observations referring to those pixels
    :param day_weights: :class:`DayWeights` Precomputed over the training corpus
    :param config: :class:`LossConfig`
    :param normalizers: Observation and pixel counts to divide by instead of the
        batch's own, used when a batch is split into shards

    Raises
    ------
    :class:`EmptyInputError`
        The batch holds no pixels or no observations
    """
    breakdown, _ = _loss_terms(
        _as_params(predictions), observations, day_weights, config, normalizers, False
    )
    return breakdown


def loss_gradient(
        raw: ArrayLike,
        observations: ObservationBatch,
        day_weights: DayWeights,
        config: LossConfig=LossConfig(),
        *,
        normalizers: tuple[int, int]|None=None
) -> tuple[LossBreakdown, NDArray[np.float64]]:
    """The composite loss and its gradient with respect to the raw network outputs

    :param raw: Raw outputs of shape ``(n_pixels, 18)``

    Returns
    -------
    :class:`tuple[LossBreakdown, NDArray]`
        The loss and a gradient shaped like ``raw``
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, _N_Q, N_CURVE_PARAMS)
    params = transform_raw_array(raw)
    breakdown, grad_params = _loss_terms(
        params, observations, day_weights, config, normalizers, True
    )
    grad_raw = transform_vjp(raw, grad_params)
    return breakdown, grad_raw.reshape(len(raw), _N_Q * N_CURVE_PARAMS)


def learning_rate(config: TrainConfig, step_index: int, total_steps: int) -> float:
    """Exponentially decayed rate reaching ``lr_final_factor`` at the last step"""
    progress = step_index / (total_steps - 1) if total_steps > 1 else 0.0
    return config.learning_rate * config.lr_final_factor ** min(max(progress, 0.0), 1.0)


@dataclasses.dataclass
class AdamState:
    """First and second moment estimates, shaped like the weights"""
    first: NetworkWeights
    second: NetworkWeights
    steps: int = 0

    @classmethod
    def zeros(cls, weights: NetworkWeights) -> Self:
        return cls(weights.zeros_like(), weights.zeros_like())

    def to_dict(self) -> dict:
        # Moments keep full precision so a resumed run continues exactly
        return {
            "steps": self.steps,
            "first": {name: assemble_array(a, MOMENT_DTYPE) for name, a in self.first.items()},
            "second": {name: assemble_array(a, MOMENT_DTYPE) for name, a in self.second.items()},
        }

    @classmethod
    def from_dict(cls, document: Mapping, config: NetConfig) -> Self:
        def moments(key):
            return NetworkWeights(config, {
                name: disassemble_array(document[key][name]) for name in config.shapes()
            })
        return cls(moments("first"), moments("second"), int(document["steps"]))


def adamw_step(
        weights: NetworkWeights,
        gradient: NetworkWeights,
        state: AdamState,
        step_index: int,
        total_steps: int,
        config: TrainConfig
) -> tuple[NetworkWeights, AdamState]:
    """One AdamW update with decoupled weight decay

    Raises
    ------
    :class:`NonFiniteError`
        The gradient holds NaN or infinite entries
    """
    if not gradient.is_finite():
        diagnostics = {
            name: int(np.count_nonzero(~np.isfinite(g))) for name, g in gradient.items()
            if not np.all(np.isfinite(g))
        }
        raise errors.NonFiniteError("Non-finite gradient", diagnostics=diagnostics)

    lr = learning_rate(config, step_index, total_steps)
    steps = state.steps + 1
    correction1 = 1.0 - config.beta1**steps
    correction2 = 1.0 - config.beta2**steps

    updated, first, second = {}, {}, {}
    for name, w in weights.items():
        g = gradient[name]
        m = config.beta1 * state.first[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.second[name] + (1.0 - config.beta2) * g * g
        decayed = w * (1.0 - lr * config.weight_decay)
        updated[name] = decayed - lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        first[name] = m
        second[name] = v
    return (
        NetworkWeights(weights.config, updated),
        AdamState(NetworkWeights(weights.config, first), NetworkWeights(weights.config, second), steps),
    )


def chunked_loader(
        pixels: ArrayLike|int,
        config: TrainConfig,
        epoch_seed: int
) -> Iterator[NDArray[np.int64]]:
    """Batches of one epoch

    The pixel sequence is cut into contiguous chunks of ``chunk_size``. Chunks
    are visited in a seeded random order, pixels are shuffled within each
    chunk and emitted in batches of ``batch_size``; the last batch of a chunk
    may be short. Every pixel appears exactly once.

    :param pixels: Pixel ids, or a count ``n`` standing for ``range(n)``
    :param epoch_seed: :class:`int` Seed of this epoch's permutation
    """
    pixels = np.arange(pixels) if np.isscalar(pixels) else np.asarray(pixels)
    rng = np.random.default_rng([config.seed, epoch_seed])
    n_chunks = -(-len(pixels) // config.chunk_size)
    for chunk in rng.permutation(n_chunks):
        members = pixels[chunk * config.chunk_size:(chunk + 1) * config.chunk_size]
        members = members[rng.permutation(len(members))]
        for start in range(0, len(members), config.batch_size):
            yield members[start:start + config.batch_size]


@dataclasses.dataclass(frozen=True)
class TrainingSet:
    """Pixels with their observations, sorted for fast batch assembly

    :param features: :class:`FeatureMatrix` Only pixels that have observations
    :param observations: :class:`ObservationTable` Sorted by pixel row
    :param offsets: :class:`NDArray` Observations of row ``i`` are ``offsets[i]:offsets[i + 1]``
    """
    features: FeatureMatrix
    observations: ObservationTable
    offsets: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def build(cls, features: FeatureMatrix, observations: ObservationTable) -> Self:
        known = np.isin(observations.pixel_id, features.pixel_ids)
        if not known.all():
            logging.warning("Dropping %d observations of pixels without features", int((~known).sum()))
            observations = observations.take(known)
        observed = np.isin(features.pixel_ids, observations.pixel_id)
        if not observed.all():
            logging.info("Leaving out %d pixels without observations", int((~observed).sum()))
            features = features.take(observed)
        if len(features) == 0:
            raise errors.EmptyInputError("No pixel has observations")

        rows = features.index_of(observations.pixel_id)
        order = np.lexsort((observations.date.astype(np.int64), rows))
        observations = observations.take(order)
        counts = np.bincount(rows, minlength=len(features))
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(features, observations, offsets)

    def batch(self, rows: NDArray[np.int64]) -> tuple[FeatureMatrix, ObservationBatch]:
        rows = np.asarray(rows, dtype=np.int64)
        starts = self.offsets[rows]
        counts = self.offsets[rows + 1] - starts
        local = np.repeat(np.arange(len(rows)), counts)
        index = np.repeat(starts - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
        obs = self.observations
        return self.features.take(rows), ObservationBatch(
            local, obs.t[index], obs.ndvi[index], obs.bucket[index], len(rows)
        )


@dataclasses.dataclass(frozen=True)
class EpochLog:
    """Mean loss components over the batches of one epoch"""
    epoch: int
    pinball: tuple[float, ...]
    periodicity: float
    crossing: float
    total: float
    learning_rate: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, document: Mapping) -> Self:
        return cls(
            int(document["epoch"]),
            tuple(float(v) for v in document["pinball"]),
            float(document["periodicity"]),
            float(document["crossing"]),
            float(document["total"]),
            float(document["learning_rate"]),
        )


_EpochCallback = Callable[[EpochLog], None]


class Trainer:
    """Owns the weights and optimiser state during training

    :param dataset: :class:`TrainingSet`
    :param weights: :class:`NetworkWeights` Starting weights
    :param train_config: :class:`TrainConfig`
    :param loss_config: :class:`LossConfig`
    :param threads: :class:`int` Workers for the per-shard passes; results do not depend on it
    :param state: :class:`AdamState|None` Optimiser state to continue from

    Weights are kept at their stored precision after every step, so a run
    saved to a :class:`Checkpoint` and resumed continues exactly where it
    stopped.
    """

    def __init__(
            self,
            dataset: TrainingSet,
            weights: NetworkWeights,
            train_config: TrainConfig=TrainConfig(),
            loss_config: LossConfig=LossConfig(),
            *,
            threads: int=1,
            state: AdamState|None=None
    ):
        self.dataset = dataset
        self.weights = weights.map(quantize)
        self.train_config = train_config
        self.loss_config = loss_config
        self.threads = max(1, int(threads))
        self.day_weights = DayWeights.from_buckets(dataset.observations.bucket)
        self.state = AdamState.zeros(self.weights) if state is None else state
        self.log: list[EpochLog] = []
        self._epoch_watchers: list[_EpochCallback] = []

    def epoch_end(self, func: _EpochCallback) -> _EpochCallback:
        """
        A decorator registering a function to be called after every epoch
        with that epoch's :class:`EpochLog`.
        """
        self._epoch_watchers.append(func)
        return func

    def remove_epoch_watcher(self, func: _EpochCallback) -> None:
        self._epoch_watchers.remove(func)

    def _shard_pass(self, features: FeatureMatrix, batch: ObservationBatch, normalizers):
        raw, cache = forward_batch(self.weights, features)
        breakdown, grad_raw = loss_gradient(
            raw, batch, self.day_weights, self.loss_config, normalizers=normalizers
        )
        return breakdown, backward(self.weights, cache, grad_raw)

    def batch_gradient(self, rows: NDArray[np.int64]) -> tuple[LossBreakdown, NetworkWeights]:
        """Loss and weight gradient of a batch of dataset rows"""
        n_obs = int((self.dataset.offsets[rows + 1] - self.dataset.offsets[rows]).sum())
        normalizers = (n_obs, len(rows))
        shards = []
        for start in range(0, len(rows), SHARD_SIZE):
            features, batch = self.dataset.batch(rows[start:start + SHARD_SIZE])
            if len(batch):
                shards.append((features, batch))
        if self.threads > 1 and len(shards) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(lambda s: self._shard_pass(*s, normalizers), shards))
        else:
            results = [self._shard_pass(*s, normalizers) for s in shards]

        breakdown, gradient = results[0]
        gradient = gradient.copy()
        for other, other_gradient in results[1:]:
            breakdown = breakdown + other
            for name, g in other_gradient.items():
                gradient.arrays[name] += g
        return breakdown, gradient

    def steps_per_epoch(self) -> int:
        config = self.train_config
        n_rows = len(self.dataset)
        return sum(
            -(-min(config.chunk_size, n_rows - start) // config.batch_size)
            for start in range(0, n_rows, config.chunk_size)
        )

    def run(self, epochs: int|None=None) -> list[EpochLog]:
        """Train for ``epochs`` more epochs (default: the configured number)

        The learning rate follows one decay over ``schedule_epochs`` epochs,
        or over every epoch of the run so far plus these when that is 0.
        Steps taken before, counted by the optimiser state, are part of it.

        Raises
        ------
        :class:`NonFiniteError`
            A loss or gradient became non-finite, names the batch
        """
        config = self.train_config
        epochs = config.epochs if epochs is None else epochs
        n_rows = len(self.dataset)
        first_epoch = len(self.log) + 1
        schedule = config.schedule_epochs or first_epoch - 1 + epochs
        total_steps = schedule * self.steps_per_epoch()
        step = self.state.steps
        for epoch in range(first_epoch, first_epoch + epochs):
            sums = None
            n_batches = 0
            lr = learning_rate(config, step, total_steps)
            for batch_id, rows in enumerate(chunked_loader(n_rows, config, epoch)):
                breakdown, gradient = self.batch_gradient(rows)
                if not np.isfinite(breakdown.total):
                    raise errors.NonFiniteError("Non-finite loss", batch_id=batch_id)
                lr = learning_rate(config, step, total_steps)
                try:
                    weights, self.state = adamw_step(
                        self.weights, gradient, self.state, step, total_steps, config
                    )
                    self.weights = weights.map(quantize)
                except errors.NonFiniteError as e:
                    raise errors.NonFiniteError(
                        "Non-finite gradient", batch_id=batch_id, diagnostics=e.diagnostics
                    ) from e
                if logging.getLogger().isEnabledFor(logging.DEBUG):
                    norm = np.sqrt(sum(float(np.sum(g * g)) for g in gradient.arrays.values()))
                    logging.debug(
                        "epoch %d batch %d: %d pixels, loss=%.6f, gradient norm=%.4g",
                        epoch, batch_id, len(rows), breakdown.total, norm
                    )
                sums = breakdown if sums is None else sums + breakdown
                n_batches += 1
                step += 1

            entry = EpochLog(
                epoch,
                tuple(float(v) for v in sums.pinball / n_batches),
                sums.periodicity / n_batches,
                sums.crossing / n_batches,
                sums.total / n_batches,
                lr,
            )
            self.log.append(entry)
            logging.info(
                "epoch %d: total=%.6f pinball=%s periodicity=%.3g crossing=%.3g lr=%.3g",
                entry.epoch, entry.total, ",".join(f"{p:.5f}" for p in entry.pinball),
                entry.periodicity, entry.crossing, entry.learning_rate
            )
            for watcher in self._epoch_watchers:
                watcher(entry)
        return self.log


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    """A trained model and everything needed to reuse it

    Conditional checkpoints carry weights and their training provenance,
    baseline checkpoints carry the baseline values only.
    """
    kind: ModelKind
    preprocessor: PreprocessorState|None = None
    weights: NetworkWeights|None = None
    baseline: GlobalBaseline|ClimatologyBaseline|None = None
    train_config: TrainConfig|None = None
    loss_config: LossConfig|None = None
    training_log: tuple[EpochLog, ...] = ()
    optimizer: AdamState|None = None
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def model(self) -> BaseQuantileModel:
        if self.kind is ModelKind.CONDITIONAL:
            return ConditionalModel(self.weights, self.preprocessor)
        return self.baseline

    def to_document(self) -> dict:
        document: dict = {
            "schema_version": self.schema_version,
            "kind": self.kind.value,
            "seed": self.seed,
            "quantiles": list(QUANTILES),
        }
        if self.preprocessor is not None:
            document["preprocessor"] = self.preprocessor.to_dict()
        if self.kind is ModelKind.CONDITIONAL:
            document["net_config"] = self.weights.config.to_dict()
            document["weights"] = {name: assemble_array(a) for name, a in self.weights.items()}
            document["train_config"] = dataclasses.asdict(self.train_config)
            document["loss_config"] = dataclasses.asdict(self.loss_config)
            document["training_log"] = [entry.to_dict() for entry in self.training_log]
            if self.optimizer is not None:
                document["optimizer"] = self.optimizer.to_dict()
        else:
            document["baseline"] = self.baseline.to_dict()
        return document

    def to_json(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str|Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_document(cls, document: Mapping) -> Self:
        """
        Raises
        ------
        :class:`SchemaVersionError`
            The document was written with another schema version
        :class:`CheckpointError`
            The document is incomplete or inconsistent
        """
        version = document.get("schema_version")
        if version != SCHEMA_VERSION:
            raise errors.SchemaVersionError(
                f"Checkpoint schema version {version!r} is not supported (expected {SCHEMA_VERSION})"
            )
        try:
            kind = ModelKind(document["kind"])
            preprocessor = None
            if "preprocessor" in document:
                preprocessor = PreprocessorState.from_dict(document["preprocessor"])
            if kind is not ModelKind.CONDITIONAL:
                baseline_type = GlobalBaseline if kind is ModelKind.GLOBAL else ClimatologyBaseline
                return cls(
                    kind,
                    preprocessor,
                    baseline=baseline_type.from_dict(document["baseline"]),
                    seed=int(document.get("seed", 0)),
                )
            net_config = NetConfig(**document["net_config"])
            weights = NetworkWeights(net_config, {
                name: disassemble_array(document["weights"][name]) for name in net_config.shapes()
            })
            optimizer = None
            if "optimizer" in document:
                optimizer = AdamState.from_dict(document["optimizer"], net_config)
            return cls(
                kind,
                preprocessor,
                weights,
                train_config=TrainConfig(**document["train_config"]),
                loss_config=LossConfig(**document["loss_config"]),
                training_log=tuple(EpochLog.from_dict(e) for e in document["training_log"]),
                optimizer=optimizer,
                seed=int(document["seed"]),
            )
        except errors.ShapeMismatchError as e:
            raise errors.DimensionMismatchError(str(e)) from e
        except (KeyError, TypeError, ValueError) as e:
            raise errors.CheckpointError(f"Checkpoint is incomplete or invalid: {e}") from e

    @classmethod
    def load(cls, path: str|Path) -> Self:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise errors.CheckpointError(f"{path} is not a JSON document") from e
        return cls.from_document(document)


def fit(
        dataset: TrainingSet,
        train_config: TrainConfig=TrainConfig(),
        loss_config: LossConfig=LossConfig(),
        *,
        preprocessor: PreprocessorState,
        initial: Checkpoint|None=None,
        threads: int=1,
        watchers: Sequence[_EpochCallback]=(),
        setup: Callable[[Trainer], object]|None=None
) -> Checkpoint:
    """Train the conditional model

    :param dataset: :class:`TrainingSet`
    :param preprocessor: :class:`PreprocessorState` The state the features were made with
    :param initial: :class:`Checkpoint|None` Continue this run: its weights, optimiser
        state and log carry over, and ``train_config.epochs`` more epochs are trained
    :param threads: :class:`int` Worker threads for per-shard passes
    :param watchers: Epoch callbacks, see :meth:`Trainer.epoch_end`
    :param setup: Called with the :class:`Trainer` before the first epoch, for
        callbacks that need the trainer itself

    Returns
    -------
    :class:`Checkpoint`
        Weights are rounded to their stored precision, so the checkpoint
        round-trips through :meth:`Checkpoint.save` unchanged.

    Raises
    ------
    :class:`NonFiniteError`
        Training diverged
    """
    if initial is not None:
        if initial.kind is not ModelKind.CONDITIONAL:
            raise errors.CheckpointError("Only conditional checkpoints can be resumed")
        weights = initial.weights.copy()
        history = list(initial.training_log)
        state = initial.optimizer
    else:
        weights = NetworkWeights.initialize(train_config.net_config(preprocessor), train_config.seed)
        history = []
        state = None
    if weights.config.n_continuous != dataset.features.continuous.shape[1]:
        raise errors.DimensionMismatchError("Network input does not match the feature count")

    trainer = Trainer(dataset, weights, train_config, loss_config, threads=threads, state=state)
    trainer.log = history
    for watcher in watchers:
        trainer.epoch_end(watcher)
    if setup is not None:
        setup(trainer)
    trainer.run()

    return Checkpoint(
        ModelKind.CONDITIONAL,
        preprocessor,
        trainer.weights,
        train_config=train_config,
        loss_config=loss_config,
        training_log=tuple(trainer.log),
        optimizer=trainer.state,
        seed=train_config.seed,
    )
