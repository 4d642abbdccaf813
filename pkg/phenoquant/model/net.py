"""
The conditional quantile network.

Two bias-free embedding tables (tree species, habitat) are concatenated with
the continuous covariates and fed through a stack of ReLU layers. A learned
projection of the input is added to the pre-activation of one inner layer,
and an affine head emits the raw curve parameters of all quantiles.

Forward and backward passes are written out by hand over numpy arrays and
work on whole batches at once.
"""
from collections.abc import Iterator, Mapping
import dataclasses
import logging
from typing import Self

import numpy as np
from numpy.typing import NDArray
from scipy.special import logit

from .. import errors
from ..misc.const import HABITAT_DIM, N_CURVE_PARAMS, N_OUTPUTS, QUANTILES, SPECIES_DIM
from .features import FeatureMatrix, PixelFeatures, PreprocessorState

__all__ = (
    "NetConfig",
    "NetworkWeights",
    "ForwardCache",
    "forward",
    "forward_batch",
    "backward",
    "export_embeddings",
)

EMBEDDING_INIT = 0.05
HEAD_INIT_SCALE = 0.1

# Starting curve per quantile block: levels, dates and transition widths
_PRIOR_LOW = (0.25, 0.30, 0.35)
_PRIOR_HIGH = (0.65, 0.72, 0.79)
_PRIOR_SOS = 0.3
_PRIOR_SEN = 0.75
_PRIOR_WIDTH = 0.1


@dataclasses.dataclass(frozen=True)
class NetConfig:
    """Architecture of the network

    :param n_continuous: :class:`int` Number of continuous covariates
    :param n_species: :class:`int` Known species, the table gets one more row for Unknown
    :param n_habitats: :class:`int` Known habitats, the table gets one more row for Unknown
    :param width: :class:`int` Hidden units per layer
    :param depth: :class:`int` Number of hidden ReLU layers
    :param skip_into: :class:`int` 1-based layer receiving the input projection
    """
    n_continuous: int
    n_species: int
    n_habitats: int
    species_dim: int = SPECIES_DIM
    habitat_dim: int = HABITAT_DIM
    width: int = 256
    depth: int = 8
    skip_into: int = 5
    n_outputs: int = N_OUTPUTS

    def __post_init__(self):
        if min(self.n_continuous, self.n_species, self.n_habitats) < 0:
            raise ValueError("Feature counts must be non-negative")
        if min(self.species_dim, self.habitat_dim, self.width, self.depth, self.n_outputs) < 1:
            raise ValueError("Network dimensions must be positive")
        if not 1 <= self.skip_into <= self.depth:
            raise ValueError(f"skip_into must name one of the {self.depth} layers, was {self.skip_into}")

    @property
    def input_dim(self) -> int:
        return self.n_continuous + self.species_dim + self.habitat_dim

    @classmethod
    def for_preprocessor(cls, state: PreprocessorState, **kwargs) -> Self:
        return cls(state.n_continuous, state.n_species, state.n_habitats, **kwargs)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Declared shape of every weight array, in canonical order"""
        shapes = {
            "species_embedding": (self.n_species + 1, self.species_dim),
            "habitat_embedding": (self.n_habitats + 1, self.habitat_dim),
        }
        fan_in = self.input_dim
        for layer in range(1, self.depth + 1):
            shapes[f"linear_{layer}.weight"] = (fan_in, self.width)
            shapes[f"linear_{layer}.bias"] = (self.width,)
            fan_in = self.width
        shapes["skip_projection"] = (self.input_dim, self.width)
        shapes["head.weight"] = (self.width, self.n_outputs)
        shapes["head.bias"] = (self.n_outputs,)
        return shapes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _prior_head_bias(n_outputs: int) -> NDArray[np.float64]:
    if n_outputs != N_OUTPUTS:
        return np.zeros(n_outputs)
    width = np.log(np.expm1(_PRIOR_WIDTH))
    blocks = []
    for low, high in zip(_PRIOR_LOW, _PRIOR_HIGH):
        blocks.append([
            logit((low + 0.1) / 1.1),
            logit((high - low) / (1.0 - low)),
            logit(_PRIOR_SOS),
            logit(_PRIOR_SEN),
            width,
            width,
        ])
    return np.asarray(blocks, dtype=np.float64).reshape(len(QUANTILES) * N_CURVE_PARAMS)


@dataclasses.dataclass
class NetworkWeights:
    """All trainable arrays of the network, addressed by name

    :param config: :class:`NetConfig`
    :param arrays: :class:`dict[str, NDArray]` Arrays in the order of :meth:`NetConfig.shapes`

    .. note::
        Gradients returned by :func:`backward` use this class too.
    """
    config: NetConfig
    arrays: dict[str, NDArray[np.float64]]

    def __post_init__(self):
        self.check_shapes()

    def __getitem__(self, name: str) -> NDArray[np.float64]:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def check_shapes(self) -> None:
        """
        Raises
        ------
        :class:`ShapeMismatchError`
            An array is missing or its shape disagrees with the configuration
        """
        expected = self.config.shapes()
        if list(self.arrays) != list(expected):
            raise errors.ShapeMismatchError(
                f"Weight names {sorted(self.arrays)} do not match the architecture {sorted(expected)}"
            )
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise errors.ShapeMismatchError(
                    f"{name} has shape {self.arrays[name].shape}, expected {shape}"
                )

    @classmethod
    def initialize(cls, config: NetConfig, seed: int) -> Self:
        """He-uniform ReLU layers, small uniform embeddings and skip projection"""
        rng = np.random.default_rng(seed)
        arrays: dict[str, NDArray[np.float64]] = {}
        for name, shape in config.shapes().items():
            if name.endswith("embedding") or name == "skip_projection":
                arrays[name] = rng.uniform(-EMBEDDING_INIT, EMBEDDING_INIT, shape)
            elif name == "head.bias":
                arrays[name] = _prior_head_bias(config.n_outputs)
            elif name.endswith(".bias"):
                arrays[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / shape[0])
                if name == "head.weight":
                    bound *= HEAD_INIT_SCALE
                arrays[name] = rng.uniform(-bound, bound, shape)
        logging.debug("Initialised network with %d parameters", sum(a.size for a in arrays.values()))
        return cls(config, arrays)

    def zeros_like(self) -> Self:
        return type(self)(self.config, {name: np.zeros_like(a) for name, a in self.arrays.items()})

    def copy(self) -> Self:
        return type(self)(self.config, {name: a.copy() for name, a in self.arrays.items()})

    def map(self, func) -> Self:
        return type(self)(self.config, {name: func(a) for name, a in self.arrays.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def flat_size(self) -> int:
        return sum(a.size for a in self.arrays.values())


@dataclasses.dataclass(frozen=True)
class ForwardCache:
    """Activations kept by :func:`forward_batch` for :func:`backward`"""
    inputs: NDArray[np.float64]
    pre_activations: tuple[NDArray[np.float64], ...]
    hidden: tuple[NDArray[np.float64], ...]
    species: NDArray[np.int64]
    habitat: NDArray[np.float64]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def _check_features(config: NetConfig, features: FeatureMatrix) -> None:
    if features.continuous.shape[1:] != (config.n_continuous,):
        raise errors.ShapeMismatchError(
            f"Expected {config.n_continuous} continuous features, got {features.continuous.shape[1:]}"
        )
    if features.habitat.shape[1:] != (config.n_habitats + 1,):
        raise errors.ShapeMismatchError(
            f"Expected {config.n_habitats + 1} habitat weights, got {features.habitat.shape[1:]}"
        )
    species = features.species
    if species.size and (species.min() < 0 or species.max() > config.n_species):
        raise errors.ShapeMismatchError(
            f"Species index out of bounds for a table of {config.n_species + 1} rows"
        )


def forward_batch(
        weights: NetworkWeights,
        features: FeatureMatrix
) -> tuple[NDArray[np.float64], ForwardCache]:
    """Raw outputs of a batch of pixels

    Returns
    -------
    :class:`tuple[NDArray, ForwardCache]`
        Raw outputs of shape ``(n, 18)`` and the cache for :func:`backward`

    Raises
    ------
    :class:`ShapeMismatchError`
        Feature dimensions or category indices do not fit the network
    """
    config = weights.config
    _check_features(config, features)

    habitat_vector = features.habitat @ weights["habitat_embedding"]
    inputs = np.concatenate(
        [features.continuous, weights["species_embedding"][features.species], habitat_vector],
        axis=1
    )

    pre_activations = []
    hidden = [inputs]
    h = inputs
    for layer in range(1, config.depth + 1):
        pre = h @ weights[f"linear_{layer}.weight"] + weights[f"linear_{layer}.bias"]
        if layer == config.skip_into:
            pre = pre + inputs @ weights["skip_projection"]
        h = np.maximum(pre, 0.0)
        pre_activations.append(pre)
        hidden.append(h)
    outputs = h @ weights["head.weight"] + weights["head.bias"]

    cache = ForwardCache(
        inputs,
        tuple(pre_activations),
        tuple(hidden),
        features.species,
        features.habitat,
    )
    return outputs, cache


def forward(
        weights: NetworkWeights,
        features: PixelFeatures
) -> tuple[NDArray[np.float64], ForwardCache]:
    """Raw outputs (18 values, three quantile blocks of six) of a single pixel"""
    habitats = list(features.habitat_weights)
    if habitats and (min(habitats) < 0 or max(habitats) > weights.config.n_habitats):
        raise errors.ShapeMismatchError("Habitat index out of bounds")
    if np.size(features.continuous) != weights.config.n_continuous:
        raise errors.ShapeMismatchError(
            f"Expected {weights.config.n_continuous} continuous features, got {np.size(features.continuous)}"
        )
    matrix = FeatureMatrix.from_features(
        [features], weights.config.n_continuous, weights.config.n_habitats
    )
    outputs, cache = forward_batch(weights, matrix)
    return outputs[0], cache


def backward(
        weights: NetworkWeights,
        cache: ForwardCache,
        output_gradient: NDArray[np.float64]
) -> NetworkWeights:
    """Gradient of a scalar loss with respect to every weight

    :param weights: :class:`NetworkWeights` The weights the cache was computed with
    :param cache: :class:`ForwardCache` From :func:`forward_batch`
    :param output_gradient: :class:`NDArray` Loss gradient with respect to the raw outputs,
        shaped ``(n, 18)`` or ``(18,)`` for a single pixel

    Returns
    -------
    :class:`NetworkWeights`
        Gradients summed over the batch

    Raises
    ------
    :class:`ShapeMismatchError`
        The cache or gradient does not belong to these weights
    """
    config = weights.config
    grad_out = np.asarray(output_gradient, dtype=np.float64).reshape(-1, config.n_outputs)
    if grad_out.shape[0] != cache.batch_size or len(cache.pre_activations) != config.depth:
        raise errors.ShapeMismatchError("Output gradient or cache does not match the forward pass")
    if cache.inputs.shape[1] != config.input_dim:
        raise errors.ShapeMismatchError("Cache input width does not match the network")

    grads: dict[str, NDArray[np.float64]] = {}
    grads["head.weight"] = cache.hidden[-1].T @ grad_out
    grads["head.bias"] = grad_out.sum(axis=0)

    grad_inputs = np.zeros_like(cache.inputs)
    grad_h = grad_out @ weights["head.weight"].T
    for layer in range(config.depth, 0, -1):
        grad_pre = grad_h * (cache.pre_activations[layer - 1] > 0.0)
        grads[f"linear_{layer}.weight"] = cache.hidden[layer - 1].T @ grad_pre
        grads[f"linear_{layer}.bias"] = grad_pre.sum(axis=0)
        if layer == config.skip_into:
            grads["skip_projection"] = cache.inputs.T @ grad_pre
            grad_inputs += grad_pre @ weights["skip_projection"].T
        grad_h = grad_pre @ weights[f"linear_{layer}.weight"].T
    grad_inputs += grad_h

    species_start = config.n_continuous
    habitat_start = species_start + config.species_dim
    grad_species = np.zeros_like(weights["species_embedding"])
    np.add.at(grad_species, cache.species, grad_inputs[:, species_start:habitat_start])
    grads["species_embedding"] = grad_species
    grads["habitat_embedding"] = cache.habitat.T @ grad_inputs[:, habitat_start:]

    return NetworkWeights(config, {name: grads[name] for name in config.shapes()})


def export_embeddings(
        weights: NetworkWeights,
        state: PreprocessorState
) -> dict[str, Mapping[str, list[float]]]:
    """Learned embedding vectors keyed by the original category codes"""
    return {
        "species": {
            code: weights["species_embedding"][i].tolist() for i, code in enumerate(state.species_codes)
        },
        "habitat": {
            code: weights["habitat_embedding"][i].tolist() for i, code in enumerate(state.habitat_codes)
        },
    }
