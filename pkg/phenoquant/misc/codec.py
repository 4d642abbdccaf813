import base64
import binascii

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ..errors import CheckpointError

ARRAY_DTYPE = "<f4"
"""Checkpoint arrays are little-endian 32-bit floats"""


def assemble_array(
        array: ArrayLike,
        dtype: str=ARRAY_DTYPE
) -> dict:
    try:
        values = np.asarray(array, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise TypeError(
            f"Could not cast array to float. Was {type(array)}"
        ) from e

    if not np.all(np.isfinite(values)):
        raise CheckpointError("Refusing to store an array with non-finite entries")

    payload = np.ascontiguousarray(values.astype(dtype)).tobytes()
    return {
        "shape": list(values.shape),
        "dtype": dtype,
        "data": base64.b64encode(payload).decode("ascii"),
    }


def disassemble_array(
        document: dict
) -> NDArray[np.float64]:
    try:
        shape = tuple(int(n) for n in document["shape"])
        dtype = np.dtype(document["dtype"])
        payload = base64.b64decode(document["data"], validate=True)
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"Array entry is incomplete: {e}") from e
    except binascii.Error as e:
        raise CheckpointError("Array payload is not valid base64") from e

    expected_size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    # Payload must hold exactly shape x itemsize bytes
    if len(payload) != expected_size:
        raise CheckpointError(
            f"Array payload size did not match its shape ({len(payload)} != {expected_size})"
        )

    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)


def quantize(array: ArrayLike, dtype: str=ARRAY_DTYPE) -> NDArray[np.float64]:
    """Round an array to what survives :func:`assemble_array`"""
    return np.asarray(array, dtype=np.float64).astype(dtype).astype(np.float64)
