# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import math
from typing import Optional, Sequence, Union

import numpy as np

from .errors import NormLabError

# Reference precision for every tensor produced by this package.
DTYPE = np.float64

Shape = Sequence[int]
Axis = Optional[Union[int, tuple[int, ...]]]


def _validate_shape(shape: Shape) -> tuple[int, ...]:
    shape = tuple(int(dim) for dim in shape)
    if len(shape) == 0:
        raise NormLabError("tensor shape must have at least one dimension")
    for dim in shape:
        if dim < 1:
            raise NormLabError(f"tensor dimensions must be >= 1, got {list(shape)}")
    return shape


class Tensor:
    """Dense row-major float64 array with an explicit shape.

    The wrapped array is read-only, so a Tensor never changes after
    construction. Non-finite values are rejected at construction time.
    """
    shape: tuple[int, ...]
    data: np.ndarray

    def __init__(self, values, shape: Optional[Shape] = None):
        arr = np.array(values, dtype=DTYPE, order="C")
        if shape is not None:
            shape = _validate_shape(shape)
            if math.prod(shape) != arr.size:
                raise NormLabError(
                    f"shape {list(shape)} needs {math.prod(shape)} elements, got {arr.size}")
            arr = arr.reshape(shape)
        else:
            if arr.ndim == 0:
                arr = arr.reshape(1)
            _validate_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise NormLabError(f"non-finite value in tensor of shape {list(arr.shape)}")

        arr.flags.writeable = False
        self.data = arr
        self.shape = arr.shape

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def numel(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """Returns the row-major flat view of the elements."""
        return self.data.reshape(-1)

    def tolist(self) -> list:
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, data={self.data.tolist()})"


class Rng:
    """Seeded random stream; identical seeds and call sequences repeat exactly."""
    seed: int

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise NormLabError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape: Shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=tuple(shape))

    def uniform(self, shape: Shape, low: float, high: float) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, salt: int) -> "Rng":
        """Returns an independent stream derived from this seed."""
        return Rng((self.seed * 1_000_003 + salt) % 2**64)


def zeros(shape: Shape) -> Tensor:
    return full(shape, 0.0)


def ones(shape: Shape) -> Tensor:
    return full(shape, 1.0)


def full(shape: Shape, value: float) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), value, dtype=DTYPE))


def randn(rng: Rng, shape: Shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    """I.i.d. Gaussian samples."""
    shape = _validate_shape(shape)
    if std < 0:
        raise NormLabError(f"std must be >= 0, got {std}")
    if std == 0:
        return full(shape, mean)
    return Tensor(rng.normal(shape, mean, std))


def _compatible(a: Tensor, b: Tensor, op: str):
    # Equal shapes, or b is a row / column broadcast of a (size-1 axes).
    if a.shape == b.shape:
        return
    if b.ndim == a.ndim and all(bd in (1, ad) for ad, bd in zip(a.shape, b.shape)):
        return
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return
    raise NormLabError(f"{op}: incompatible shapes {list(a.shape)} and {list(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _compatible(a, b, "add")
    return Tensor(a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _compatible(a, b, "sub")
    return Tensor(a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _compatible(a, b, "mul")
    return Tensor(a.data * b.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    _compatible(a, b, "div")
    if np.any(b.data == 0):
        raise NormLabError(f"div: zero divisor in tensor of shape {list(b.shape)}")
    return Tensor(a.data / b.data)


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor(a.data * float(factor))


def _check_axis(t: Tensor, axis: Axis, op: str):
    axes = (axis,) if isinstance(axis, int) else (axis or ())
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise NormLabError(f"{op}: axis {ax} out of range for shape {list(t.shape)}")


def _reduced(result: np.ndarray, axis: Axis, keepdims: bool):
    if axis is None and not keepdims:
        return float(result)
    return Tensor(result)


def sum(t: Tensor, axis: Axis = None, keepdims: bool = False):
    _check_axis(t, axis, "sum")
    return _reduced(np.sum(t.data, axis=axis, keepdims=keepdims), axis, keepdims)


def mean(t: Tensor, axis: Axis = None, keepdims: bool = False):
    _check_axis(t, axis, "mean")
    return _reduced(np.mean(t.data, axis=axis, keepdims=keepdims), axis, keepdims)


def var_uncorrected(t: Tensor, axis: Axis = None, keepdims: bool = False):
    """Mean of squared deviations along axis (divides by N, not N - 1)."""
    _check_axis(t, axis, "var_uncorrected")
    return _reduced(np.var(t.data, axis=axis, ddof=0, keepdims=keepdims), axis, keepdims)


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0):
        raise NormLabError(f"sqrt: negative element in tensor of shape {list(t.shape)}")
    return Tensor(np.sqrt(t.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NormLabError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return Tensor(a.data @ b.data)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise NormLabError(f"transpose: expected rank 2, got shape {list(t.shape)}")
    return Tensor(np.ascontiguousarray(t.data.T))


def reshape(t: Tensor, shape: Shape) -> Tensor:
    shape = _validate_shape(shape)
    if math.prod(shape) != t.numel():
        raise NormLabError(f"reshape: cannot view shape {list(t.shape)} as {list(shape)}")
    return Tensor(t.data.reshape(shape))


def slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= t.shape[0]:
        raise NormLabError(
            f"slice_rows: [{start}, {stop}) out of range for shape {list(t.shape)}")
    return Tensor(t.data[start:stop])


def take_rows(t: Tensor, indices: np.ndarray) -> Tensor:
    """Gathers rows (along axis 0) in the given order."""
    return Tensor(t.data[np.asarray(indices, dtype=np.int64)])
