"""Dense float64 vector arithmetic for parameter points.

A parameter point is a 1-D, read-only ``numpy.ndarray`` of dtype float64.
Reductions are accumulated left to right in index order (``np.add.accumulate``)
so that results do not depend on BLAS kernels or thread counts.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from fedavg_lab.errors import DimensionError, NumericError

ParamVector = np.ndarray


def param(values: Iterable[float] | np.ndarray) -> ParamVector:
    """Build an immutable parameter point from any 1-D sequence of reals."""
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if arr.size == 0:
        raise DimensionError("parameter vector must have length >= 1")
    if not np.all(np.isfinite(arr)):
        raise NumericError("parameter vector has non-finite entries")
    arr.flags.writeable = False
    return arr


def zeros(dim: int) -> ParamVector:
    if dim < 1:
        raise DimensionError(f"dimension must be >= 1, got {dim}")
    arr = np.zeros(dim, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")


def _freeze(arr: np.ndarray) -> ParamVector:
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite result")
    arr.flags.writeable = False
    return arr


def _seqsum(terms: np.ndarray) -> float:
    return float(np.add.accumulate(terms)[-1])


def axpy(y: ParamVector, s: float, x: ParamVector) -> ParamVector:
    """Return ``y + s*x`` as a new vector; operands are left untouched."""
    _check_pair(y, x)
    if not np.isfinite(s):
        raise NumericError(f"scalar is not finite: {s}")
    with np.errstate(over="ignore", invalid="ignore"):
        return _freeze(y + s * x)


def add(x: ParamVector, y: ParamVector) -> ParamVector:
    _check_pair(x, y)
    return _freeze(x + y)


def sub(x: ParamVector, y: ParamVector) -> ParamVector:
    _check_pair(x, y)
    return _freeze(x - y)


def scale(s: float, x: ParamVector) -> ParamVector:
    if not np.isfinite(s):
        raise NumericError(f"scalar is not finite: {s}")
    return _freeze(s * x)


def dot(x: ParamVector, y: ParamVector) -> float:
    _check_pair(x, y)
    return _seqsum(x * y)


def norm_sq(x: ParamVector) -> float:
    # Same product and accumulation order as dot(x, x).
    return _seqsum(x * x)


def norm(x: ParamVector) -> float:
    return float(np.sqrt(norm_sq(x)))


def mean(vectors: list[ParamVector]) -> ParamVector:
    """Arithmetic mean, summed in list order then divided by the count."""
    if not vectors:
        raise DimensionError("mean of an empty list")
    acc = np.array(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        _check_pair(acc, v)
        acc = acc + v
    return _freeze(acc / len(vectors))
