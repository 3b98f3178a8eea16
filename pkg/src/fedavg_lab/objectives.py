"""Client losses, the averaged global loss, exact and stochastic gradients.

Every client loss has the form ``L_c(W) = 1/2 * sum_{i in S_c} r_i(W)^2`` for
the least-squares kinds, and ``L_c(W) = s/2 * ||W - center_c||^2`` for the
quadratic calibration kind (``center_c`` is the mean of the shard's points).
The global loss is the plain mean of the client losses.

Stochastic gradients draw ``B`` shard indices uniformly with replacement and
rescale the per-point contributions so that their expectation is the exact
client gradient.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from fedavg_lab import numerics
from fedavg_lab.errors import ConfigError, DimensionError, PartitionError
from fedavg_lab.numerics import ParamVector


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DimensionError(f"points must form an (n, d) array with n, d >= 1, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise DimensionError(f"{x.shape[0]} points but {y.shape[0]} labels")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DimensionError("dataset contains non-finite entries")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_csv(cls, path: str | Path) -> "LabeledDataset":
        """Read a CSV with header ``x_1,...,x_d,y``."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ConfigError(f"{path}: empty CSV") from None
            d = len(header) - 1
            expected = [f"x_{j}" for j in range(1, d + 1)] + ["y"]
            if d < 1 or header != expected:
                raise ConfigError(f"{path}: header must be {','.join(expected) if d >= 1 else 'x_1,...,x_d,y'}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != d + 1:
                    raise ConfigError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise ConfigError(f"{path}: no data rows")
        arr = np.array(rows, dtype=np.float64)
        return cls(arr[:, :d], arr[:, d])


@dataclass(frozen=True)
class ClientPartition:
    shards: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        shards = tuple(_readonly(np.array(s, dtype=np.int64).reshape(-1)) for s in self.shards)
        if not shards:
            raise PartitionError("partition needs at least one shard")
        for c, s in enumerate(shards):
            if s.size == 0:
                raise PartitionError(f"shard {c} is empty")
        object.__setattr__(self, "shards", shards)

    @property
    def N(self) -> int:
        return len(self.shards)

    def validate(self, n: int) -> None:
        allidx = np.concatenate(self.shards)
        if allidx.min() < 0 or allidx.max() >= n:
            raise PartitionError(f"shard index out of range [0, {n})")
        if allidx.size != n or np.unique(allidx).size != n:
            raise PartitionError("shards must be pairwise disjoint and cover every point")

    @classmethod
    def contiguous(cls, n: int, N: int) -> "ClientPartition":
        if N < 1 or N > n:
            raise PartitionError(f"cannot split {n} points over {N} clients")
        return cls(tuple(np.array_split(np.arange(n), N)))

    @classmethod
    def interleaved(cls, n: int, N: int) -> "ClientPartition":
        if N < 1 or N > n:
            raise PartitionError(f"cannot split {n} points over {N} clients")
        return cls(tuple(np.arange(c, n, N) for c in range(N)))


@dataclass(frozen=True)
class BatchSampler:
    """Uniform with-replacement index draws keyed by (seed, client, round, step)."""

    batch_size: int
    seed: int = 0
    client: int = 0
    round: int = 0
    step: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.client, self.round, self.step]))

    def draw(self, shard_size: int) -> np.ndarray:
        if shard_size < 1:
            raise PartitionError("cannot sample from an empty shard")
        return self.rng().integers(0, shard_size, size=self.batch_size)


class ObjectiveSpec(Protocol):
    kind: str

    def dim(self, data: LabeledDataset) -> int: ...

    def value(self, data: LabeledDataset, idx: np.ndarray, W: ParamVector) -> float: ...

    def gradient(self, data: LabeledDataset, idx: np.ndarray, W: ParamVector) -> np.ndarray: ...

    def point_grads(self, data: LabeledDataset, picks: np.ndarray, W: ParamVector, shard_size: int) -> np.ndarray:
        """Per-point contributions; summing them over the whole shard gives ``gradient``."""
        ...


@dataclass(frozen=True)
class Quadratic:
    scale: float = 1.0
    kind: str = field(default="quadratic", init=False)

    def dim(self, data: LabeledDataset) -> int:
        return data.d

    def center(self, data: LabeledDataset, idx: np.ndarray) -> np.ndarray:
        return data.x[idx].mean(axis=0)

    def value(self, data, idx, W):
        diff = W - self.center(data, idx)
        return 0.5 * self.scale * numerics.norm_sq(diff)

    def gradient(self, data, idx, W):
        return self.scale * (W - self.center(data, idx))

    def point_grads(self, data, picks, W, shard_size):
        return self.scale * (W[None, :] - data.x[picks]) / shard_size


@dataclass(frozen=True)
class LinearLeastSquares:
    kind: str = field(default="linear-ls", init=False)

    def dim(self, data: LabeledDataset) -> int:
        return data.d

    def residuals(self, data, idx, W):
        return data.x[idx] @ W - data.y[idx]

    def value(self, data, idx, W):
        return 0.5 * numerics.norm_sq(self.residuals(data, idx, W))

    def gradient(self, data, idx, W):
        return data.x[idx].T @ self.residuals(data, idx, W)

    def point_grads(self, data, picks, W, shard_size):
        r = self.residuals(data, picks, W)
        return r[:, None] * data.x[picks]


@dataclass(frozen=True)
class TwoLayerReLU:
    """``f(x) = m^{-1/2} * sum_j a_j relu(<w_j, x>)`` with the sign vector ``a`` frozen.

    The trainable first layer is flattened row-major, so ``D = m * d``.
    The ReLU derivative at 0 is taken to be 0.
    """

    output: tuple[float, ...]
    kind: str = field(default="two-layer-relu", init=False)

    @property
    def width(self) -> int:
        return len(self.output)

    @classmethod
    def random(cls, width: int, seed: int) -> "TwoLayerReLU":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A]))
        signs = rng.integers(0, 2, size=width) * 2 - 1
        return cls(tuple(float(s) for s in signs))

    def dim(self, data: LabeledDataset) -> int:
        return self.width * data.d

    def _forward(self, data, idx, W):
        Wm = W.reshape(self.width, data.d)
        pre = data.x[idx] @ Wm.T
        a = np.asarray(self.output) / math.sqrt(self.width)
        out = np.maximum(pre, 0.0) @ a
        return pre, a, out - data.y[idx]

    def residuals(self, data, idx, W):
        return self._forward(data, idx, W)[2]

    def value(self, data, idx, W):
        return 0.5 * numerics.norm_sq(self.residuals(data, idx, W))

    def gradient(self, data, idx, W):
        pre, a, r = self._forward(data, idx, W)
        coef = r[:, None] * (pre > 0.0) * a[None, :]
        return (coef.T @ data.x[idx]).reshape(-1)

    def point_grads(self, data, picks, W, shard_size):
        pre, a, r = self._forward(data, picks, W)
        coef = r[:, None] * (pre > 0.0) * a[None, :]
        return (coef[:, :, None] * data.x[picks][:, None, :]).reshape(len(picks), -1)


KINDS = ("quadratic", "linear-ls", "two-layer-relu")


def make_objective(kind: str, *, scale: float = 1.0, hidden: int = 32, seed: int = 0) -> ObjectiveSpec:
    if kind == "quadratic":
        return Quadratic(scale=scale)
    if kind == "linear-ls":
        return LinearLeastSquares()
    if kind == "two-layer-relu":
        return TwoLayerReLU.random(hidden, seed)
    raise ConfigError(f"unknown objective kind {kind!r}; expected one of {', '.join(KINDS)}")


def _check_point(spec: ObjectiveSpec, data: LabeledDataset, W: ParamVector) -> None:
    if W.ndim != 1 or W.shape[0] != spec.dim(data):
        raise DimensionError(f"parameter has length {W.shape[0]}, objective needs {spec.dim(data)}")


def _check_shard(data: LabeledDataset, shard: np.ndarray) -> np.ndarray:
    shard = np.asarray(shard, dtype=np.int64)
    if shard.size == 0:
        raise PartitionError("empty shard")
    if shard.min() < 0 or shard.max() >= data.n:
        raise PartitionError(f"shard index out of range [0, {data.n})")
    return shard


def local_loss(spec: ObjectiveSpec, data: LabeledDataset, shard: np.ndarray, W: ParamVector) -> float:
    shard = _check_shard(data, shard)
    _check_point(spec, data, W)
    return spec.value(data, shard, W)


def global_loss(spec: ObjectiveSpec, data: LabeledDataset, partition: ClientPartition, W: ParamVector) -> float:
    total = 0.0
    for shard in partition.shards:
        total += local_loss(spec, data, shard, W)
    return total / partition.N


def grad_local(spec: ObjectiveSpec, data: LabeledDataset, shard: np.ndarray, W: ParamVector) -> ParamVector:
    shard = _check_shard(data, shard)
    _check_point(spec, data, W)
    return numerics.param(spec.gradient(data, shard, W))


def grad_global(spec: ObjectiveSpec, data: LabeledDataset, partition: ClientPartition, W: ParamVector) -> ParamVector:
    return numerics.mean([grad_local(spec, data, s, W) for s in partition.shards])


def stoch_grad(
    spec: ObjectiveSpec, data: LabeledDataset, shard: np.ndarray, W: ParamVector, sampler: BatchSampler
) -> ParamVector:
    shard = _check_shard(data, shard)
    _check_point(spec, data, W)
    picks = shard[sampler.draw(shard.size)]
    contrib = spec.point_grads(data, picks, W, shard.size)
    return numerics.param(np.add.accumulate(contrib, axis=0)[-1] * (shard.size / sampler.batch_size))


@dataclass(frozen=True)
class Problem:
    """An objective bound to its data, partition and starting point."""

    objective: ObjectiveSpec
    data: LabeledDataset
    partition: ClientPartition
    init: ParamVector | None = None

    def __post_init__(self) -> None:
        self.partition.validate(self.data.n)
        if self.init is not None:
            _check_point(self.objective, self.data, self.init)

    @property
    def N(self) -> int:
        return self.partition.N

    @property
    def dim(self) -> int:
        return self.objective.dim(self.data)

    def loss(self, W: ParamVector) -> float:
        return global_loss(self.objective, self.data, self.partition, W)

    def grad(self, W: ParamVector) -> ParamVector:
        return grad_global(self.objective, self.data, self.partition, W)

    def client_loss(self, c: int, W: ParamVector) -> float:
        return local_loss(self.objective, self.data, self.partition.shards[c], W)

    def client_grad(self, c: int, W: ParamVector) -> ParamVector:
        return grad_local(self.objective, self.data, self.partition.shards[c], W)

    def client_stoch_grad(self, c: int, W: ParamVector, sampler: BatchSampler) -> ParamVector:
        return stoch_grad(self.objective, self.data, self.partition.shards[c], W, sampler)

    def components(self) -> list[tuple[str, Callable[[ParamVector], float], Callable[[ParamVector], ParamVector]]]:
        """The global loss followed by every client loss, as (name, value, gradient) triples."""
        out = [("global", self.loss, self.grad)]
        for c in range(self.N):
            out.append((f"client{c}", (lambda W, c=c: self.client_loss(c, W)), (lambda W, c=c: self.client_grad(c, W))))
        return out

    def with_init(self, init: ParamVector) -> "Problem":
        return Problem(self.objective, self.data, self.partition, init)
