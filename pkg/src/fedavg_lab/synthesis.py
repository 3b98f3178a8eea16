"""Deterministic synthetic datasets, partitions and starting points built from a config.

Heterogeneity is controlled by ``objective.spread``: with ``spread = 0`` every
shard is drawn from the same distribution.

* ``quadratic``: points ``center_c + e_i`` with ``center_c = c0 + spread * z_c``.
  Each shard's noise is re-centred, so the shard mean equals ``center_c``
  exactly and the global minimiser is the mean of the centres.
* ``linear-ls``: ``x_i ~ N(0, I/d)`` and ``y_i = <x_i, w_c> + noise * e_i`` with
  ``w_c = w0 + spread * z_c``.
* ``two-layer-relu``: ``x_i`` uniform on the unit sphere, labels from a random
  teacher network of the same shape, shifted per client by ``spread * s_c``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from fedavg_lab import numerics
from fedavg_lab.config import ExperimentConfig
from fedavg_lab.errors import ConfigError
from fedavg_lab.numerics import ParamVector
from fedavg_lab.objectives import (
    ClientPartition,
    LabeledDataset,
    Problem,
    TwoLayerReLU,
    make_objective,
)

_KIND_CODE = {"quadratic": 1, "linear-ls": 2, "two-layer-relu": 3}


def _rng(seed: int, kind: str, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _KIND_CODE[kind], stream]))


def make_partition(n: int, N: int, policy: str) -> ClientPartition:
    if N > n:
        raise ConfigError(f"clients.N: {N} clients exceed the {n} available points")
    if policy == "contiguous":
        return ClientPartition.contiguous(n, N)
    if policy == "interleaved":
        return ClientPartition.interleaved(n, N)
    raise ConfigError(f"clients.partition: unknown policy {policy!r}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / math.sqrt(float(v @ v))


def synthesize_dataset(cfg: ExperimentConfig, seed: int | None = None) -> tuple[LabeledDataset, ClientPartition]:
    obj = cfg.objective
    seed = obj.data_seed if seed is None else seed
    if obj.data_csv is not None:
        data = LabeledDataset.from_csv(obj.data_csv)
        return data, make_partition(data.n, cfg.clients.N, cfg.clients.partition)
    n, d, N = obj.n, obj.d, cfg.clients.N
    part = make_partition(n, N, cfg.clients.partition)
    rng = _rng(seed, obj.kind, 0)
    x = np.empty((n, d))
    y = np.zeros(n)
    if obj.kind == "quadratic":
        c0 = rng.standard_normal(d)
        for shard in part.shards:
            center = c0 + obj.spread * rng.standard_normal(d)
            noise = obj.noise * rng.standard_normal((shard.size, d))
            x[shard] = center + (noise - noise.mean(axis=0))
    elif obj.kind == "linear-ls":
        w0 = rng.standard_normal(d)
        for shard in part.shards:
            wc = w0 + obj.spread * rng.standard_normal(d)
            xs = rng.standard_normal((shard.size, d)) / math.sqrt(d)
            x[shard] = xs
            y[shard] = xs @ wc + obj.noise * rng.standard_normal(shard.size)
    else:
        teacher = _relu_model(cfg)
        Wt = rng.standard_normal((teacher.width, d))
        pts = rng.standard_normal((n, d))
        x[:] = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        a = np.asarray(teacher.output) / math.sqrt(teacher.width)
        clean = np.maximum(x @ Wt.T, 0.0) @ a
        for shard in part.shards:
            shift = obj.spread * rng.standard_normal()
            y[shard] = clean[shard] + shift + obj.noise * rng.standard_normal(shard.size)
    return LabeledDataset(x, y), part


def _relu_model(cfg: ExperimentConfig) -> TwoLayerReLU:
    return make_objective("two-layer-relu", hidden=cfg.objective.hidden, seed=cfg.objective.data_seed)


def initial_point(cfg: ExperimentConfig, data: LabeledDataset, partition: ClientPartition) -> ParamVector:
    """Starting point ``U^0``.

    For the quadratic it sits at distance ``sqrt(2) * init_scale`` from the
    global minimiser, so the initial gap is ``scale * init_scale^2``.
    """
    obj = cfg.objective
    rng = _rng(obj.data_seed, obj.kind, 1)
    s = obj.init_scale
    if obj.kind == "quadratic":
        centers = np.array([data.x[sh].mean(axis=0) for sh in partition.shards])
        cbar = centers.mean(axis=0)
        return numerics.param(cbar + math.sqrt(2.0) * s * _unit(rng.standard_normal(data.d)))
    if obj.kind == "linear-ls":
        return numerics.param(s * _unit(rng.standard_normal(data.d)))
    width = obj.hidden
    return numerics.param(s * rng.standard_normal(width * data.d) / math.sqrt(data.d))


def build_problem(cfg: ExperimentConfig) -> Problem:
    data, part = synthesize_dataset(cfg)
    obj = cfg.objective
    spec = make_objective(obj.kind, scale=obj.scale, hidden=obj.hidden, seed=obj.data_seed)
    return Problem(spec, data, part, initial_point(cfg, data, part))


def dataset_hash(data: LabeledDataset, partition: ClientPartition) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.x).tobytes())
    h.update(np.ascontiguousarray(data.y).tobytes())
    for shard in partition.shards:
        h.update(b"|")
        h.update(np.ascontiguousarray(shard).tobytes())
    return h.hexdigest()
