import math

import numpy as np
import pytest

from fedavg_lab import numerics
from fedavg_lab.errors import ConfigError, DimensionError, PartitionError
from fedavg_lab.objectives import (
    BatchSampler,
    ClientPartition,
    LabeledDataset,
    LinearLeastSquares,
    Problem,
    Quadratic,
    TwoLayerReLU,
    global_loss,
    grad_local,
    local_loss,
    make_objective,
    stoch_grad,
)
from oracles import central_difference, fd_steps, relu_forward_loss


def _one_point_linear():
    return LabeledDataset(np.array([[1.0]]), np.array([0.0]))


def test_linear_single_point_value_and_gradient():
    data = _one_point_linear()
    shard = np.array([0])
    W = numerics.param([2.0])
    assert local_loss(LinearLeastSquares(), data, shard, W) == 2.0
    assert grad_local(LinearLeastSquares(), data, shard, W).tolist() == [2.0]


def test_interpolating_point_gives_zero_loss():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 3))
    w = numerics.param(rng.standard_normal(3))
    shard = np.arange(6)
    assert local_loss(LinearLeastSquares(), LabeledDataset(X, X @ w), shard, w) == pytest.approx(0.0, abs=1e-28)

    relu = TwoLayerReLU((1.0, -1.0, 1.0))
    W = numerics.param(rng.standard_normal(9))
    labels = relu.residuals(LabeledDataset(X, np.zeros(6)), shard, W)
    assert local_loss(relu, LabeledDataset(X, labels), shard, W) == 0.0

    q = Quadratic()
    data = LabeledDataset(X, np.zeros(6))
    center = numerics.param(q.center(data, shard))
    assert local_loss(q, data, shard, center) == 0.0
    assert np.all(grad_local(q, data, shard, center) == 0.0)


def test_relu_value_matches_forward_pass_oracle():
    X = np.array([[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]])
    y = np.array([0.3, -0.2, 1.1])
    signs = (1.0, -1.0, -1.0, 1.0)
    W = np.array([0.4, -0.3, 1.2, 0.8, -0.5, 0.9, 0.1, 0.7])
    expected = relu_forward_loss(X.tolist(), y.tolist(), W.tolist(), signs, 4)
    got = local_loss(TwoLayerReLU(signs), LabeledDataset(X, y), np.arange(3), numerics.param(W))
    assert got == pytest.approx(expected, rel=1e-14)


def test_global_loss_single_and_identical_shards():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 2))
    y = rng.standard_normal(4)
    W = numerics.param([0.3, -0.7])
    spec = LinearLeastSquares()
    single = LabeledDataset(X, y)
    assert global_loss(spec, single, ClientPartition((np.arange(4),)), W) == local_loss(spec, single, np.arange(4), W)

    doubled = LabeledDataset(np.vstack([X, X]), np.concatenate([y, y]))
    part = ClientPartition.contiguous(8, 2)
    assert global_loss(spec, doubled, part, W) == local_loss(spec, doubled, part.shards[0], W)


def test_global_loss_three_heterogeneous_quadratic_shards():
    # centres 0, 2 and -1 in one dimension, W = 1: values 0.5, 0.5, 2
    data = LabeledDataset(np.array([[0.0], [2.0], [-1.0]]), np.zeros(3))
    part = ClientPartition((np.array([0]), np.array([1]), np.array([2])))
    assert global_loss(Quadratic(), data, part, numerics.param([1.0])) == pytest.approx(3.0 / 3.0)


@pytest.mark.parametrize("kind", ["quadratic", "linear-ls", "two-layer-relu"])
def test_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    X = rng.standard_normal((12, 3))
    y = rng.standard_normal(12)
    data = LabeledDataset(X, y)
    spec = make_objective(kind, hidden=5, seed=3)
    shard = np.arange(12)
    D = spec.dim(data)
    for _ in range(10):
        W = rng.standard_normal(D)
        analytic = grad_local(spec, data, shard, numerics.param(W))
        numeric = central_difference(lambda v: local_loss(spec, data, shard, numerics.param(v)), W, fd_steps(W))
        mask = np.ones(D, dtype=bool)
        if kind == "two-layer-relu":
            pre = X @ W.reshape(5, 3).T
            near = np.abs(pre) < 1e-4 * (1.0 + np.abs(X).sum(axis=1, keepdims=True))
            mask = ~np.repeat(near.any(axis=0), 3)
        err = np.abs(analytic - numeric)[mask] / np.maximum(1.0, np.abs(numeric)[mask])
        assert np.all(err <= 1e-5)


def test_full_shard_batch_on_one_point_shard_is_exact():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((3, 2))
    data = LabeledDataset(X, rng.standard_normal(3))
    shard = np.array([1])
    for spec in (Quadratic(), LinearLeastSquares(), TwoLayerReLU((1.0, -1.0))):
        W = numerics.param(np.linspace(0.2, -0.4, spec.dim(data)))
        g = stoch_grad(spec, data, shard, W, BatchSampler(1, 0, 0, 1, 1))
        assert g.tolist() == grad_local(spec, data, shard, W).tolist()


def test_stochastic_gradient_is_unbiased():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 2))
    data = LabeledDataset(X, rng.standard_normal(5))
    shard = np.arange(5)
    spec = LinearLeastSquares()
    W = numerics.param([0.5, 1.5])
    M = 100_000
    draws = np.array([stoch_grad(spec, data, shard, W, BatchSampler(2, 7, 0, r, 1)) for r in range(1, M + 1)])
    exact = grad_local(spec, data, shard, W)
    se = draws.std(axis=0, ddof=1) / math.sqrt(M)
    assert np.all(np.abs(draws.mean(axis=0) - exact) <= 3.0 * se)


def test_same_stream_identifier_is_bit_identical():
    rng = np.random.default_rng(4)
    data = LabeledDataset(rng.standard_normal((9, 3)), rng.standard_normal(9))
    W = numerics.param(rng.standard_normal(3))
    a = stoch_grad(LinearLeastSquares(), data, np.arange(9), W, BatchSampler(4, 5, 1, 2, 3))
    b = stoch_grad(LinearLeastSquares(), data, np.arange(9), W, BatchSampler(4, 5, 1, 2, 3))
    c = stoch_grad(LinearLeastSquares(), data, np.arange(9), W, BatchSampler(4, 5, 1, 2, 4))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_partition_validation():
    with pytest.raises(PartitionError):
        Problem(Quadratic(), LabeledDataset(np.zeros((3, 1)), np.zeros(3)), ClientPartition((np.array([0, 1]),)))
    with pytest.raises(PartitionError):
        ClientPartition((np.array([0]), np.array([], dtype=int)))
    with pytest.raises(PartitionError):
        ClientPartition.contiguous(2, 3)
    part = ClientPartition.contiguous(4, 2)
    assert [s.tolist() for s in part.shards] == [[0, 1], [2, 3]]
    part = ClientPartition.interleaved(5, 2)
    assert [s.tolist() for s in part.shards] == [[0, 2, 4], [1, 3]]


def test_dataset_validation_and_csv(tmp_path):
    with pytest.raises(DimensionError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        LabeledDataset(np.array([[math.nan]]), np.zeros(1))
    good = tmp_path / "d.csv"
    good.write_text("x_1,x_2,y\n1,2,3\n4,5,6\n")
    data = LabeledDataset.from_csv(good)
    assert data.x.tolist() == [[1, 2], [4, 5]] and data.y.tolist() == [3, 6]
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,y\n1,2,3\n")
    with pytest.raises(ConfigError):
        LabeledDataset.from_csv(bad)


def test_unknown_kind_and_dimension_checks():
    with pytest.raises(ConfigError):
        make_objective("cubic")
    data = LabeledDataset(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        local_loss(LinearLeastSquares(), data, np.arange(2), numerics.param([1.0, 2.0, 3.0]))
