"""Round-synchronous FedAvg and the centralized gradient-descent baseline.

Clients keep their local iterate as a displacement ``D`` from the broadcast
point ``U`` (``W_{c,k} = U + D_k``), so the delta sent to the server is ``D_K``
itself and, for one client taking one step, the server update reduces to the
same floating-point operation as a plain gradient step.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fedavg_lab import numerics
from fedavg_lab.errors import ConfigError, DivergenceError, NumericError
from fedavg_lab.numerics import ParamVector
from fedavg_lab.objectives import BatchSampler, Problem


@dataclass(frozen=True)
class FedConfig:
    N: int
    K: int
    eta_l: float
    eta_g: float
    R: int
    batch_size: int = 1
    master_seed: int = 0
    full_batch: bool = False

    def __post_init__(self) -> None:
        for name in ("N", "K", "R", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eta_l", "eta_g"):
            value = getattr(self, name)
            if not (value > 0 and np.isfinite(value)):
                raise ConfigError(f"{name} must be positive and finite, got {value}")
        if self.master_seed < 0:
            raise ConfigError(f"master_seed must be >= 0, got {self.master_seed}")

    @property
    def eta_tilde(self) -> float:
        """Effective per-round step ``K * eta_l * eta_g``."""
        return self.K * self.eta_l * self.eta_g

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RoundRecord:
    r: int
    loss: float
    grad_norm_sq: float
    xi_pre: float = 0.0
    xi_post: float = 0.0
    per_client_delta_norms: tuple[float, ...] = ()
    wall_time: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    """Iterates ``U^0..U^R`` plus one record per executed round (``r = 1..R``).

    A trajectory reloaded from a run log carries no iterates (``initial`` is
    ``None`` and ``iterates`` is empty).
    """

    kind: str
    initial: ParamVector | None
    initial_loss: float
    initial_grad_norm_sq: float
    rounds: tuple[RoundRecord, ...]
    iterates: tuple[ParamVector, ...]
    config: dict = field(default_factory=dict)
    constants: dict | None = None

    @property
    def final(self) -> ParamVector | None:
        return self.iterates[-1] if self.iterates else None

    @property
    def losses(self) -> list[float]:
        """Loss at ``U^0`` followed by the loss after every round."""
        return [self.initial_loss] + [rec.loss for rec in self.rounds]


def compute_drift(local_iterates: Sequence[Sequence[ParamVector]], U: ParamVector) -> tuple[float, float]:
    """Mean squared distance of local iterates from ``U``.

    ``local_iterates[c]`` holds ``W_{c,0}..W_{c,K}``. ``xi_pre`` averages over
    ``k = 0..K-1`` (so ``xi_pre = 0`` when ``K = 1``); ``xi_post`` over ``k = 1..K``.
    """
    if not local_iterates:
        return 0.0, 0.0
    K = len(local_iterates[0]) - 1
    if K < 1:
        raise ConfigError("each client needs at least W_0 and W_1")
    pre = post = 0.0
    for its in local_iterates:
        if len(its) != K + 1:
            raise ConfigError("clients report different numbers of local steps")
        dists = [numerics.norm_sq(numerics.sub(w, U)) for w in its]
        for k in range(1, K + 1):
            pre += dists[k - 1]
            post += dists[k]
    scale = 1.0 / (K * len(local_iterates))
    return pre * scale, post * scale


def client_update(
    problem: Problem, c: int, U: ParamVector, cfg: FedConfig, r: int
) -> tuple[ParamVector, list[ParamVector]]:
    """K local (stochastic) gradient steps from ``U``; returns ``(W_{c,K} - U, [W_{c,0}..W_{c,K}])``."""
    if not 0 <= c < problem.N:
        raise ConfigError(f"client index {c} outside [0, {problem.N})")
    disp = numerics.zeros(U.shape[0])
    iterates = [U]
    for k in range(1, cfg.K + 1):
        try:
            W = iterates[-1]
            if cfg.full_batch:
                g = problem.client_grad(c, W)
            else:
                sampler = BatchSampler(cfg.batch_size, cfg.master_seed, c, r, k)
                g = problem.client_stoch_grad(c, W, sampler)
            disp = numerics.axpy(disp, -cfg.eta_l, g)
            iterates.append(numerics.add(U, disp))
        except NumericError as exc:
            raise DivergenceError(f"local iterate diverged: {exc}", client=c, round=r, step=k) from exc
    return disp, iterates


def server_round(U: ParamVector, deltas: Sequence[ParamVector], eta_g: float) -> ParamVector:
    """``U + eta_g * mean(deltas)``, deltas summed in ascending client order."""
    return numerics.axpy(U, eta_g, numerics.mean(list(deltas)))


def run_fedavg(
    problem: Problem,
    cfg: FedConfig,
    init: ParamVector | None = None,
    constants: dict | None = None,
    workers: int = 1,
) -> Trajectory:
    if cfg.N != problem.N:
        raise ConfigError(f"config has N={cfg.N} but the partition has {problem.N} shards")
    U = numerics.param(init if init is not None else problem.init)
    U0 = U
    loss0 = problem.loss(U)
    gn0 = numerics.norm_sq(problem.grad(U))
    iterates = [U]
    records = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, cfg.R + 1):
            t0 = time.perf_counter()
            if pool is None:
                results = [client_update(problem, c, U, cfg, r) for c in range(cfg.N)]
            else:
                results = list(pool.map(lambda c: client_update(problem, c, U, cfg, r), range(cfg.N)))
            deltas = [res[0] for res in results]
            xi_pre, xi_post = compute_drift([res[1] for res in results], U)
            try:
                U = server_round(U, deltas, cfg.eta_g)
            except NumericError as exc:
                raise DivergenceError(f"global iterate diverged: {exc}", round=r) from exc
            loss = problem.loss(U)
            gn = numerics.norm_sq(problem.grad(U))
            iterates.append(U)
            records.append(
                RoundRecord(
                    r=r,
                    loss=loss,
                    grad_norm_sq=gn,
                    xi_pre=xi_pre,
                    xi_post=xi_post,
                    per_client_delta_norms=tuple(numerics.norm(d) for d in deltas),
                    wall_time=time.perf_counter() - t0,
                )
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return Trajectory("fedavg", U0, loss0, gn0, tuple(records), tuple(iterates), cfg.to_dict(), constants)


def run_gd(problem: Problem, eta: float, T: int, init: ParamVector | None = None) -> Trajectory:
    """Full-batch gradient descent ``x <- x - eta * grad L(x)`` on the global loss."""
    if not (eta >= 0 and np.isfinite(eta)):
        raise ConfigError(f"eta must be finite and >= 0, got {eta}")
    if T < 0:
        raise ConfigError(f"T must be >= 0, got {T}")
    x = numerics.param(init if init is not None else problem.init)
    x0 = x
    loss0 = problem.loss(x)
    g = problem.grad(x)
    gn0 = numerics.norm_sq(g)
    iterates = [x]
    records = []
    for t in range(1, T + 1):
        t0 = time.perf_counter()
        try:
            x = numerics.axpy(x, -eta, g)
        except NumericError as exc:
            raise DivergenceError(f"gradient descent diverged: {exc}", step=t) from exc
        g = problem.grad(x)
        iterates.append(x)
        records.append(RoundRecord(t, problem.loss(x), numerics.norm_sq(g), wall_time=time.perf_counter() - t0))
    return Trajectory("gd", x0, loss0, gn0, tuple(records), tuple(iterates), {"eta": eta, "T": T})
