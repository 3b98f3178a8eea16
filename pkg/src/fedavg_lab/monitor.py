"""Checks of recorded trajectories against the decay envelope, the GD contraction and the drift bounds.

Violations are reported in the returned dataclasses and never raised. The
tolerance policy is fixed: claims about expectations are judged on the
seed-mean with a 1.05 multiplicative slack, deterministic claims must hold up
to 1e-9 absolute.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fedavg_lab import numerics
from fedavg_lab.engine import Trajectory
from fedavg_lab.errors import MonitorError
from fedavg_lab.objectives import LinearLeastSquares, Problem, Quadratic
from fedavg_lab.planner import RatePlan
from fedavg_lab.probes import AssumptionConstants

EXPECTATION_SLACK = 1.05
ABS_SLACK = 1e-9
MIN_SEEDS = 20
GATE_RTOL = 1e-12


@dataclass(frozen=True)
class EnvelopeRow:
    r: int
    mean_gap: float
    bound: float
    satisfied: bool
    slack: float


@dataclass(frozen=True)
class EnvelopeReport:
    rows: tuple[EnvelopeRow, ...]
    seeds_used: int
    stochastic: bool
    first_violation: int | None

    @property
    def passed(self) -> bool:
        return self.first_violation is None

    @property
    def underpowered(self) -> bool:
        return self.stochastic and self.seeds_used < MIN_SEEDS

    def to_dict(self) -> dict:
        return {
            "status": "pass" if self.passed else "fail",
            "seeds_used": self.seeds_used,
            "stochastic": self.stochastic,
            "underpowered": self.underpowered,
            "first_violation": self.first_violation,
            "rows": [asdict(r) for r in self.rows],
        }


@dataclass(frozen=True)
class GDReport:
    eta: float
    lam: float
    vacuous: bool
    reason: str = ""
    factors: tuple[float, ...] = ()
    satisfied: tuple[bool, ...] = ()
    first_violation: int | None = None

    @property
    def status(self) -> str:
        if self.vacuous:
            return "vacuous"
        return "pass" if self.first_violation is None else "fail"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["status"] = self.status
        return out


@dataclass(frozen=True)
class DriftRow:
    r: int
    xi_post: float
    bound_tight: float
    bound_stated: float
    tight_ok: bool
    stated_ok: bool
    tight_le_stated: bool


@dataclass(frozen=True)
class DriftReport:
    vacuous: bool
    reason: str = ""
    rows: tuple[DriftRow, ...] = field(default_factory=tuple)

    @property
    def status(self) -> str:
        if self.vacuous:
            return "vacuous"
        ok = all(r.tight_ok and r.stated_ok for r in self.rows)
        return "pass" if ok else "fail"

    @property
    def first_violation(self) -> int | None:
        for row in self.rows:
            if not (row.tight_ok and row.stated_ok):
                return row.r
        return None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "reason": self.reason,
            "first_violation": self.first_violation,
            "rows": [asdict(r) for r in self.rows],
        }


def envelope_bound(r: int, gap0: float, lambda1: float, lambda2: float) -> float:
    return (1.0 - lambda1) ** r * gap0 + 2.0 * lambda2


def _config_key(cfg: dict) -> tuple:
    return tuple(sorted((k, v) for k, v in cfg.items() if k != "master_seed"))


def check_envelope(trajectories: Sequence[Trajectory], plan: RatePlan, l_star: float) -> EnvelopeReport:
    if not trajectories:
        raise MonitorError("no trajectories to check")
    key = _config_key(trajectories[0].config)
    length = len(trajectories[0].rounds)
    for tr in trajectories[1:]:
        if _config_key(tr.config) != key:
            raise MonitorError("trajectories differ in more than their seed")
        if len(tr.rounds) != length:
            raise MonitorError("trajectories have different round counts")
    gaps = np.array([tr.losses for tr in trajectories], dtype=np.float64) - l_star
    mean_gap = gaps.mean(axis=0)
    gap0 = float(mean_gap[0])
    stochastic = not bool(trajectories[0].config.get("full_batch", True))
    rows = []
    first = None
    for r, g in enumerate(mean_gap):
        bound = envelope_bound(r, gap0, plan.lambda1, plan.lambda2)
        ok = g <= bound * EXPECTATION_SLACK if stochastic else g <= bound + ABS_SLACK
        if not ok and first is None:
            first = r
        rows.append(EnvelopeRow(r, float(g), bound, bool(ok), bound - float(g)))
    return EnvelopeReport(tuple(rows), len(trajectories), stochastic, first)


def check_gd_contraction(trajectory: Trajectory, eta: float, consts: AssumptionConstants, l_star: float) -> GDReport:
    """Per-step ``gap_{t+1} <= (1 - 0.1 eta tau1^2) gap_t`` when the step-size gate holds."""
    lam = 0.1 * eta * consts.tau1**2
    if 0.5 * consts.tau1**2 < consts.a * consts.tau2 * (1.0 - GATE_RTOL):
        return GDReport(eta, lam, True, "0.5*tau1^2 < a*tau2")
    ceiling = math.inf if consts.b * consts.tau2 == 0 else consts.tau1**2 / (10.0 * consts.b * consts.tau2**2)
    if eta > ceiling * (1.0 + GATE_RTOL):
        return GDReport(eta, lam, True, f"eta {eta:.6g} above ceiling {ceiling:.6g}")
    gaps = [L - l_star for L in trajectory.losses]
    factors, sat = [], []
    first = None
    for t in range(len(gaps) - 1):
        ok = gaps[t + 1] <= (1.0 - lam) * gaps[t] + ABS_SLACK
        factors.append(gaps[t + 1] / gaps[t] if gaps[t] > 0 else 0.0)
        sat.append(bool(ok))
        if not ok and first is None:
            first = t + 1
    return GDReport(eta, lam, False, "", tuple(factors), tuple(sat), first)


def drift_bounds(eta_l: float, K: int, tau2: float, sigma: float, loss: float) -> tuple[float, float]:
    """Tight form ``(20 eta^2 + 40 K^2 eta^2 tau2^2) L + 20 K eta^2 sigma^2`` and the stated ``50 eta^2 (1 + K^2 tau2^2 L + K sigma^2)``."""
    e2 = eta_l * eta_l
    tight = (20.0 * e2 + 40.0 * K * K * e2 * tau2 * tau2) * loss + 20.0 * K * e2 * sigma * sigma
    stated = 50.0 * e2 * (1.0 + K * K * tau2 * tau2 * loss + K * sigma * sigma)
    return tight, stated


def drift_rate_ceiling(consts: AssumptionConstants, K: int) -> float:
    c1 = math.inf if consts.alpha == 0 else 1.0 / (consts.alpha**2 * K)
    c2 = math.inf if consts.beta == 0 else 1.0 / (2.0 * consts.beta * K)
    return min(c1, c2)


def check_drift_bound(trajectory: Trajectory, consts: AssumptionConstants, cfg: dict) -> DriftReport:
    K = int(cfg["K"])
    eta_l = float(cfg["eta_l"])
    ceiling = drift_rate_ceiling(consts, K)
    if eta_l > ceiling * (1.0 + GATE_RTOL):
        return DriftReport(True, f"eta_l {eta_l:.6g} above drift ceiling {ceiling:.6g}")
    sigma = 0.0 if cfg.get("full_batch", False) else consts.sigma
    losses = trajectory.losses
    rows = []
    for i, rec in enumerate(trajectory.rounds):
        tight, stated = drift_bounds(eta_l, K, consts.tau2, sigma, losses[i])
        rows.append(
            DriftRow(
                rec.r,
                rec.xi_post,
                tight,
                stated,
                rec.xi_post <= tight + ABS_SLACK,
                rec.xi_post <= stated + ABS_SLACK,
                tight <= stated,
            )
        )
    return DriftReport(False, "", tuple(rows))


def estimate_l_star(problem: Problem, max_iter: int = 20000, tol: float = 1e-10) -> tuple[float, str]:
    """Minimum of the global loss: closed form where one exists, else backtracking GD."""
    obj = problem.objective
    if isinstance(obj, Quadratic):
        centers = [obj.center(problem.data, s) for s in problem.partition.shards]
        return problem.loss(numerics.mean([numerics.param(c) for c in centers])), "closed-form"
    if isinstance(obj, LinearLeastSquares):
        X = np.vstack([problem.data.x[s] for s in problem.partition.shards])
        y = np.concatenate([problem.data.y[s] for s in problem.partition.shards])
        sol = np.linalg.lstsq(X, y, rcond=None)[0]
        return problem.loss(numerics.param(sol)), "least-squares"
    x = numerics.param(problem.init)
    L = problem.loss(x)
    g = problem.grad(x)
    step = 1.0
    for _ in range(max_iter):
        gn2 = numerics.norm_sq(g)
        if math.sqrt(gn2) < tol:
            break
        while True:
            cand = numerics.axpy(x, -step, g)
            Lc = problem.loss(cand)
            if Lc <= L - 0.5 * step * gn2 or step < 1e-16:
                break
            step *= 0.5
        if Lc >= L:
            break
        x, L = cand, Lc
        g = problem.grad(x)
        step *= 2.0
    return L, "gradient-descent"
