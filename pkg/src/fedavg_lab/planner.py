"""Step-sizes, decay coefficients and round budgets derived from the assumption constants.

The local rate is the three-way minimum

    eta_l = min{ 1/(alpha^2 K), 1/(100 K tau2 (beta+alpha)), 1/(100 sqrt(K) (beta+alpha)) }

and the global rate is capped by ``tau1^2 / (20 K b eta_l)``. With
``eta_tilde = K eta_l eta_g`` the per-round decay and the noise floor are

    lambda1 = eta_tilde/4 * (1 - 4 b eta_tilde - 2a) * tau1^2
    lambda2 = (1 + a + b eta_tilde) * eta_tilde/10 * sigma^2

and the mean optimality gap after ``r`` rounds is bounded by
``(1 - lambda1)^r * gap0 + 2 lambda2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from fedavg_lab.errors import PlanError
from fedavg_lab.probes import AssumptionConstants

ETA_G_SENTINEL = 1e3


@dataclass(frozen=True)
class RatePlan:
    K: int
    eta_l: float
    eta_g: float
    lambda1: float
    lambda2: float
    sigma_used: float
    R: int | None = None
    epsilon_target: float | None = None
    eta_g_limited_by: str = "rate-ceiling"

    @property
    def eta_tilde(self) -> float:
        return self.K * self.eta_l * self.eta_g

    def envelope(self, r: int, gap0: float) -> float:
        return (1.0 - self.lambda1) ** r * gap0 + 2.0 * self.lambda2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eta_tilde"] = self.eta_tilde
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RatePlan":
        fields = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**fields)


def _inv(denominator: float) -> float:
    return math.inf if denominator == 0.0 else 1.0 / denominator


def plan_local_rate(consts: AssumptionConstants, K: int) -> float:
    if K < 1:
        raise PlanError(f"K must be >= 1, got {K}")
    ab = consts.beta + consts.alpha
    eta = min(
        _inv(consts.alpha**2 * K),
        _inv(100.0 * K * consts.tau2 * ab),
        _inv(100.0 * math.sqrt(K) * ab),
    )
    if not math.isfinite(eta):
        raise PlanError("constants degenerate: every local-rate ceiling is unbounded")
    return eta


def plan_global_rate(consts: AssumptionConstants, K: int, eta_l: float) -> float:
    """Ceiling ``tau1^2 / (20 K b eta_l)``; ``inf`` when ``b = 0`` (the caller caps it)."""
    if not eta_l > 0:
        raise PlanError(f"eta_l must be positive, got {eta_l}")
    return consts.tau1**2 * _inv(20.0 * K * consts.b * eta_l) if consts.tau1 > 0 else 0.0


def max_admissible_a(consts: AssumptionConstants, eta_tilde: float) -> float:
    """Largest ``a`` for which ``1 - 4 b eta_tilde - 2a`` stays positive."""
    return (1.0 - 4.0 * consts.b * eta_tilde) / 2.0


def compute_lambdas(consts: AssumptionConstants, K: int, eta_l: float, eta_g: float) -> tuple[float, float, float]:
    if not (eta_l > 0 and eta_g > 0):
        raise PlanError(f"rates must be positive, got eta_l={eta_l}, eta_g={eta_g}")
    et = K * eta_l * eta_g
    bracket = 1.0 - 4.0 * consts.b * et - 2.0 * consts.a
    lambda1 = et / 4.0 * bracket * consts.tau1**2
    lambda2 = (1.0 + consts.a + consts.b * et) * et / 10.0 * consts.sigma**2
    if not lambda1 > 0:
        raise PlanError(
            "decay coefficient nonpositive: a or eta_tilde too large "
            f"(lambda1={lambda1:.6g}, a={consts.a:.6g}, max admissible a={max_admissible_a(consts, et):.6g})"
        )
    return lambda1, lambda2, consts.sigma


def plan_rounds(epsilon: float, initial_gap: float, lambda1: float) -> int:
    """``ceil(ln(2 gap0 / eps) / lambda1)``, or 0 when ``gap0 <= eps/2``."""
    if not epsilon > 0:
        raise PlanError(f"epsilon must be positive, got {epsilon}")
    if not 0 < lambda1 < 1:
        raise PlanError(f"lambda1 must lie in (0, 1), got {lambda1}")
    if initial_gap <= epsilon / 2.0:
        return 0
    return math.ceil(math.log(2.0 * initial_gap / epsilon) / lambda1)


def epsilon_eta_g_cap(consts: AssumptionConstants, K: int, epsilon: float) -> float:
    """``2 eps / (sigma^2 (1 + a + tau1^2/(20K)))``; unbounded when ``sigma = 0``."""
    if consts.sigma == 0.0:
        return math.inf
    return 2.0 * epsilon / (consts.sigma**2 * (1.0 + consts.a + consts.tau1**2 / (20.0 * K)))


def make_plan(
    consts: AssumptionConstants,
    K: int,
    *,
    eta_l: float | None = None,
    eta_g: float | None = None,
    epsilon: float | None = None,
    initial_gap: float | None = None,
    eta_g_sentinel: float = ETA_G_SENTINEL,
) -> RatePlan:
    """Assemble a full plan. Explicit rates are kept as given; missing ones are planned.

    An automatic ``eta_g`` is the rate ceiling, lowered to the maximiser of
    ``lambda1`` (``eta_tilde = (1-2a)/(8b)``) when the ceiling lies beyond it,
    to the sentinel when ``b = 0``, and to the epsilon-dependent cap when an
    accuracy target is given.
    """
    if eta_l is None:
        eta_l = plan_local_rate(consts, K)
    limited_by = "explicit"
    if eta_g is None:
        eta_g = plan_global_rate(consts, K, eta_l)
        limited_by = "rate-ceiling"
        if consts.b > 0 and consts.a < 0.5:
            best = (1.0 - 2.0 * consts.a) / (8.0 * consts.b * K * eta_l)
            if best < eta_g:
                eta_g, limited_by = best, "lambda1-maximiser"
        if eta_g > eta_g_sentinel:
            eta_g, limited_by = eta_g_sentinel, "sentinel"
        if epsilon is not None:
            cap = epsilon_eta_g_cap(consts, K, epsilon)
            if cap < eta_g:
                eta_g, limited_by = cap, "epsilon-cap"
        if not eta_g > 0:
            raise PlanError("tau1 = 0: no positive global rate is admissible")
    lambda1, lambda2, sigma = compute_lambdas(consts, K, eta_l, eta_g)
    R = None
    if epsilon is not None and initial_gap is not None:
        R = plan_rounds(epsilon, initial_gap, lambda1)
    return RatePlan(K, eta_l, eta_g, lambda1, lambda2, sigma, R, epsilon, limited_by)


def plan_gd(consts: AssumptionConstants) -> tuple[float, float]:
    """Gradient-descent step at its ceiling ``tau1^2/(10 b tau2^2)`` and contraction ``0.1 eta tau1^2``."""
    if 0.5 * consts.tau1**2 < consts.a * consts.tau2:
        raise PlanError(
            f"precondition 0.5*tau1^2 >= a*tau2 fails ({0.5 * consts.tau1**2:.6g} < {consts.a * consts.tau2:.6g})"
        )
    if consts.b == 0.0 or consts.tau2 == 0.0:
        raise PlanError("step ceiling unbounded: b or tau2 is zero")
    eta = consts.tau1**2 / (10.0 * consts.b * consts.tau2**2)
    return eta, 0.1 * eta * consts.tau1**2
