"""Empirical estimation and re-verification of the assumption constants.

Three pair/point inequalities are probed on a ball around a reference point:

* semi-smoothness   ``L(U) - L(W) - <g(W), U-W> <= b d^2 + a d sqrt(L(W))``
* semi-Lipschitz    ``||g(W) - g(U)||^2 <= beta^2 d^2 + alpha^2 d max(sqrt L(W), sqrt L(U))``
* no critical point ``tau1^2 L(U) <= ||g(U)||^2 <= tau2^2 L(U)``

with ``d = ||W - U||``. Every sampled pair turns the first two into a
half-plane in a two-variable constant space; the fit is the feasible point
minimising a fixed linear functional (see :func:`fit_halfplanes`). The
constraints of the global loss and of every client loss are pooled, so the
fitted constants hold for all of them at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedavg_lab.errors import ProbeError
from fedavg_lab.numerics import ParamVector
from fedavg_lab.objectives import Problem

MIN_PAIR_DISTANCE = 1e-10
MIN_LOSS = 1e-12
CHECK_TOL = 1e-12
TIE_RTOL = 1e-12

Component = tuple[str, Callable[[ParamVector], float], Callable[[ParamVector], ParamVector]]


@dataclass(frozen=True)
class AssumptionConstants:
    a: float
    b: float
    alpha: float
    beta: float
    tau1: float
    tau2: float
    sigma: float = 0.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ProbeError(f"constant {name} must be finite and >= 0, got {value}")
        if self.tau1 > self.tau2:
            raise ProbeError(f"tau1 ({self.tau1}) exceeds tau2 ({self.tau2})")

    @property
    def def3_range_ok(self) -> bool:
        """Whether ``0 < tau1 < 1`` as the no-critical-point definition demands."""
        return 0.0 < self.tau1 < 1.0

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "AssumptionConstants":
        return cls(**{k: float(raw[k]) for k in ("a", "b", "alpha", "beta", "tau1", "tau2", "sigma") if k in raw})

    def replace(self, **changes: float) -> "AssumptionConstants":
        return AssumptionConstants(**{**asdict(self), **changes})


@dataclass(frozen=True)
class ProbeRegion:
    center: ParamVector
    radius: float = 1.0
    pair_count: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ProbeError(f"degenerate probe region: radius {self.radius}")
        if self.pair_count < 1:
            raise ProbeError(f"pair_count must be >= 1, got {self.pair_count}")

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, stream]))

    def _uniform_ball(self, rng: np.random.Generator, count: int) -> np.ndarray:
        dim = self.center.shape[0]
        z = rng.standard_normal((count, dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = self.radius * rng.random(count) ** (1.0 / dim)
        return self.center[None, :] + z * r[:, None]

    def sample_pairs(self, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Half the pairs are independent uniform draws; half are near pairs at log-uniform distances."""
        rng = self._rng(stream)
        far = self.pair_count // 2
        near = self.pair_count - far
        W = self._uniform_ball(rng, self.pair_count)
        U_far = self._uniform_ball(rng, far)
        dim = self.center.shape[0]
        dirs = rng.standard_normal((near, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dist = self.radius * 10.0 ** rng.uniform(-3.0, 0.0, near)
        U_near = W[far:] + dirs * dist[:, None]
        off = U_near - self.center[None, :]
        rad = np.linalg.norm(off, axis=1)
        outside = rad > self.radius
        U_near[outside] = self.center[None, :] + off[outside] * (self.radius / rad[outside])[:, None]
        return W, np.vstack([U_far, U_near])

    def sample_points(self, count: int, stream: int = 7) -> np.ndarray:
        pts = self._uniform_ball(self._rng(stream), max(count - 1, 0))
        return np.vstack([self.center[None, :], pts])


@dataclass(frozen=True)
class Violation:
    inequality: str
    component: str
    margin: float
    index: int
    witness: tuple[list[float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "inequality": self.inequality,
            "component": self.component,
            "margin": self.margin,
            "index": self.index,
        }


@dataclass(frozen=True)
class ProbeReport:
    constants: AssumptionConstants
    violations: tuple[Violation, ...] = ()
    worst: dict = field(default_factory=dict)
    samples_used: int = 0
    seed: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "constants": self.constants.to_dict(),
            "def3_range_ok": self.constants.def3_range_ok,
            "violations": [v.to_dict() for v in self.violations],
            "worst": self.worst,
            "samples": self.samples_used,
            "seed": self.seed,
        }


def fit_halfplanes(u: np.ndarray, v: np.ndarray, kappa: float = 1.0) -> tuple[float, float]:
    """Minimise ``x + kappa*y`` over ``x, y >= 0`` subject to ``u_i x + y >= v_i``.

    With ``u_i >= 0`` the cheapest ``y`` for a given ``x`` is the upper envelope
    ``max(0, max_i v_i - u_i x)``, so the objective is convex piecewise linear in
    ``x``. Walk the envelope from ``x = 0`` while the active line's slope keeps
    the objective decreasing (``kappa*u > 1``), then read ``y`` off the constraints
    directly so the returned point is feasible by construction.

    When the ``x = 0`` solution is within a relative ``TIE_RTOL`` of the optimum
    it is returned instead: such an ``x`` only absorbs rounding error in ``v``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ProbeError("constraint arrays differ in length")
    if np.any(u < 0) or not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ProbeError("constraints need finite coefficients with u >= 0")
    # The y >= 0 bound is the line u = 0, v = 0.
    u = np.append(u, 0.0)
    v = np.append(v, 0.0)
    x = 0.0
    top = v.max()
    active = int(np.flatnonzero(v == top)[np.argmin(u[v == top])])
    while kappa * u[active] > 1.0:
        lower = u < u[active]
        cand = np.flatnonzero(lower)
        cross = (v[active] - v[cand]) / (u[active] - u[cand])
        cross = np.maximum(cross, x)
        best = cross.min()
        ties = cand[cross == best]
        active = int(ties[np.argmin(u[ties])])
        x = float(best)
    y = max(0.0, float(np.max(v[:-1] - u[:-1] * x))) if u.size > 1 else 0.0
    y0 = float(v.max())
    if x > 0.0 and kappa * y0 <= (x + kappa * y) * (1.0 + TIE_RTOL):
        return 0.0, y0
    return x, y


@dataclass
class _Samples:
    """Loss values and gradients of every component at a shared point set."""

    points: np.ndarray
    values: list[np.ndarray]
    grads: list[np.ndarray]
    names: list[str]


def _evaluate(components: Sequence[Component], points: np.ndarray) -> _Samples:
    values, grads = [], []
    for _, fn, gfn in components:
        vals = np.empty(points.shape[0])
        gr = np.empty_like(points)
        for i, p in enumerate(points):
            vals[i] = fn(p)
            gr[i] = gfn(p)
        values.append(vals)
        grads.append(gr)
    return _Samples(points, values, grads, [c[0] for c in components])


def _pair_terms(s: _Samples, comp: int, iw: np.ndarray, iu: np.ndarray):
    W, U = s.points[iw], s.points[iu]
    diff = U - W
    d2 = np.einsum("ij,ij->i", diff, diff)
    d = np.sqrt(d2)
    LW, LU = s.values[comp][iw], s.values[comp][iu]
    gW, gU = s.grads[comp][iw], s.grads[comp][iu]
    taylor = LU - LW - np.einsum("ij,ij->i", gW, diff)
    gd = gW - gU
    gdiff2 = np.einsum("ij,ij->i", gd, gd)
    return d, d2, LW, LU, taylor, gdiff2


def _pair_index(n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    # points[:n] are the W's, points[n:] the U's; both orientations are used.
    first = np.arange(n_pairs)
    second = first + n_pairs
    return np.concatenate([first, second]), np.concatenate([second, first])


def _semi_smooth_constraints(s: _Samples, iw, iu):
    us, vs = [], []
    for comp in range(len(s.names)):
        d, d2, LW, _, taylor, _ = _pair_terms(s, comp, iw, iu)
        keep = d >= MIN_PAIR_DISTANCE
        us.append(np.sqrt(np.maximum(LW[keep], 0.0)) / d[keep])
        vs.append(taylor[keep] / d2[keep])
    return np.concatenate(us), np.concatenate(vs)


def _semi_lipschitz_constraints(s: _Samples, iw, iu):
    us, vs = [], []
    for comp in range(len(s.names)):
        d, d2, LW, LU, _, gdiff2 = _pair_terms(s, comp, iw, iu)
        keep = d >= MIN_PAIR_DISTANCE
        root = np.sqrt(np.maximum(np.maximum(LW, LU), 0.0))
        us.append(root[keep] / d[keep])
        vs.append(gdiff2[keep] / d2[keep])
    return np.concatenate(us), np.concatenate(vs)


def _ncp_ratios(s: _Samples) -> np.ndarray:
    ratios = []
    for comp in range(len(s.names)):
        L = s.values[comp]
        g2 = np.einsum("ij,ij->i", s.grads[comp], s.grads[comp])
        keep = L > MIN_LOSS
        ratios.append(g2[keep] / L[keep])
    return np.concatenate(ratios)


def _region_samples(problem: Problem | Sequence[Component], region: ProbeRegion) -> tuple[_Samples, int]:
    comps = problem.components() if isinstance(problem, Problem) else list(problem)
    W, U = region.sample_pairs()
    return _evaluate(comps, np.vstack([W, U])), W.shape[0]


def _fit_semi_smooth(s: _Samples, n_pairs: int, kappa: float) -> tuple[float, float]:
    iw, iu = _pair_index(n_pairs)
    u, v = _semi_smooth_constraints(s, iw, iu)
    if u.size == 0:
        raise ProbeError("every sampled pair is degenerate")
    return fit_halfplanes(u, v, kappa)


def _fit_semi_lipschitz(s: _Samples, n_pairs: int) -> tuple[float, float]:
    iw, iu = _pair_index(n_pairs)
    u, v = _semi_lipschitz_constraints(s, iw, iu)
    if u.size == 0:
        raise ProbeError("every sampled pair is degenerate")
    alpha2, beta2 = fit_halfplanes(u, v, 1.0)
    return math.sqrt(alpha2), math.sqrt(beta2)


def _fit_ncp(s: _Samples) -> tuple[float, float]:
    ratios = _ncp_ratios(s)
    if ratios.size == 0:
        raise ProbeError("region at minimum: every probed point has L <= 1e-12")
    return math.sqrt(ratios.min()), math.sqrt(ratios.max())


def estimate_semi_smoothness(problem, region: ProbeRegion, kappa: float = 1.0) -> tuple[float, float]:
    """Fitted ``(a, b)``; the tie-break minimises ``a + kappa*b``."""
    s, n = _region_samples(problem, region)
    return _fit_semi_smooth(s, n, kappa)


def estimate_semi_lipschitz(problem, region: ProbeRegion) -> tuple[float, float]:
    """Fitted ``(alpha, beta)`` minimising ``alpha^2 + beta^2``."""
    s, n = _region_samples(problem, region)
    return _fit_semi_lipschitz(s, n)


def estimate_no_critical_point(problem, region: ProbeRegion) -> tuple[float, float]:
    s, _ = _region_samples(problem, region)
    return _fit_ncp(s)


def sigma_squared_at(problem: Problem, client: int, W: ParamVector, batch_size: int, M: int, rng: np.random.Generator) -> float:
    """Centered second moment of ``M`` minibatch gradients of one client at ``W``."""
    if M < 2:
        raise ProbeError(f"need at least 2 resamples to estimate variance, got M={M}")
    shard = problem.partition.shards[client]
    n_c = shard.size
    contrib = problem.objective.point_grads(problem.data, shard, W, n_c)
    picks = rng.integers(0, n_c, size=(M, batch_size))
    counts = np.zeros((M, n_c))
    np.add.at(counts, (np.repeat(np.arange(M), batch_size), picks.reshape(-1)), 1.0)
    G = (counts @ contrib) * (n_c / batch_size)
    dev = G - G[0]
    total = dev.sum(axis=0)
    ss = float(np.einsum("ij,ij->", dev, dev)) - float(total @ total) / M
    return max(ss, 0.0) / (M - 1)


def estimate_sigma(
    problem: Problem,
    region: ProbeRegion,
    batch_size: int,
    M: int = 1000,
    points: int = 8,
    full_batch: bool = False,
) -> float:
    """Largest per-client standard deviation of the minibatch gradient over the sampled points."""
    if M < 2:
        raise ProbeError(f"need at least 2 resamples to estimate variance, got M={M}")
    if full_batch:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([region.seed, 0x5157]))
    pts = region.sample_points(points)
    worst = 0.0
    for c in range(problem.N):
        for p in pts:
            worst = max(worst, sigma_squared_at(problem, c, p, batch_size, M, rng))
    return math.sqrt(worst)


def probe(
    problem: Problem,
    region: ProbeRegion,
    batch_size: int = 1,
    M: int = 1000,
    sigma_points: int = 8,
    full_batch: bool = False,
    kappa: float = 1.0,
) -> ProbeReport:
    """Fit every constant on one shared sample and report the fitting-sample check."""
    s, n = _region_samples(problem, region)
    a, b = _fit_semi_smooth(s, n, kappa)
    alpha, beta = _fit_semi_lipschitz(s, n)
    tau1, tau2 = _fit_ncp(s)
    sigma = estimate_sigma(problem, region, batch_size, M, sigma_points, full_batch)
    consts = AssumptionConstants(a, b, alpha, beta, tau1, tau2, sigma)
    viols, worst = _check_samples(consts, s, *_pair_index(n))
    if tau1 == 0.0:
        viols.append(Violation("no_critical_point_zero_tau1", "pooled", 0.0, -1))
    return ProbeReport(consts, tuple(viols), worst, samples_used=2 * n, seed=region.seed)


def _tolerance(*magnitudes: np.ndarray) -> np.ndarray:
    return CHECK_TOL * (1.0 + sum(np.abs(m) for m in magnitudes))


def _check_samples(consts: AssumptionConstants, s: _Samples, iw: np.ndarray, iu: np.ndarray):
    violations: list[Violation] = []
    worst: dict[str, dict] = {}

    def record(name: str, comp: int, margin: np.ndarray, idx: np.ndarray, pair: bool) -> None:
        if margin.size == 0:
            return
        j = int(np.argmax(margin))
        entry = worst.get(name)
        if entry is None or margin[j] > entry["margin"]:
            worst[name] = {"margin": float(margin[j]), "component": s.names[comp], "index": int(idx[j])}
        for k in np.flatnonzero(margin > 0):
            i = int(idx[k])
            wit = (s.points[iw[i]].tolist(), s.points[iu[i]].tolist()) if pair else (s.points[i].tolist(),)
            violations.append(Violation(name, s.names[comp], float(margin[k]), i, wit))

    for comp in range(len(s.names)):
        if iw.size:
            d, d2, LW, LU, taylor, gdiff2 = _pair_terms(s, comp, iw, iu)
            keep = np.flatnonzero(d >= MIN_PAIR_DISTANCE)
            rootW = np.sqrt(np.maximum(LW, 0.0))
            rhs = consts.b * d2 + consts.a * d * rootW
            margin = taylor - rhs - _tolerance(LU, LW, rhs)
            record("semi_smooth", comp, margin[keep], keep, True)
            rootmax = np.sqrt(np.maximum(np.maximum(LW, LU), 0.0))
            rhs = consts.beta**2 * d2 + consts.alpha**2 * d * rootmax
            margin = gdiff2 - rhs - _tolerance(gdiff2, rhs)
            record("semi_lipschitz", comp, margin[keep], keep, True)
        L = s.values[comp]
        g2 = np.einsum("ij,ij->i", s.grads[comp], s.grads[comp])
        keep = np.flatnonzero(L > MIN_LOSS)
        lo = consts.tau1**2 * L - g2 - _tolerance(g2, L)
        hi = g2 - consts.tau2**2 * L - _tolerance(g2, L)
        record("no_critical_point_lower", comp, lo[keep], keep, False)
        record("no_critical_point_upper", comp, hi[keep], keep, False)
    return violations, worst


def verify_points(consts: AssumptionConstants, problem, W: np.ndarray, U: np.ndarray) -> ProbeReport:
    """Check all three inequalities on explicit pairs ``(W[i], U[i])`` and on every point."""
    comps = problem.components() if isinstance(problem, Problem) else list(problem)
    s = _evaluate(comps, np.vstack([W, U]))
    viols, worst = _check_samples(consts, s, *_pair_index(W.shape[0]))
    return ProbeReport(consts, tuple(viols), worst, samples_used=2 * W.shape[0])


def verify_along_trajectory(consts: AssumptionConstants, trajectory: Sequence[ParamVector], problem) -> ProbeReport:
    """Re-check the inequalities on consecutive iterates and on every iterate.

    Violations are returned as data; nothing is raised when the assumptions fail.
    """
    pts = np.array([np.asarray(p) for p in trajectory], dtype=np.float64)
    if pts.shape[0] < 2:
        raise ProbeError("trajectory needs at least two points")
    comps = problem.components() if isinstance(problem, Problem) else list(problem)
    s = _evaluate(comps, pts)
    iw = np.arange(pts.shape[0] - 1)
    iu = iw + 1
    viols, worst = _check_samples(consts, s, np.concatenate([iw, iu]), np.concatenate([iu, iw]))
    return ProbeReport(consts, tuple(viols), worst, samples_used=pts.shape[0])


def default_region(problem: Problem, radius: float = 1.0, pair_count: int = 2048, seed: int = 0) -> ProbeRegion:
    if problem.init is None:
        raise ProbeError("problem has no initial point to center the probe region on")
    return ProbeRegion(problem.init, radius, pair_count, seed)
