import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import quadratic_problem, scaled_linear_problem
from fedavg_lab import numerics
from fedavg_lab.config import parse_config
from fedavg_lab.errors import ProbeError
from fedavg_lab.objectives import ClientPartition, LabeledDataset, Problem, Quadratic, TwoLayerReLU
from fedavg_lab.probes import (
    AssumptionConstants,
    ProbeRegion,
    default_region,
    estimate_no_critical_point,
    estimate_semi_lipschitz,
    estimate_semi_smoothness,
    estimate_sigma,
    fit_halfplanes,
    probe,
    sigma_squared_at,
    verify_along_trajectory,
    verify_points,
)
from fedavg_lab.synthesis import build_problem
from oracles import brute_force_pair_sweep


@pytest.fixture(scope="module")
def quad():
    cfg = parse_config("objective.kind = quadratic\nobjective.noise = 0.05\nclients.N = 4\nfedavg.K = 4\n")
    return build_problem(cfg)


@pytest.fixture(scope="module")
def relu():
    cfg = parse_config("objective.kind = two-layer-relu\nclients.N = 4\nfedavg.K = 2\nfedavg.B = 32\n")
    return build_problem(cfg)


def test_quadratic_constants_are_closed_form(quad):
    region = default_region(quad)
    a, b = estimate_semi_smoothness(quad, region)
    alpha, beta = estimate_semi_lipschitz(quad, region)
    tau1, tau2 = estimate_no_critical_point(quad, region)
    assert a == pytest.approx(0.0, abs=1e-9)
    assert b == pytest.approx(0.5, abs=1e-9)
    assert alpha == pytest.approx(0.0, abs=1e-9)
    assert beta == pytest.approx(1.0, abs=1e-9)
    assert tau1**2 == pytest.approx(2.0, abs=1e-9)
    assert tau2**2 == pytest.approx(2.0, abs=1e-9)


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_quadratic_scaling_law(c):
    # L -> cL on s/2||W - w*||^2: b = c/2, beta = c, tau^2 = 2c, a = alpha = 0
    prob = quadratic_problem([[1.0, -1.0], [1.0, -1.0]], [1.5, 0.5], scale=c)
    region = default_region(prob)
    a, b = estimate_semi_smoothness(prob, region)
    alpha, beta = estimate_semi_lipschitz(prob, region)
    tau1, tau2 = estimate_no_critical_point(prob, region)
    assert (a, alpha) == pytest.approx((0.0, 0.0), abs=1e-6)
    assert b == pytest.approx(c / 2.0, abs=1e-6)
    assert beta == pytest.approx(c, abs=1e-6)
    assert (tau1**2, tau2**2) == pytest.approx((2.0 * c, 2.0 * c), abs=1e-6)


def _grams(prob):
    Gs = [prob.data.x[s].T @ prob.data.x[s] for s in prob.partition.shards]
    return [sum(Gs) / len(Gs)] + Gs


def test_linear_ls_smoothness_matches_brute_force_sweep():
    prob = scaled_linear_problem()
    region = default_region(prob)
    Gs = _grams(prob)
    best_taylor, best_gdiff = brute_force_pair_sweep(Gs, np.asarray(prob.init), 1.0, 1_000_000, seed=99)
    lam = max(np.linalg.eigvalsh(G).max() for G in Gs)
    assert best_taylor == pytest.approx(lam / 2.0, rel=1e-4)

    a, b = estimate_semi_smoothness(prob, region)
    assert a <= 1e-6
    assert b == pytest.approx(best_taylor, rel=1e-4)

    alpha, beta = estimate_semi_lipschitz(prob, region)
    assert alpha**2 <= 1e-4 * beta**2
    assert beta == pytest.approx(math.sqrt(best_gdiff), rel=1e-4)


def test_linear_ls_tau_matches_rayleigh_sweep():
    prob = scaled_linear_problem()
    tau1, tau2 = estimate_no_critical_point(prob, default_region(prob))
    rng = np.random.default_rng(5)
    q = rng.standard_normal((100_000, 2))
    lo, hi = math.inf, 0.0
    for G in _grams(prob):
        num = np.einsum("ij,ij->i", q @ G, q @ G)
        den = np.einsum("ij,ij->i", q @ G, q)
        ratio = 2.0 * num / den
        lo, hi = min(lo, ratio.min()), max(hi, ratio.max())
    assert tau1**2 == pytest.approx(lo, rel=1e-3)
    assert tau2**2 == pytest.approx(hi, rel=1e-3)


def test_relu_pair_inequalities_hold_on_held_out_sample(relu):
    fit_region = ProbeRegion(relu.init, 1.0, 2048, seed=0)
    consts = probe(relu, fit_region, batch_size=32, M=50).constants
    assert consts.a > 0.0
    W, U = ProbeRegion(relu.init, 1.0, 2048, seed=1).sample_pairs()
    report = verify_points(consts, relu, W, U)
    pair_violations = [v for v in report.violations if v.inequality in ("semi_smooth", "semi_lipschitz")]
    assert pair_violations == []


def test_fitted_constants_are_feasible_on_their_own_sample(quad, relu):
    for prob, B in ((quad, 8), (relu, 32)):
        report = probe(prob, default_region(prob, pair_count=512), batch_size=B, M=20)
        assert report.violations == ()


def test_dead_network_reports_zero_tau1_with_flag():
    X = np.abs(np.random.default_rng(0).standard_normal((4, 2))) + 0.1
    data = LabeledDataset(X, np.ones(4))
    prob = Problem(TwoLayerReLU((1.0, -1.0)), data, ClientPartition.contiguous(4, 2), numerics.param([-5.0] * 4))
    report = probe(prob, ProbeRegion(prob.init, 0.5, 64), batch_size=1, M=4)
    assert report.constants.tau1 == 0.0
    assert any(v.inequality == "no_critical_point_zero_tau1" for v in report.violations)
    assert not report.constants.def3_range_ok


def test_region_at_minimum_is_an_error():
    prob = quadratic_problem([[1.0, 1.0]], [1.0, 1.0])
    with pytest.raises(ProbeError, match="region at minimum"):
        estimate_no_critical_point(prob, ProbeRegion(prob.init, 1e-9, 8))


def test_degenerate_region_and_small_m_rejected(quad):
    with pytest.raises(ProbeError):
        ProbeRegion(quad.init, 0.0)
    with pytest.raises(ProbeError):
        estimate_sigma(quad, default_region(quad), batch_size=1, M=1)


def _dispersion_problem():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
    data = LabeledDataset(pts, np.zeros(4))
    return Problem(Quadratic(), data, ClientPartition((np.arange(4),)), numerics.param([0.5, 0.5])), pts


def test_sigma_zero_without_sampling_noise():
    prob = quadratic_problem([[0.0, 1.0], [2.0, 2.0]], [0.0, 0.0])
    assert estimate_sigma(prob, default_region(prob), batch_size=1, M=100) == 0.0


def test_sigma_matches_closed_form_variance():
    # stoch grad = W - (batch mean), so its variance is mean||x_i - xbar||^2 / B
    prob, pts = _dispersion_problem()
    population = float(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    rng = np.random.default_rng(0)
    for B in (1, 3):
        est = sigma_squared_at(prob, 0, prob.init, B, 10_000, rng)
        assert est == pytest.approx(population / B, rel=0.05)


def test_doubling_batch_halves_variance():
    prob, _ = _dispersion_problem()
    rng = np.random.default_rng(1)
    s2 = sigma_squared_at(prob, 0, prob.init, 2, 10_000, rng)
    s4 = sigma_squared_at(prob, 0, prob.init, 4, 10_000, rng)
    assert s4 / s2 == pytest.approx(0.5, rel=0.10)


def test_sigma_estimate_variance_shrinks_like_one_over_m():
    prob, _ = _dispersion_problem()
    spread = {}
    for M in (50, 200):
        ests = [sigma_squared_at(prob, 0, prob.init, 1, M, np.random.default_rng(1000 + s)) for s in range(1000)]
        spread[M] = np.var(ests, ddof=1)
    assert spread[50] / spread[200] == pytest.approx(4.0, rel=0.35)


def test_verify_trajectory_cases(quad):
    constant = [quad.init] * 5
    exact = AssumptionConstants(0.0, 0.5, 0.0, 1.0, math.sqrt(2), math.sqrt(2), 0.0)
    assert verify_along_trajectory(exact, constant, quad).violations == ()

    from fedavg_lab.engine import FedConfig, run_fedavg

    traj = run_fedavg(quad, FedConfig(4, 4, 0.01, 5.0, 10, 8, 0))
    assert verify_along_trajectory(exact, traj.iterates, quad).violations == ()

    halved = AssumptionConstants(0.0, 0.25, 0.0, 0.5, math.sqrt(2) / 2, math.sqrt(2) / 2, 0.0)
    report = verify_along_trajectory(halved, traj.iterates, quad)
    assert report.violations and all(v.margin > 0 for v in report.violations)


def test_trajectory_needs_two_points(quad):
    exact = AssumptionConstants(0.0, 0.5, 0.0, 1.0, 1.0, 1.0)
    with pytest.raises(ProbeError):
        verify_along_trajectory(exact, [quad.init], quad)


def test_constants_validation():
    with pytest.raises(ProbeError):
        AssumptionConstants(-1.0, 0.5, 0.0, 1.0, 1.0, 1.0)
    with pytest.raises(ProbeError):
        AssumptionConstants(0.0, 0.5, 0.0, 1.0, 2.0, 1.0)
    with pytest.raises(ProbeError):
        AssumptionConstants(0.0, math.inf, 0.0, 1.0, 1.0, 1.0)


# --- the half-plane fit -----------------------------------------------------

constraint_sets = st.integers(1, 40).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0.0, 50.0), min_size=n, max_size=n),
        st.lists(st.floats(-5.0, 20.0), min_size=n, max_size=n),
    )
)


def _lp_optimum(u, v, kappa):
    res = linprog([1.0, kappa], A_ub=-np.column_stack([u, np.ones(len(u))]), b_ub=-np.asarray(v), bounds=[(0, None), (0, None)], method="highs")
    assert res.status == 0
    return res.fun


@given(constraint_sets, st.sampled_from([0.5, 1.0, 3.0]))
def test_fit_matches_linear_program(uv, kappa):
    u, v = map(np.asarray, uv)
    x, y = fit_halfplanes(u, v, kappa)
    assert x >= 0 and y >= 0
    assert np.all(u * x + y >= v - 1e-12 * (1 + np.abs(v)))
    best = _lp_optimum(u, v, kappa)
    # HiGHS works to a 1e-7 primal feasibility tolerance, so its optimum is only that accurate
    assert x + kappa * y == pytest.approx(best, rel=1e-7, abs=1e-7)


@given(constraint_sets, st.integers(0, 39))
def test_fit_objective_monotone_in_sample(uv, cut):
    u, v = map(np.asarray, uv)
    k = min(cut, len(u) - 1) + 1
    xs, ys = fit_halfplanes(u[:k], v[:k])
    xf, yf = fit_halfplanes(u, v)
    assert xs + ys <= (xf + yf) * (1 + 1e-12) + 1e-12


def test_fit_hand_example():
    # lines y >= 1 - 2x and y >= 0.5 - 0.1x: optimum where they cross
    x, y = fit_halfplanes(np.array([2.0, 0.1]), np.array([1.0, 0.5]))
    assert x == pytest.approx(0.5 / 1.9)
    assert y == pytest.approx(0.5 - 0.1 * 0.5 / 1.9)


def test_probe_report_json_shape(quad):
    d = probe(quad, default_region(quad, pair_count=64), batch_size=8, M=10).to_dict()
    assert {"constants", "violations", "samples", "seed"} <= set(d)
    assert set(d["constants"]) == {"a", "b", "alpha", "beta", "tau1", "tau2", "sigma"}
