import json
import math

import numpy as np
import pytest

from blockopt.analysis import (
    complexity_estimate,
    contraction_factor,
    deterministic_iterations,
    geometric_decay_bound,
    k_bound,
    q_dqam,
    q_pcdm,
    speedup_ratio,
    t_curve,
    varying_constants_comparison,
    verify_contraction_lemma,
)
from blockopt.blockstruct import BlockVector
from blockopt.eso import beta_nice, eso_params
from blockopt.errors import ProblemValidationError
from blockopt.problem import StrongConvexityInfo, reference_optimum, strong_convexity_constants
from blockopt.solvers import SolverConfig, run

from helpers import philox


@pytest.mark.parametrize(
    "mu_F, mu_f, omega, q",
    [(1.0, 1.0, 10, 0.9), (1.0, 1.0, 1, 0.0), (4.0, 0.0, 4, 0.5), (0.5, 0.25, 3, 1.0 - 0.5 / 3.25)],
)
def test_q_pcdm(mu_F, mu_f, omega, q):
    assert q_pcdm(mu_F, mu_f, omega) == pytest.approx(q)


def test_q_dqam():
    assert q_dqam(4.0, 1.0, 2) == pytest.approx(0.875)
    assert q_dqam(1.0, 1.0, 10) == pytest.approx(1.0 - 1.0 / (16 * 729 + 36))
    # the L' term fades for large mu_F
    assert q_dqam(1e12, 1.0, 5) == pytest.approx(1.0 - 1.0 / 16, rel=1e-9)


def test_full_pcdm_rate_never_worse_than_dqam():
    stream = philox(11)
    for _ in range(1000):
        omega = int(stream.integers(2, 200))
        L_prime = float(10 ** stream.uniform(-3, 3))
        mu_F = float(10 ** stream.uniform(-6, 0)) * L_prime
        mu_f = float(stream.uniform(0.0, 1.0)) * mu_F
        # constant block Lipschitz constants: mu(L) = mu(e) / L'
        assert q_pcdm(mu_F / L_prime, mu_f / L_prime, omega) <= q_dqam(mu_F, L_prime, omega)


def test_rate_inputs_are_checked():
    with pytest.raises(ProblemValidationError):
        q_dqam(1.0, 1.0, 1)
    with pytest.raises(ProblemValidationError):
        q_pcdm(0.0, 0.0, 3)
    with pytest.raises(ProblemValidationError):
        q_pcdm(1.0, 2.0, 3)


def test_k_bound_unit_case():
    assert k_bound(1, 1, 1.0, 1.0, 1.0, math.e, 1.0, 1.0) == 1


def test_k_bound_matches_independent_arithmetic():
    n, tau, omega = 100, 10, 5
    beta = 1 + (omega - 1) * (tau - 1) / (n - 1)
    expected = math.ceil((n / tau) * beta * math.log(1e6 / 0.1))
    assert k_bound(n, tau, beta_nice(omega, tau, n), 1.0, 1.0, 1.0, 1e-6, 0.1) == expected == 220


@pytest.mark.parametrize("omega, mu_F, mu_f", [(2, 0.3, 0.1), (5, 1.0, 1.0), (8, 0.05, 0.0)])
def test_k_bound_with_full_sampling_is_the_deterministic_bound(omega, mu_F, mu_f):
    n = 16
    K = k_bound(n, n, float(omega), mu_F, mu_f, 10.0, 1e-5, 1.0)
    assert K == deterministic_iterations(q_pcdm(mu_F, mu_f, omega), 10.0, 1e-5)


def test_k_bound_validation():
    with pytest.raises(ProblemValidationError):
        k_bound(10, 5, 2.0, 1.0, 1.0, 1.0, 2.0, 0.1)
    with pytest.raises(ProblemValidationError):
        k_bound(10, 5, 2.0, 1.0, 1.0, 1.0, 0.1, 0.0)
    with pytest.raises(ProblemValidationError):
        k_bound(10, 11, 2.0, 1.0, 1.0, 1.0, 0.1, 0.5)


def test_speedup_examples():
    assert speedup_ratio(10, 1.0, 1.0, 1.0, 1.0).lower_bound == pytest.approx(1166.4)
    assert tuple(speedup_ratio(2, 1.0, 1.0, 0.0, 0.0)) == pytest.approx((8.0, 8.0))
    exact, lower = speedup_ratio(6, 3.0, 2.0, 0.7, 0.7)
    assert exact >= lower
    assert lower == pytest.approx(16 * 125 / 6 * 1.5)


def test_speedup_matches_rate_ratio():
    omega, L_prime, L_bar, mu = 4, 2.0, 1.5, 0.2
    ratio = (1 - q_pcdm(mu / L_bar, mu / L_bar, omega)) / (1 - q_dqam(mu, L_prime, omega))
    assert speedup_ratio(omega, L_prime, L_bar, mu, mu).exact == pytest.approx(ratio)


def test_t_curve_examples():
    T, tau_opt = t_curve(100, 4, 10)
    assert tau_opt == 4
    assert min(T, key=T.get) == 4
    assert t_curve(20, 20, 5)[1] == 20
    T, tau_opt = t_curve(20, 1, 5)
    assert tau_opt == 1
    assert T[7] == pytest.approx(20 * beta_nice(5, 7, 20))


def test_t_curve_minimizer_is_processor_count():
    stream = philox(42)
    for _ in range(100):
        n = int(stream.integers(2, 201))
        p = int(stream.integers(1, n + 1))
        omega = int(stream.integers(1, n + 1))
        T, tau_opt = t_curve(n, p, omega)
        assert tau_opt == p
        if omega >= 2:
            multiples = [T[k * p] for k in range(1, n // p + 1)]
            assert all(a < b for a, b in zip(multiples, multiples[1:]))


def test_t_curve_grid_validation():
    with pytest.raises(ProblemValidationError):
        t_curve(1, 1, 1)
    with pytest.raises(ProblemValidationError):
        t_curve(10, 11, 2)
    with pytest.raises(ProblemValidationError):
        t_curve(10, 2, 2, [0, 3])


def test_geometric_decay_bound():
    assert geometric_decay_bound(math.e, 1.0, 0.5) == 2
    assert geometric_decay_bound(100.0, 1.0, 1.0) == math.ceil(math.log(100.0))
    stream = philox(7)
    for _ in range(1000):
        eps = float(10 ** stream.uniform(-12, 0))
        gap0 = eps * float(10 ** stream.uniform(1e-3, 12))
        gamma = float(stream.uniform(1e-4, 1.0))
        k = geometric_decay_bound(gap0, eps, gamma)
        assert (1 - gamma) ** k * gap0 <= eps
        assert k >= 1


def test_contraction_factor_grows_with_beta():
    info = StrongConvexityInfo(0.5, 0.2, 0.3, np.ones(3))
    factors = [contraction_factor(beta, info) for beta in (0.2, 1.0, 4.0, 100.0, 1e6)]
    assert factors[0] == 0.0
    assert all(a < b for a, b in zip(factors, factors[1:]))
    assert factors[-1] < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_contraction_lemma_on_random_points(make_problem, seed):
    p = make_problem(seed=seed, sizes=(1, 2, 1, 1, 2), m=9, psi="quadratic", mu=0.4)
    params = eso_params(p.omega, p.n, p.n, p.L)
    info = strong_convexity_constants(p, params.w)
    x_star, F_star = reference_optimum(p)
    stream = philox(seed + 50)
    for _ in range(100):
        x = BlockVector(p.partition, 3 * stream.standard_normal(p.partition.N))
        assert verify_contraction_lemma(p, params, x, info, F_star)
    assert verify_contraction_lemma(p, params, x_star, info, F_star)


def test_contraction_lemma_with_sampled_beta(make_problem):
    p = make_problem(seed=9, sizes=(1,) * 6, m=10, psi="quadratic", mu=1.0)
    params = eso_params(p.omega, 2, p.n, p.L)
    x = BlockVector(p.partition, philox(9).standard_normal(p.partition.N))
    assert verify_contraction_lemma(p, params, x)


@pytest.mark.parametrize("seed", range(10))
def test_fully_parallel_pcdm_contracts_at_least_at_its_rate(make_problem, seed):
    p = make_problem(seed=seed, sizes=(1,) * 8, m=12, psi="quadratic", mu=0.3)
    info = strong_convexity_constants(p, p.L)
    q = q_pcdm(info.mu_F, info.mu_f, p.omega)
    _, F_star = reference_optimum(p)
    trace = run(p, SolverConfig(algorithm="pcdm-full", stop="iter", max_iters=200))
    gaps = trace.column("F") - F_star
    scale = max(1.0, abs(F_star))
    for before, after in zip(gaps, gaps[1:]):
        if before <= 1e-10 * scale:
            break
        # slack of a few roundoffs in F
        assert after <= q * before + 1e-13 * scale


def test_varying_constants_comparison():
    info = StrongConvexityInfo(0.4, 0.4, 0.0, np.ones(4))
    report = varying_constants_comparison([1.0, 2.0, 3.0, 2.0], 3, info)
    assert report.L_prime == 3.0
    assert report.L_bar == 2.0
    assert report.approximate.q_pcdm == pytest.approx(q_pcdm(0.2, 0.2, 3))
    assert report.approximate.ratio == pytest.approx(report.speedup["exact"])
    assert "exact" not in report
    separable = varying_constants_comparison([1.0, 1.0], 1, info)
    assert "q_dqam" not in separable.approximate


def test_complexity_estimate():
    estimate = complexity_estimate(10, 1.0, 1.0, 1.0, 1.0, n=100, tau=10, processors=4, gap0=1.0, eps=1e-6)
    assert estimate.speedup_lower_bound == pytest.approx(1166.4)
    assert estimate.q_pcdm == pytest.approx(0.9)
    assert estimate.tau_opt == 4
    assert estimate.K_highprob == math.ceil(10 * beta_nice(10, 10, 100) * math.log(1e7))
    assert "mu(L) approximated by mu(e) / L_bar" in estimate.notes
    data = json.loads(estimate.to_json())
    assert data["T_curve"]["4"] == pytest.approx(estimate.T_curve[4])


def test_complexity_estimate_without_dqam_rate():
    estimate = complexity_estimate(1, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5)
    assert estimate.q_dqam is None
    assert estimate.speedup_ratio is None
    assert estimate.notes == ["DQAM rate unavailable for omega = 1"]


@pytest.mark.slow
def test_high_probability_bound_holds_empirically(make_problem):
    p = make_problem(seed=21, sizes=(1,) * 50, m=60, density=0.1, psi="quadratic", mu=2.0)
    tau, rho = 5, 0.2
    info = strong_convexity_constants(p, p.L)
    _, F_star = reference_optimum(p)
    gap0 = p.eval_F(p.feasible_start()) - F_star
    eps = 1e-6 * gap0
    K = k_bound(p.n, tau, beta_nice(p.omega, tau, p.n), info.mu_F, info.mu_f, gap0, eps, rho)
    config = SolverConfig(algorithm="pcdm", tau=tau, stop="iter", max_iters=K)
    hits = sum(run(p, config.replace(seed=seed)).final.F - F_star <= eps for seed in range(200))
    assert hits / 200 >= 1 - rho
