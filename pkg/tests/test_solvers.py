import io
import logging

import numpy as np
import pytest

import worker_pool
from blockopt.blockstruct import BlockMatrix, BlockNorms, BlockPartition, BlockVector
from blockopt.eso import eso_params
from blockopt.errors import DivergenceError, ProblemValidationError
from blockopt.generators import GeneratorSpec, generate
from blockopt.problem import (
    CompositeProblem,
    LinearBoxPsi,
    LinearQuadraticPsi,
    QuadraticPenalty,
    SmoothFunction,
    eso_model,
)
from blockopt.solvers import (
    Algorithm,
    SolverConfig,
    StopRule,
    default_theta,
    dqam_fd_step,
    dqam_sqa_step,
    dqam_step,
    expected_step_value,
    method_of_multipliers,
    pcdm_full_step,
    pcdm_step,
    run,
    solve_block_subproblem,
)

from helpers import philox


def _angular(seed, omega, n=6, rows=4, cols=2):
    A, _ = generate(GeneratorSpec("block_angular", n=n, omega=omega, seed=seed, block_rows=rows, block_cols=cols))
    return CompositeProblem(A)


def test_toy_step(toy_problem):
    x = BlockVector(toy_problem.partition, [0.0, 0.0])
    # each block alone solves x_i = 1, half of that step is taken
    assert dqam_step(toy_problem, x, 0.5).data.tolist() == [0.5, 0.5]
    assert default_theta(Algorithm.DQAM, 2) == 0.5


def test_default_theta():
    assert default_theta(Algorithm.DQAM, 1) == 1.0
    assert default_theta(Algorithm.DQAM, 5) == 0.125
    assert default_theta(Algorithm.DQAM_SQA, 4) == 0.25


def test_single_block_solves_in_one_step(make_problem):
    p = make_problem(sizes=(5,), m=10)
    x = dqam_step(p, BlockVector.zeros(p.partition), 1.0)
    expected = np.linalg.lstsq(p.A.matrix.toarray(), p.b, rcond=None)[0]
    assert x.data == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("theta", [0.0, 1.5])
def test_theta_range(toy_problem, theta):
    with pytest.raises(ProblemValidationError):
        dqam_step(toy_problem, BlockVector.zeros(toy_problem.partition), theta)


@pytest.mark.parametrize("psi", ["zero", "quadratic", "box"])
def test_finite_difference_step_matches_dqam(make_problem, psi):
    p = make_problem(seed=8, sizes=(2, 1, 2), m=12, psi=psi)
    x = p.feasible_start()
    theta = 0.3
    expected = dqam_step(p, x, theta)
    actual = dqam_fd_step(p.penalty, p.psi_stack, x, theta)
    assert actual.data == pytest.approx(expected.data, abs=1e-8)


class SeparableLogCosh(SmoothFunction):
    """
    sum_j log cosh(x_j - a_j), no coupling between blocks
    """

    def __init__(self, partition, a):
        super().__init__(partition)
        self.a = np.asarray(a, dtype=float)

    def value(self, x):
        return float(np.sum(np.logaddexp(x - self.a, self.a - x) - np.log(2.0)))

    def gradient(self, x):
        return np.tanh(x - self.a)


def test_finite_difference_step_on_separable_function():
    partition = BlockPartition([1, 2, 1])
    a = np.array([0.5, -1.0, 2.0, 0.25])
    f = SeparableLogCosh(partition, a)
    psi = [LinearQuadraticPsi([0.0] * int(size), 0.0) for size in partition.sizes]
    x = dqam_fd_step(f, psi, BlockVector.zeros(partition), 1.0)
    assert x.data == pytest.approx(a, abs=1e-8)


def test_sqa_with_hessian_blocks_matches_dqam(make_problem):
    p = make_problem(seed=3, sizes=(2, 2, 1), m=14, psi="quadratic")
    x = BlockVector(p.partition, philox(3).standard_normal(p.partition.N))
    C = [p.r * p.A.gram(i) for i in range(p.n)]
    expected = dqam_step(p, x, 0.4)
    actual = dqam_sqa_step(QuadraticPenalty(p.A, p.r), p.psi_stack, x, 0.4, C)
    assert actual.data == pytest.approx(expected.data, rel=1e-10, abs=1e-12)


def test_sqa_rejects_indefinite_curvature(toy_problem):
    x = BlockVector.zeros(toy_problem.partition)
    with pytest.raises(ProblemValidationError):
        dqam_sqa_step(toy_problem.penalty, toy_problem.psi_stack, x, 0.5, [1.0, -1.0])
    with pytest.raises(ProblemValidationError):
        dqam_sqa_step(toy_problem.penalty, toy_problem.psi_stack, x, 0.5, [1.0, np.array([[0.0]])])


def test_box_subproblem_optimality():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([-4.0, 1.0])
    psi_i = LinearBoxPsi([0.0, 0.0], [-1.0, 0.0], [1.0, 1.0])
    x_i = np.array([0.0, 0.5])
    u = x_i + solve_block_subproblem(Q, g, psi_i, x_i)
    # first coordinate hits its upper bound, second its lower bound
    assert u == pytest.approx([1.0, 0.0], abs=1e-10)


def test_pcdm_single_block(make_problem):
    p = make_problem(seed=5, m=10)
    params = eso_params(p.omega, 1, p.n, p.L)
    x = BlockVector(p.partition, philox(5).standard_normal(p.partition.N))
    y = pcdm_step(p, x, params, [2])
    g = -p.r * (p.A.matrix.T @ (p.b - p.A.matrix @ x.data))
    expected = x.data[2] - g[2] / (params.beta * p.L[2])
    assert y.data[2] == pytest.approx(expected, rel=1e-12)
    others = np.arange(p.partition.N) != 2
    assert np.array_equal(y.data[others], x.data[others])


def test_pcdm_empty_selection(toy_problem):
    params = eso_params(2, 1, 2, toy_problem.L)
    with pytest.raises(ProblemValidationError):
        pcdm_step(toy_problem, BlockVector.zeros(toy_problem.partition), params, [])


def test_pcdm_all_blocks_is_fully_parallel(make_problem):
    p = make_problem(seed=6, sizes=(1, 2, 1, 3), m=14, psi="box")
    x = p.feasible_start()
    params = eso_params(p.omega, p.n, p.n, p.L)
    assert np.array_equal(pcdm_step(p, x, params, np.arange(p.n)).data, pcdm_full_step(p, x, p.omega).data)


def test_zero_rhs_is_a_fixed_point(make_problem):
    p = make_problem(seed=1)
    p = CompositeProblem(p.A.with_rhs(np.zeros(p.A.rows)))
    x = BlockVector.zeros(p.partition)
    assert np.array_equal(pcdm_full_step(p, x, p.omega).data, x.data)
    assert np.array_equal(dqam_step(p, x, 0.5).data, x.data)
    trace = run(p, SolverConfig(algorithm="dqam", stop="iter", max_iters=3))
    assert np.isnan(trace.final.gap)
    assert trace.column("F").tolist() == [0.0] * 4


@pytest.mark.parametrize("omega", [2, 4, 8])
@pytest.mark.parametrize("seed", range(20))
def test_fully_parallel_pcdm_equals_dqam_on_scalar_blocks(seed, omega):
    spec = GeneratorSpec("bounded_row", n=2 * omega + 2, omega=omega, seed=seed, m=3 * omega, block_cols=1)
    A, _ = generate(spec)
    p = CompositeProblem(A, r=float(philox(seed).uniform(0.5, 2.0)))
    assert p.omega == omega
    config = SolverConfig(stop="iter", max_iters=100)
    dqam = run(p, config.replace(algorithm="dqam", theta=1.0 / omega))
    pcdm = run(p, config.replace(algorithm="pcdm-full"))
    a, b = dqam.column("F"), pcdm.column("F")
    assert len(a) == len(b) == 101
    assert np.all(np.abs(a - b) <= 1e-12 * np.maximum(1.0, np.abs(a)))


@pytest.mark.parametrize("omega", [2, 4])
@pytest.mark.parametrize("seed", range(5))
def test_fully_parallel_pcdm_with_curvature_norms_equals_dqam(seed, omega):
    p = _angular(seed, omega, n=8)
    q = p.with_norms(BlockNorms.curvature(p.A, p.r))
    config = SolverConfig(stop="iter", max_iters=100)
    dqam = run(p, config.replace(algorithm="dqam", theta=1.0 / omega))
    pcdm = run(q, config.replace(algorithm="pcdm-full"))
    a, b = dqam.column("F"), pcdm.column("F")
    assert np.all(np.abs(a - b) <= 1e-10 * np.maximum(1.0, np.abs(a)))


def test_default_dqam_at_omega_two_tracks_fully_parallel_pcdm():
    p = _angular(4, 2)
    q = p.with_norms(BlockNorms.curvature(p.A, p.r))
    config = SolverConfig(stop="iter", max_iters=50)
    dqam = run(p, config.replace(algorithm="dqam"))
    pcdm = run(q, config.replace(algorithm="pcdm-full"))
    a, b = dqam.column("F"), pcdm.column("F")
    assert np.all(np.abs(a - b) <= 1e-10 * np.maximum(1.0, np.abs(a)))


def test_run_with_no_iterations(toy_problem):
    trace = run(toy_problem, SolverConfig(max_iters=0))
    assert len(trace) == 1
    assert trace.final.k == 0
    assert trace.final.F == 0.5
    assert trace.x.data.tolist() == [0.0, 0.0]


def test_counters(make_problem):
    p = make_problem(seed=2, sizes=(1,) * 8, m=16)
    trace = run(p, SolverConfig(algorithm="pcdm", tau=3, processors=2, stop="iter", max_iters=10, seed=4))
    assert trace.column("blocks").tolist() == [0] + [3] * 10
    assert trace.column("time_units").tolist() == [2 * k for k in range(11)]
    assert trace.final.epochs == pytest.approx(30 / 8)
    assert not trace.converged


def test_pcdm_with_every_block_equals_fully_parallel(make_problem):
    p = make_problem(seed=9, sizes=(2, 1, 1, 2), m=14, psi="quadratic")
    config = SolverConfig(stop="iter", max_iters=25)
    sampled = run(p, config.replace(algorithm="pcdm", tau=p.n))
    full = run(p, config.replace(algorithm="pcdm-full"))
    assert np.array_equal(sampled.column("F"), full.column("F"))


def test_sampled_runs_are_reproducible(make_problem):
    p = make_problem(seed=10, sizes=(1,) * 10, m=20)
    config = SolverConfig(algorithm="pcdm", tau=3, seed=17, stop="iter", max_iters=40)
    assert np.array_equal(run(p, config).column("F"), run(p, config).column("F"))
    other = run(p, config.replace(seed=18)).column("F")
    assert not np.array_equal(run(p, config).column("F"), other)


@pytest.mark.parametrize("algorithm", ["dqam", "pcdm-full", "dqam-sqa"])
def test_worker_count_does_not_change_results(make_problem, algorithm):
    p = make_problem(seed=11, sizes=(2, 3, 2, 2), m=20, psi="quadratic")
    config = SolverConfig(algorithm=algorithm, stop="iter", max_iters=30)
    single = run(p, config)
    with worker_pool.Pool(workers=4) as pool:
        threaded = run(p, config, pool=pool)
    assert np.array_equal(single.column("F"), threaded.column("F"))
    assert np.array_equal(single.x.data, threaded.x.data)


def test_residual_recompute_keeps_values(make_problem):
    p = make_problem(seed=12, sizes=(1,) * 6, m=12)
    config = SolverConfig(algorithm="pcdm", tau=2, stop="iter", max_iters=60)
    incremental = run(p, config).column("F")
    refreshed = run(p, config.replace(recompute_every=7)).column("F")
    assert refreshed == pytest.approx(incremental, rel=1e-10, abs=1e-14)


def test_divergence_guard(toy_problem):
    with pytest.raises(DivergenceError):
        run(toy_problem, SolverConfig(algorithm="pcdm-full", beta_override=0.05, max_iters=5))


def test_divergence_guard_is_off_above_the_analyzed_step():
    A = BlockMatrix(np.array([[1.0, 1.0, 1.0]]), BlockPartition([1, 1, 1]), np.array([1.0]))
    trace = run(CompositeProblem(A), SolverConfig(algorithm="dqam", theta=1.0, stop="iter", max_iters=3))
    assert trace.column("F").tolist() == pytest.approx([0.5, 2.0, 8.0, 32.0])
    calm = run(CompositeProblem(A), SolverConfig(algorithm="dqam", theta=1.0 / 3.0, stop="iter", max_iters=1))
    assert calm.column("F").tolist() == pytest.approx([0.5, 0.0], abs=1e-15)


def test_monotone_decrease_of_deterministic_methods(make_problem):
    p = make_problem(seed=13, sizes=(1,) * 8, m=16, psi="box")
    for algorithm in ("dqam", "pcdm-full", "dqam-fd"):
        F = run(p, SolverConfig(algorithm=algorithm, stop="iter", max_iters=40)).column("F")
        assert np.all(np.diff(F) <= 1e-12 * np.abs(F[:-1]) + 1e-15)


@pytest.mark.parametrize(
    "psi, rule", [("zero", "f_ratio:1e-6"), ("quadratic", "gap:1e-8"), ("quadratic", "stationarity:1e-6")]
)
def test_stop_rules(make_problem, psi, rule):
    p = make_problem(seed=14, sizes=(1,) * 6, m=15, psi=psi, mu=0.5)
    trace = run(p, SolverConfig(algorithm="pcdm-full", stop=rule, max_iters=20000))
    assert trace.converged
    assert trace.iterations < 20000
    assert trace.final.k == len(trace) - 1


def test_stop_rule_parsing():
    assert StopRule.parse("gap:1e-8") == StopRule("gap", 1e-8)
    assert StopRule.parse("f-ratio") == StopRule("f_ratio", 1e-4)
    assert str(StopRule.parse("iter")) == "iter"
    with pytest.raises(ValueError):
        StopRule.parse("objective:1")
    with pytest.raises(ValueError):
        StopRule.parse("gap:0")


def test_config_from_mapping():
    config = SolverConfig.from_mapping({"algorithm": "pcdm_full", "max_iters": 7, "theta": None})
    assert config.algorithm is Algorithm.PCDM_FULL
    assert config.max_iters == 7
    with pytest.raises(ValueError, match="Unknown solver settings"):
        SolverConfig.from_mapping({"step": 1})
    with pytest.raises(ValueError):
        SolverConfig(theta=2.0)
    with pytest.raises(ValueError):
        SolverConfig(algorithm="newton")


def test_theta_above_bound_warns(caplog):
    p = _angular(0, 4)
    with caplog.at_level(logging.WARNING, logger="blockopt.solvers"):
        run(p, SolverConfig(algorithm="dqam", theta=0.9, max_iters=0))
    assert "linear rate guarantee" in caplog.text


def test_trace_csv(toy_problem):
    trace = run(toy_problem, SolverConfig(algorithm="dqam", stop="iter", max_iters=2))
    out = io.StringIO()
    trace.write_csv(out)
    lines = out.getvalue().splitlines()
    assert lines[0] == "k,F,f,gap,blocks,epochs,time_units,wall_ms"
    assert len(lines) == 3
    assert lines[1].startswith("0,0.5,0.5,0.5,0,0,0,")


def test_expected_step_value_does_not_exceed_current(make_problem):
    p = make_problem(seed=15, sizes=(1,) * 8, m=16, psi="quadratic")
    params = eso_params(p.omega, 3, p.n, p.L)
    x = BlockVector(p.partition, philox(15).standard_normal(p.partition.N))
    assert expected_step_value(p, params, x, range(200)) <= p.eval_F(x) + 1e-12


def _qp():
    A = BlockMatrix(np.array([[1.0, 1.0]]), BlockPartition([1, 1]), np.array([1.0]))
    return CompositeProblem(A, psi=[LinearQuadraticPsi([0.0], 1.0), LinearQuadraticPsi([0.0], 1.0)])


def test_method_of_multipliers_finds_the_multiplier():
    inner = SolverConfig(algorithm="dqam", max_iters=10000)
    trace = method_of_multipliers(_qp(), inner, outer_iters=20, inner_tol=1e-10)
    assert len(trace) == 20
    assert trace.multipliers[-1] == pytest.approx([0.5], abs=1e-6)
    assert trace.points[-1].data == pytest.approx([0.5, 0.5], abs=1e-6)
    assert trace.residuals[-1] < 1e-6


def test_multipliers_stay_put_at_the_solution():
    p = _qp().with_multipliers([0.5])
    trace = method_of_multipliers(p, SolverConfig(algorithm="pcdm-full", max_iters=10000), 3, 1e-12)
    for pi in trace.multipliers:
        assert pi == pytest.approx([0.5], abs=1e-9)


def test_method_of_multipliers_through_run():
    trace = run(_qp(), SolverConfig(algorithm="mom", outer_iters=15, max_iters=10000))
    assert len(trace) == 15
    assert trace.multipliers[-1] == pytest.approx([0.5], abs=1e-5)
    assert trace.final.gap < 1e-8
    with pytest.raises(ValueError):
        method_of_multipliers(_qp(), SolverConfig(algorithm="mom"), 1, 1e-8)


@pytest.mark.parametrize("omega", [2, 4, 8])
@pytest.mark.parametrize("seed", range(20))
def test_sqa_with_scaled_norms_reproduces_fully_parallel_pcdm(seed, omega):
    p = _angular(seed, omega, n=8, rows=3, cols=2)
    config = SolverConfig(stop="iter", max_iters=100, keep_iterates=True)
    sqa = run(p, config.replace(algorithm="dqam-sqa"))
    pcdm = run(p, config.replace(algorithm="pcdm-full"))
    assert len(sqa.iterates) == len(pcdm.iterates) == 101
    for a, b in zip(sqa.iterates, pcdm.iterates):
        for i in range(p.n):
            scale = max(1.0, np.abs(a.block(i)).max())
            assert np.all(np.abs(a.block(i) - b.block(i)) <= 1e-12 * scale)


@pytest.mark.parametrize("psi", ["quadratic", "box"])
def test_fully_parallel_steps_stay_below_the_eso_model(make_problem, psi):
    p = make_problem(seed=16, sizes=(1, 2, 1, 1, 2, 1), m=10, psi=psi)
    trace = run(p, SolverConfig(algorithm="pcdm-full", stop="iter", max_iters=60, keep_iterates=True))
    w = np.asarray(p.L)
    for x, x_next in zip(trace.iterates, trace.iterates[1:]):
        F_next = p.eval_F(x_next)
        bound = eso_model(p, float(p.omega), w, p.n, x, x_next - x)
        assert F_next <= bound + 1e-12 * max(1.0, abs(F_next))


def test_multipliers_report_unconverged_inner_solves():
    trace = run(_qp(), SolverConfig(algorithm="mom", outer_iters=3, max_iters=1, inner_tol=1e-14))
    assert len(trace) == 3
    assert not trace.converged
    assert method_of_multipliers(_qp(), SolverConfig(algorithm="dqam", max_iters=1), 2, 1e-14).inner_converged == [
        False,
        False,
    ]
    assert run(_qp(), SolverConfig(algorithm="mom", outer_iters=3, max_iters=10000)).converged
