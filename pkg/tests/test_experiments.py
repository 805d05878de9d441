import io
import statistics

import pytest

import contrib.experiments as experiments
import worker_pool
from blockopt.errors import ProblemValidationError
from blockopt.generators import GeneratorSpec
from blockopt.solvers import SolverConfig, StopRule

TINY_ANGULAR = GeneratorSpec(family="block_angular", n=6, omega=2, block_rows=4, block_cols=2, c_density=0.5)
TINY_ROWS = GeneratorSpec(family="bounded_row", n=40, m=80, omega=4, block_cols=1)
QUICK = SolverConfig(stop=StopRule("f_ratio", 1e-4), max_iters=20000)


def test_presets():
    assert experiments.preset("block-angular") is experiments.STEPSIZE_DESK
    assert experiments.preset("bounded_row", full_scale=True).n == 10000
    assert experiments.default_omegas("bounded-row") == (20, 60)
    assert experiments.default_omegas("bounded-row", True) == (20, 60, 100)
    assert max(experiments.default_omegas("block-angular")) <= experiments.STEPSIZE_DESK.n
    with pytest.raises(ProblemValidationError):
        experiments.preset("banded")


def test_stepsize_replication_pairs_dqam_with_full_pcdm():
    rows = experiments.replicate(TINY_ANGULAR, 3, QUICK)
    assert [row.algorithm for row in rows] == ["dqam", "pcdm-full"]
    assert all(row.tau is None and row.seed == 3 and row.omega == 2 for row in rows)
    # theta = 1/(2(omega - 1)) and 1/omega coincide at omega = 2
    assert abs(rows[0].epochs - rows[1].epochs) <= 1


def test_timeunit_replication_covers_every_tau():
    rows = experiments.replicate(TINY_ROWS, 0, QUICK, taus=(4, 8))
    assert [(row.tau, row.algorithm) for row in rows] == [
        (4, "dqam"),
        (4, "pcdm-full"),
        (4, "pcdm"),
        (8, "dqam"),
        (8, "pcdm-full"),
        (8, "pcdm"),
    ]
    by_key = {(row.tau, row.algorithm): row for row in rows}
    # one full sweep costs ceil(n / tau) time units
    full = by_key[(8, "pcdm-full")]
    assert full.time_units == full.epochs * 5


def test_compare_order_does_not_depend_on_workers():
    config = QUICK.replace(max_iters=50)
    serial = experiments.compare(TINY_ANGULAR, (2, 3), (0, 1), config)
    with worker_pool.Pool(workers=3) as pool:
        threaded = experiments.compare(TINY_ANGULAR, (2, 3), (0, 1), config, pool=pool)
    assert [(r.omega, r.seed, r.algorithm) for r in serial] == [
        (2, 0, "dqam"),
        (2, 0, "pcdm-full"),
        (2, 1, "dqam"),
        (2, 1, "pcdm-full"),
        (3, 0, "dqam"),
        (3, 0, "pcdm-full"),
        (3, 1, "dqam"),
        (3, 1, "pcdm-full"),
    ]
    assert [(r.omega, r.seed, r.algorithm, r.epochs) for r in threaded] == [
        (r.omega, r.seed, r.algorithm, r.epochs) for r in serial
    ]


def test_write_rows():
    row = experiments.Replication("bounded_row", 20, 8, "pcdm", 1, 12.5, 100, 3.14159)
    out = io.StringIO()
    experiments.write_rows(out, [row])
    assert out.getvalue() == (
        "family,omega,tau,algorithm,seed,epochs,time_units,wall_ms\n" "bounded_row,20,8,pcdm,1,12.5,100,3.142\n"
    )


@pytest.mark.slow
def test_stepsize_experiment_at_desk_scale():
    config = SolverConfig(stop=experiments.DEFAULT_STOP, max_iters=experiments.DEFAULT_MAX_ITERS)
    seeds = range(experiments.REPLICATIONS)
    rows = experiments.compare(experiments.STEPSIZE_DESK, (2, 8, 16, 32), seeds, config)
    assert all(row.epochs < experiments.DEFAULT_MAX_ITERS for row in rows)

    def mean_epochs(omega, algorithm):
        return statistics.mean(r.epochs for r in rows if r.omega == omega and r.algorithm == algorithm)

    assert abs(mean_epochs(2, "dqam") - mean_epochs(2, "pcdm-full")) <= 1
    for omega in (8, 16, 32):
        assert mean_epochs(omega, "pcdm-full") <= 0.65 * mean_epochs(omega, "dqam")


@pytest.mark.slow
def test_timeunits_experiment_at_desk_scale():
    config = SolverConfig(stop=experiments.DEFAULT_STOP, max_iters=experiments.DEFAULT_MAX_ITERS)
    taus = experiments.TIMEUNITS_TAUS
    rows = experiments.compare(experiments.TIMEUNITS_DESK, (20, 60), (0,), config, taus)

    def units(omega, tau, algorithm):
        (row,) = [r for r in rows if r.omega == omega and r.tau == tau and r.algorithm == algorithm]
        return row.time_units

    for omega in (20, 60):
        for tau in taus:
            assert units(omega, tau, "pcdm") < units(omega, tau, "pcdm-full") < units(omega, tau, "dqam")
        for algorithm in ("dqam", "pcdm-full", "pcdm"):
            series = [units(omega, tau, algorithm) for tau in taus]
            assert all(a >= b for a, b in zip(series, series[1:]))
