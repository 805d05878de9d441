import csv
import dataclasses
import logging
import typing

import blockopt
import worker_pool
from blockopt.blockstruct import BlockNorms
from blockopt.generators import GeneratorSpec, generate
from blockopt.solvers import Algorithm, SolverConfig, StopRule

logger = logging.getLogger(__name__)

# Epochs against omega: primal block angular matrices, 25 replications per omega
STEPSIZE_DESK = GeneratorSpec(
    family="block_angular",
    n=32,
    omega=2,
    block_rows=15,
    block_cols=10,
    c_density=0.1,
    d_density=1.0,
    linking_rows=1,
)
STEPSIZE_FULL = STEPSIZE_DESK.replace(n=100, block_rows=150, block_cols=100)
STEPSIZE_OMEGAS = (2, 4, 8, 16, 32)

# Time units against tau: at most omega nonzeros per row, scalar blocks
TIMEUNITS_DESK = GeneratorSpec(family="bounded_row", n=1000, m=2000, omega=20, block_cols=1)
TIMEUNITS_FULL = TIMEUNITS_DESK.replace(n=10000, m=20000)
TIMEUNITS_OMEGAS_DESK = (20, 60)
TIMEUNITS_OMEGAS_FULL = (20, 60, 100)
TIMEUNITS_TAUS = (8, 16, 32, 64)

PRESETS = {
    ("block_angular", False): STEPSIZE_DESK,
    ("block_angular", True): STEPSIZE_FULL,
    ("bounded_row", False): TIMEUNITS_DESK,
    ("bounded_row", True): TIMEUNITS_FULL,
}

DEFAULT_STOP = StopRule("f_ratio", 1e-4)
DEFAULT_MAX_ITERS = 200000
REPLICATIONS = 25

COMPARE_HEADER = ("family", "omega", "tau", "algorithm", "seed", "epochs", "time_units", "wall_ms")


def preset(family: str, full_scale: bool = False) -> GeneratorSpec:
    family = blockopt.generators.normalize_family(family)
    return PRESETS[(family, full_scale)]


def default_omegas(family: str, full_scale: bool = False) -> typing.Tuple[int, ...]:
    if blockopt.generators.normalize_family(family) == "block_angular":
        return STEPSIZE_OMEGAS
    return TIMEUNITS_OMEGAS_FULL if full_scale else TIMEUNITS_OMEGAS_DESK


@dataclasses.dataclass
class Replication:
    family: str
    omega: int
    tau: typing.Optional[int]
    algorithm: str
    seed: int
    epochs: float
    time_units: int
    wall_ms: float

    def row(self) -> typing.List[str]:
        return [
            self.family,
            str(self.omega),
            "" if self.tau is None else str(self.tau),
            self.algorithm,
            str(self.seed),
            f"{self.epochs:.17g}",
            str(self.time_units),
            f"{self.wall_ms:.3f}",
        ]


def stepsize_runs(
    p: blockopt.CompositeProblem, config: SolverConfig
) -> typing.List[typing.Tuple[str, blockopt.CompositeProblem, SolverConfig]]:
    """
    DQAM with theta = 1/(2(omega-1)) against fully parallel PCDM with
    B_i = r A_i^T A_i, the parallel DQAM variant with theta = 1/omega
    """
    curvature = p.with_norms(BlockNorms.curvature(p.A, p.r))
    return [
        ("dqam", p, config.replace(algorithm=Algorithm.DQAM, theta=None)),
        ("pcdm-full", curvature, config.replace(algorithm=Algorithm.PCDM_FULL)),
    ]


def timeunits_runs(
    p: blockopt.CompositeProblem, config: SolverConfig, tau: int
) -> typing.List[typing.Tuple[str, blockopt.CompositeProblem, SolverConfig]]:
    """
    DQAM, fully parallel PCDM and PCDM(tau), all with tau processors
    """
    config = config.replace(processors=tau)
    return [
        ("dqam", p, config.replace(algorithm=Algorithm.DQAM, theta=None)),
        ("pcdm-full", p, config.replace(algorithm=Algorithm.PCDM_FULL)),
        ("pcdm", p, config.replace(algorithm=Algorithm.PCDM, tau=tau)),
    ]


def replicate(
    spec: GeneratorSpec,
    seed: int,
    config: SolverConfig,
    taus: typing.Sequence[int] = (),
) -> typing.List[Replication]:
    """
    One generated instance, every algorithm of its experiment family
    :param spec: generator recipe, its seed is replaced by seed
    :param seed: instance and sampler seed
    :param config: shared solver settings (stop rule, iteration cap)
    :param taus: sampling sizes for the time-unit family
    """
    spec = spec.replace(seed=seed)
    A, _ = generate(spec)
    p = blockopt.CompositeProblem(A)
    config = config.replace(seed=seed)

    if spec.family == "block_angular":
        runs = [(None, run) for run in stepsize_runs(p, config)]
    else:
        runs = [(tau, run) for tau in taus for run in timeunits_runs(p, config, tau)]

    results = []
    for tau, (label, problem, run_config) in runs:
        trace = blockopt.solvers.run(problem, run_config)
        final = trace.final
        if not trace.converged:
            logger.warning("%s on %s seed %i stopped at max_iters", label, spec.family, seed)
        results.append(
            Replication(spec.family, spec.omega, tau, label, seed, final.epochs, final.time_units, final.wall_ms)
        )
        logger.info("%s omega=%i tau=%s seed=%i: %g epochs", label, spec.omega, tau, seed, final.epochs)
    return results


def compare(
    spec: GeneratorSpec,
    omegas: typing.Sequence[int],
    seeds: typing.Sequence[int],
    config: SolverConfig,
    taus: typing.Sequence[int] = (),
    pool: typing.Optional[worker_pool.Pool] = None,
) -> typing.List[Replication]:
    """
    All (omega, seed) replications, in omega then seed order
    """
    jobs = [(omega, seed) for omega in omegas for seed in seeds]
    pool = pool or worker_pool.pool.INLINE
    batches = pool.map_ordered(
        lambda job: replicate(spec.replace(omega=job[0]), job[1], config, taus), jobs
    )
    return [replication for batch in batches for replication in batch]


def write_rows(stream: typing.TextIO, rows: typing.Iterable[Replication]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COMPARE_HEADER)
    for row in rows:
        writer.writerow(row.row())
