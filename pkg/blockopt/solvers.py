import csv
import dataclasses
import enum
import logging
import math
import time
import typing

import numpy as np
import scipy.linalg

import worker_pool
from blockopt.blockstruct import BlockPartition, BlockVector, check_partitions, residual
from blockopt.errors import (
    BlockStructureError,
    ConvergenceError,
    DivergenceError,
    NumericalError,
    ProblemValidationError,
    SingularBlockError,
)
from blockopt.eso import EsoParams, eso_params
from blockopt.problem import (
    BlockPsi,
    CompositeProblem,
    LinearBoxPsi,
    PsiStack,
    SmoothFunction,
    grad_f,
    multiplier_update,
    prox_gradient_norm,
    reference_optimum,
)
from blockopt.sampling import TauNiceSampler
from blockopt.types import BlockSelection, Vector

logger = logging.getLogger(__name__)

BOX_QP_TOL = 1e-12
BOX_QP_MAX_SWEEPS = 10000
NEWTON_TOL = 1e-10
NEWTON_MAX_ITERS = 50
ARMIJO = 1e-4
MAX_BLOCK_SIZE = 512
DIVERGENCE_TOL = 1e-6


class Algorithm(enum.Enum):
    MOM = "mom"
    DQAM = "dqam"
    DQAM_FD = "dqam-fd"
    DQAM_SQA = "dqam-sqa"
    PCDM = "pcdm"
    PCDM_FULL = "pcdm-full"

    @classmethod
    def parse(cls, value: typing.Union[str, "Algorithm"]) -> "Algorithm":
        if isinstance(value, Algorithm):
            return value
        normalized = str(value).strip().lower().replace("_", "-")
        for algorithm in cls:
            if algorithm.value == normalized:
                return algorithm
        raise ValueError(f"Unknown algorithm {value}; choose from {[a.value for a in cls]}")


@dataclasses.dataclass(frozen=True)
class StopRule:
    """
    f_ratio: f(x) <= eps b^T b (with r folded out); gap: F(x) - F* <= eps;
    stationarity: prox-gradient norm <= eps; iter: run max_iters iterations
    """

    kind: str = "f_ratio"
    eps: float = 1e-4

    KINDS = ("f_ratio", "gap", "stationarity", "iter")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown stop rule {self.kind}; choose from {self.KINDS}")
        if self.kind != "iter" and self.eps <= 0:
            raise ValueError(f"Stop tolerance must be positive, got {self.eps}")

    @classmethod
    def parse(cls, text: typing.Union[str, "StopRule"]) -> "StopRule":
        """
        "f_ratio:1e-4", "gap:1e-8", "stationarity:1e-10" or "iter"
        """
        if isinstance(text, StopRule):
            return text
        kind, _, eps = str(text).partition(":")
        kind = kind.strip().replace("-", "_")
        if kind == "iter":
            return cls("iter", 0.0)
        return cls(kind, float(eps) if eps else 1e-4)

    def __str__(self):
        return self.kind if self.kind == "iter" else f"{self.kind}:{self.eps:g}"


@dataclasses.dataclass
class SolverConfig:
    algorithm: Algorithm = Algorithm.PCDM_FULL
    theta: typing.Optional[float] = None
    tau: typing.Optional[int] = None
    beta_override: typing.Optional[float] = None
    seed: int = 0
    max_iters: int = 1000
    stop: StopRule = dataclasses.field(default_factory=StopRule)
    processors: typing.Optional[int] = None
    workers: int = 1
    omega: typing.Optional[int] = None
    sqa_curvature: typing.Optional[typing.Sequence[typing.Union[float, np.ndarray]]] = None
    f_star: typing.Optional[float] = None
    keep_iterates: bool = False
    recompute_every: int = 1000
    inner_algorithm: Algorithm = Algorithm.DQAM
    outer_iters: int = 20
    inner_tol: float = 1e-10

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        self.inner_algorithm = Algorithm.parse(self.inner_algorithm)
        self.stop = StopRule.parse(self.stop)
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be nonnegative, got {self.max_iters}")
        if self.theta is not None and not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")

    @classmethod
    def from_mapping(cls, mapping: typing.Mapping[str, typing.Any]) -> "SolverConfig":
        """
        Builds a config from a flat mapping (config file or CLI flags);
        unknown keys are rejected, None values are ignored
        """
        names = {field.name for field in dataclasses.fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValueError(f"Unknown solver settings {sorted(unknown)}")
        return cls(**{k: v for k, v in mapping.items() if v is not None})

    def replace(self, **changes) -> "SolverConfig":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class TraceRecord:
    k: int
    F: float
    f: float
    gap: float
    blocks: int
    epochs: float
    time_units: int
    wall_ms: float

    def row(self) -> typing.List[str]:
        return [
            str(self.k),
            f"{self.F:.17g}",
            f"{self.f:.17g}",
            f"{self.gap:.17g}",
            str(self.blocks),
            f"{self.epochs:.17g}",
            str(self.time_units),
            f"{self.wall_ms:.3f}",
        ]


class IterationTrace:
    HEADER = ("k", "F", "f", "gap", "blocks", "epochs", "time_units", "wall_ms")

    def __init__(self, algorithm: Algorithm):
        self.algorithm = algorithm
        self.records: typing.List[TraceRecord] = []
        self.iterates: typing.List[BlockVector] = []
        self.x: typing.Optional[BlockVector] = None
        self.converged = False
        self.multipliers: typing.List[Vector] = []

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    @property
    def iterations(self) -> int:
        return self.final.k

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(record, name) for record in self.records])

    def write_csv(self, stream: typing.TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.HEADER)
        for record in self.records:
            writer.writerow(record.row())

    def __len__(self):
        return len(self.records)

    def __repr__(self):
        return f"IterationTrace({self.algorithm.value}, {len(self.records)} records, converged={self.converged})"


class MultiplierTrace:
    def __init__(self):
        self.multipliers: typing.List[Vector] = []
        self.points: typing.List[BlockVector] = []
        self.residuals: typing.List[float] = []
        self.inner_iterations: typing.List[int] = []
        self.inner_converged: typing.List[bool] = []

    def append(self, pi: Vector, z: BlockVector, linking_residual: float, inner_iterations: int, inner_converged: bool):
        self.multipliers.append(pi)
        self.points.append(z)
        self.residuals.append(linking_residual)
        self.inner_iterations.append(inner_iterations)
        self.inner_converged.append(inner_converged)

    def __len__(self):
        return len(self.multipliers)


class Curvature:
    """
    Per-block curvature Q_i of the separable model <g_i, h> + (1/2)<Q_i h, h>.
    Blocks whose Q_i is a multiple of the identity are solved together as one
    vectorized prox; the rest get small dense solves.
    """

    def __init__(self, partition: BlockPartition, items: typing.Sequence[typing.Union[float, np.ndarray]]):
        if len(items) != partition.n:
            raise BlockStructureError(f"Expected {partition.n} curvature blocks, got {len(items)}")
        self.partition = partition
        self.scalar = np.full(partition.n, np.nan)
        self.matrices: typing.Dict[int, np.ndarray] = {}
        self._factors: typing.Dict[int, typing.Any] = {}
        for i, item in enumerate(items):
            Q = np.atleast_2d(np.asarray(item, dtype=float))
            size = int(partition.sizes[i])
            if Q.shape == (1, 1):
                if Q[0, 0] <= 0:
                    raise ProblemValidationError(f"Curvature of block {i} is not positive")
                self.scalar[i] = Q[0, 0]
            elif Q.shape == (size, size):
                if size > MAX_BLOCK_SIZE:
                    raise ProblemValidationError(
                        f"Block {i} has {size} coordinates, dense solves are capped at {MAX_BLOCK_SIZE}"
                    )
                self.matrices[i] = Q
            else:
                raise BlockStructureError(f"Curvature of block {i} has shape {Q.shape}, block size {size}")
        self._scalar_mask = ~np.isnan(self.scalar)

    def solve(
        self,
        psi: PsiStack,
        x: Vector,
        g: Vector,
        blocks: np.ndarray,
        pool: worker_pool.Pool,
    ) -> typing.Tuple[np.ndarray, Vector]:
        """
        Minimizers u = x_i + h_i of the block models for the given blocks
        :return: (coordinates, u) with coordinates in block order
        """
        partition = self.partition
        scalar_blocks = blocks[self._scalar_mask[blocks]]
        matrix_blocks = blocks[~self._scalar_mask[blocks]]

        pieces = {}
        if len(scalar_blocks):
            coordinates = partition.indices(scalar_blocks)
            d = np.repeat(self.scalar[scalar_blocks], partition.sizes[scalar_blocks])
            u = psi.prox(coordinates, x[coordinates] - g[coordinates] / d, d)
            if len(matrix_blocks) == 0:
                return coordinates, u
            starts = np.concatenate(([0], np.cumsum(partition.sizes[scalar_blocks])))
            for position, i in enumerate(scalar_blocks):
                pieces[int(i)] = u[starts[position] : starts[position + 1]]

        def solve_one(i):
            sl = partition.slice(i)
            return solve_block_subproblem(
                self.matrices[i], g[sl], psi.blocks[i], x[sl], self._factor(i, psi.blocks[i])
            )

        for i, h in zip(matrix_blocks, pool.map_ordered(solve_one, matrix_blocks.tolist())):
            pieces[int(i)] = x[partition.slice(int(i))] + h

        return partition.indices(blocks), np.concatenate([pieces[int(i)] for i in blocks])

    def _factor(self, i: int, psi_i: BlockPsi):
        if isinstance(psi_i, LinearBoxPsi):
            return None
        key = (i, psi_i.mu)
        if key not in self._factors:
            Q = self.matrices[i]
            try:
                self._factors[key] = scipy.linalg.cho_factor(Q + psi_i.mu * np.eye(len(Q)))
            except np.linalg.LinAlgError:
                raise SingularBlockError(
                    f"Block {i} subproblem is singular (A_i^T A_i singular and no quadratic term); "
                    "use B_i norms or a strongly convex block term"
                )
        return self._factors[key]


def solve_block_subproblem(
    Q: np.ndarray, g: Vector, psi_i: BlockPsi, x_i: Vector, factor=None
) -> Vector:
    """
    argmin_h <g, h> + (1/2)<Q h, h> + Psi_i(x_i + h)
    Smooth kinds: one SPD solve (Q + mu I) h = -(g + c + mu x_i).
    Box kind: projected Gauss-Seidel sweeps in u = x_i + h to 1e-12.
    """
    if isinstance(psi_i, LinearBoxPsi):
        return _box_qp(Q, g, psi_i, x_i)
    mu = psi_i.mu
    if factor is None:
        try:
            factor = scipy.linalg.cho_factor(Q + mu * np.eye(len(Q)))
        except np.linalg.LinAlgError:
            raise SingularBlockError(
                "Block subproblem is singular; use B_i norms or a strongly convex block term"
            )
    return scipy.linalg.cho_solve(factor, -(g + psi_i.c + mu * x_i))


def _box_qp(Q: np.ndarray, g: Vector, psi_i: LinearBoxPsi, x_i: Vector) -> Vector:
    diagonal = np.diag(Q)
    if np.any(diagonal <= 0):
        raise SingularBlockError("Box-constrained block subproblem has a zero-curvature coordinate")
    q = g - Q @ x_i + psi_i.c
    u = np.clip(x_i, psi_i.lo, psi_i.hi)
    for sweep in range(BOX_QP_MAX_SWEEPS):
        change = 0.0
        for j in range(len(u)):
            updated = min(max(u[j] - (Q[j] @ u + q[j]) / diagonal[j], psi_i.lo[j]), psi_i.hi[j])
            change = max(change, abs(updated - u[j]))
            u[j] = updated
        if change <= BOX_QP_TOL * max(1.0, np.abs(u).max()):
            return u - x_i
    raise ConvergenceError(f"Box subproblem did not converge in {BOX_QP_MAX_SWEEPS} sweeps")


def dqa_curvature(p: CompositeProblem) -> Curvature:
    """
    C_i = r A_i^T A_i, the Hessian blocks of f
    """
    return Curvature(p.partition, [p.penalty.block_hessian(None, i) for i in range(p.n)])


def eso_curvature(p: CompositeProblem, params: EsoParams) -> Curvature:
    """
    beta w_i B_i
    """
    items = [
        params.beta * params.w[i] if p.norms.identity[i] else params.beta * params.w[i] * p.norms.B[i]
        for i in range(p.n)
    ]
    return Curvature(p.partition, items)


def sqa_curvature(partition: BlockPartition, C: typing.Sequence[typing.Union[float, np.ndarray]]) -> Curvature:
    for i, C_i in enumerate(C):
        C_i = np.atleast_2d(np.asarray(C_i, dtype=float))
        if np.abs(C_i - C_i.T).max() > 1e-12 * max(1.0, np.abs(C_i).max()):
            raise ProblemValidationError(f"C_{i} is not symmetric")
        try:
            np.linalg.cholesky(C_i)
        except np.linalg.LinAlgError:
            raise ProblemValidationError(f"C_{i} is not positive definite")
    return Curvature(partition, C)


def equivalence_curvature(p: CompositeProblem) -> typing.List[typing.Union[float, np.ndarray]]:
    """
    C_i = L_i B_i, under which DQAM-SQA with theta = 1/omega is fully parallel PCDM
    """
    return [
        p.L[i] if p.norms.identity[i] else p.L[i] * p.norms.B[i] for i in range(p.n)
    ]


def default_theta(algorithm: Algorithm, omega: int) -> float:
    if algorithm is Algorithm.DQAM_SQA:
        return 1.0 / omega
    if omega < 2:
        return 1.0
    return 1.0 / (2 * (omega - 1))


def _check_theta(theta: float, omega: typing.Optional[int] = None) -> None:
    if not 0 < theta <= 1:
        raise ProblemValidationError(f"theta must lie in (0, 1], got {theta}")
    if omega is not None and omega >= 2 and theta > 1.0 / (2 * (omega - 1)) * (1 + 1e-12):
        logger.warning(
            "theta=%g exceeds 1/(2(omega-1))=%g, the linear rate guarantee for DQAM no longer applies",
            theta,
            1.0 / (2 * (omega - 1)),
        )


def _psi_stack(partition: BlockPartition, psi: typing.Union[PsiStack, typing.Sequence[BlockPsi]]) -> PsiStack:
    if isinstance(psi, PsiStack):
        return psi
    return PsiStack(partition, psi)


def _all_blocks(partition: BlockPartition) -> np.ndarray:
    return np.arange(partition.n)


def dqam_step(
    p: CompositeProblem, x: BlockVector, theta: float, pool: typing.Optional[worker_pool.Pool] = None
) -> BlockVector:
    """
    One DQAM iteration: minimize the diagonal quadratic approximation
    f(x) + <f'(x), h> + (r/2) sum ||A_i h_i||^2 + Psi(x + h) block by block,
    then return x + theta h.
    """
    _check_theta(theta)
    check_partitions(x.partition, p.partition)
    g = grad_f(p, x).data
    coordinates, u = dqa_curvature(p).solve(
        p.psi_stack, x.data, g, _all_blocks(p.partition), pool or worker_pool.pool.INLINE
    )
    data = x.data.copy()
    data[coordinates] += theta * (u - x.data[coordinates])
    return BlockVector(p.partition, data)


def _check_finite(*values) -> None:
    for value in values:
        if not np.all(np.isfinite(value)):
            raise NumericalError("Smooth oracle returned non-finite values")


def _fd_block(f_oracle: SmoothFunction, psi_i: BlockPsi, x: Vector, i: int) -> Vector:
    """
    argmin_h f(x + U_i h) + Psi_i(x_i + h) by proximal Newton with backtracking
    """
    sl = f_oracle.partition.slice(i)
    y = x.copy()

    def objective(point):
        return f_oracle.value(point) + psi_i.value(point[sl])

    current = objective(y)
    for _ in range(NEWTON_MAX_ITERS):
        gradient = f_oracle.gradient(y)[sl]
        hessian = f_oracle.block_hessian(y, i)
        _check_finite(current, gradient, hessian)
        direction = solve_block_subproblem(hessian, gradient, psi_i, y[sl])
        if np.abs(direction).max() <= NEWTON_TOL * max(1.0, np.abs(y[sl]).max()):
            break
        decrease = float(gradient @ direction) + psi_i.value(y[sl] + direction) - psi_i.value(y[sl])
        t = 1.0
        while True:
            trial = y.copy()
            trial[sl] += t * direction
            value = objective(trial)
            if value <= current + ARMIJO * t * decrease or t < 1e-12:
                break
            t *= 0.5
        y, current = trial, value
    else:
        logger.warning("Block %i Newton solve hit the %i iteration cap", i, NEWTON_MAX_ITERS)
    return y[sl] - x[sl]


def dqam_fd_step(
    f_oracle: SmoothFunction,
    psi: typing.Union[PsiStack, typing.Sequence[BlockPsi]],
    x: BlockVector,
    theta: float,
    pool: typing.Optional[worker_pool.Pool] = None,
) -> BlockVector:
    """
    Finite-difference generalization of DQAM: each block minimizes
    f(x + U_i h_i) + Psi_i(x_i + h_i) on its own, then x + theta h.
    """
    _check_theta(theta)
    check_partitions(x.partition, f_oracle.partition)
    psi = _psi_stack(x.partition, psi)
    pool = pool or worker_pool.pool.INLINE
    steps = pool.map_ordered(
        lambda i: _fd_block(f_oracle, psi.blocks[i], x.data, i), range(x.partition.n)
    )
    return BlockVector(x.partition, x.data + theta * np.concatenate(steps))


def dqam_sqa_step(
    f_oracle: SmoothFunction,
    psi: typing.Union[PsiStack, typing.Sequence[BlockPsi]],
    x: BlockVector,
    theta: float,
    C: typing.Sequence[typing.Union[float, np.ndarray]],
    pool: typing.Optional[worker_pool.Pool] = None,
) -> BlockVector:
    """
    Separable quadratic generalization of DQAM:
    h_i = argmin <f'(x)_i, h> + (1/2)<C_i h, h> + Psi_i(x_i + h), then x + theta h.
    """
    _check_theta(theta)
    check_partitions(x.partition, f_oracle.partition)
    psi = _psi_stack(x.partition, psi)
    g = f_oracle.gradient(x.data)
    _check_finite(g)
    coordinates, u = sqa_curvature(x.partition, C).solve(
        psi, x.data, g, _all_blocks(x.partition), pool or worker_pool.pool.INLINE
    )
    data = x.data.copy()
    data[coordinates] += theta * (u - x.data[coordinates])
    return BlockVector(x.partition, data)


def _selection(p: CompositeProblem, S: BlockSelection) -> np.ndarray:
    S = np.unique(np.asarray(S, dtype=np.int64))
    if len(S) == 0:
        raise ProblemValidationError("PCDM needs a nonempty block selection")
    if S[0] < 0 or S[-1] >= p.n:
        raise BlockStructureError(f"Block selection {S.tolist()} out of range for {p.n} blocks")
    return S


def pcdm_step(
    p: CompositeProblem,
    x: BlockVector,
    params: EsoParams,
    S: BlockSelection,
    pool: typing.Optional[worker_pool.Pool] = None,
) -> BlockVector:
    """
    One PCDM iteration on the sampled blocks S:
    x_i <- x_i + argmin <f'(x)_i, h> + (beta w_i / 2)<B_i h, h> + Psi_i(x_i + h), i in S.
    Blocks outside S are left untouched.
    """
    check_partitions(x.partition, p.partition)
    S = _selection(p, S)
    g = grad_f(p, x).data
    coordinates, u = eso_curvature(p, params).solve(
        p.psi_stack, x.data, g, S, pool or worker_pool.pool.INLINE
    )
    data = x.data.copy()
    data[coordinates] = u
    return BlockVector(p.partition, data)


def pcdm_full_step(
    p: CompositeProblem, x: BlockVector, omega: int, pool: typing.Optional[worker_pool.Pool] = None
) -> BlockVector:
    """
    Fully parallel PCDM: every block, beta = omega, w = L
    """
    params = eso_params(omega, p.n, p.n, p.L)
    return pcdm_step(p, x, params, _all_blocks(p.partition), pool)


def expected_step_value(
    p: CompositeProblem, params: EsoParams, x: BlockVector, seeds: typing.Iterable[int]
) -> float:
    """
    Monte-Carlo estimate of E[F(x_{k+1}) | x_k = x] over single seeded PCDM steps
    """
    values = [
        p.eval_F(pcdm_step(p, x, params, TauNiceSampler(p.n, params.tau, seed).draw()))
        for seed in seeds
    ]
    return math.fsum(values) / len(values)


class _ColumnAccess:
    """
    Gathers CSC column segments of A for a set of coordinates so gradients and
    residual updates cost only the touched nonzeros.
    """

    def __init__(self, p: CompositeProblem):
        matrix = p.A.matrix
        self.indptr = matrix.indptr
        self.indices = matrix.indices
        self.data = matrix.data
        self.rows = matrix.shape[0]
        self.r = p.r

    def _segments(self, coordinates: np.ndarray) -> typing.Tuple[np.ndarray, np.ndarray]:
        starts = self.indptr[coordinates]
        lengths = self.indptr[coordinates + 1] - starts
        total = int(lengths.sum())
        offsets = np.repeat(starts - np.concatenate(([0], np.cumsum(lengths)[:-1])), lengths)
        return offsets + np.arange(total), lengths

    def gradient(self, coordinates: np.ndarray, rho: Vector) -> Vector:
        entries, lengths = self._segments(coordinates)
        owner = np.repeat(np.arange(len(coordinates)), lengths)
        products = self.data[entries] * rho[self.indices[entries]]
        return -self.r * np.bincount(owner, weights=products, minlength=len(coordinates))

    def apply(self, coordinates: np.ndarray, step: Vector, rho: Vector) -> None:
        """
        rho <- rho - A_S step
        """
        entries, lengths = self._segments(coordinates)
        contributions = self.data[entries] * np.repeat(step, lengths)
        rho -= np.bincount(self.indices[entries], weights=contributions, minlength=self.rows)


class _Driver:
    """
    Owns the iterate, the residual cache and the sampler for one run
    """

    def __init__(self, p: CompositeProblem, config: SolverConfig, pool: worker_pool.Pool):
        self._logger = logging.getLogger(__name__)
        self.p = p
        self.config = config
        self.pool = pool
        self.omega = config.omega or p.omega
        self.n = p.n
        algorithm = config.algorithm
        self.sampler = None
        self.params = None

        if algorithm in (Algorithm.DQAM, Algorithm.DQAM_FD, Algorithm.DQAM_SQA):
            self.theta = config.theta or default_theta(algorithm, self.omega)
            _check_theta(self.theta, self.omega if algorithm is Algorithm.DQAM else None)
            if algorithm is Algorithm.DQAM and self.omega == 1:
                self._logger.info("DQAM with omega = 1 runs without a rate guarantee")
        if algorithm is Algorithm.DQAM:
            self.curvature = dqa_curvature(p)
        elif algorithm is Algorithm.DQAM_SQA:
            self.curvature = sqa_curvature(p.partition, config.sqa_curvature or equivalence_curvature(p))
        elif algorithm in (Algorithm.PCDM, Algorithm.PCDM_FULL):
            tau = self.n if algorithm is Algorithm.PCDM_FULL else (config.tau or self.n)
            self.params = eso_params(self.omega, tau, self.n, p.L)
            if config.beta_override is not None:
                self.params = dataclasses.replace(self.params, beta=float(config.beta_override))
            self.curvature = eso_curvature(p, self.params)
            self.sampler = TauNiceSampler(self.n, tau, config.seed)
        self.processors = config.processors or self.n
        self.columns = _ColumnAccess(p)

    @property
    def monotone(self) -> bool:
        """
        F must decrease under full sampling and for deterministic steps with theta <= 1/omega;
        only those runs arm the divergence guard
        """
        if self.sampler is not None:
            return self.sampler.tau == self.n
        return self.theta <= (1.0 + 1e-12) / self.omega

    def blocks(self) -> np.ndarray:
        if self.sampler is None:
            return np.arange(self.n)
        return self.sampler.draw()

    def step(self, x: Vector, rho: Vector) -> typing.Tuple[np.ndarray, np.ndarray, Vector]:
        """
        Computes the next iterate in place
        :return: (blocks updated, coordinates, change on those coordinates)
        """
        algorithm = self.config.algorithm
        blocks = self.blocks()
        if algorithm is Algorithm.DQAM_FD:
            steps = self.pool.map_ordered(
                lambda i: _fd_block(self.p.penalty, self.p.psi_stack.blocks[i], x, i),
                range(self.n),
            )
            coordinates = np.arange(self.p.partition.N)
            change = self.theta * np.concatenate(steps)
            x += change
            return blocks, coordinates, change

        coordinates = self.p.partition.indices(blocks)
        g = np.zeros(self.p.partition.N)
        g[coordinates] = self.columns.gradient(coordinates, rho)
        coordinates, u = self.curvature.solve(self.p.psi_stack, x, g, blocks, self.pool)
        old = x[coordinates].copy()
        if self.sampler is None:
            x[coordinates] = old + self.theta * (u - old)
        else:
            x[coordinates] = u
        return blocks, coordinates, x[coordinates] - old


def _objective(p: CompositeProblem, x: Vector, rho: Vector) -> typing.Tuple[float, float]:
    f = 0.5 * p.r * float(rho @ rho)
    return f + p.psi_stack.value(x), f


def run(
    p: CompositeProblem,
    config: SolverConfig,
    x0: typing.Optional[BlockVector] = None,
    pool: typing.Optional[worker_pool.Pool] = None,
) -> IterationTrace:
    """
    Iterates the configured algorithm until the stop rule holds or
    max_iters is reached, recording one trace record per iteration.
    :param p: problem
    :param config: solver settings
    :param x0: starting point, the box-projected origin by default
    :param pool: worker pool for block subproblems, one is made from config.workers otherwise
    """
    if config.algorithm is Algorithm.MOM:
        return _run_multipliers(p, config, x0)
    p.validate_for_solvers()
    own_pool = pool is None
    if own_pool:
        pool = worker_pool.Pool(workers=config.workers)
    try:
        return _iterate(p, config, x0, pool)
    finally:
        if own_pool:
            pool.shutdown()


def _iterate(
    p: CompositeProblem, config: SolverConfig, x0: typing.Optional[BlockVector], pool: worker_pool.Pool
) -> IterationTrace:
    driver = _Driver(p, config, pool)
    stop = config.stop
    f_star = config.f_star
    if stop.kind == "gap" and f_star is None:
        f_star = reference_optimum(p)[1]
    bb = float(p.b @ p.b)

    x = (x0 or p.feasible_start()).data.copy()
    rho = residual(p.A, x)
    trace = IterationTrace(config.algorithm)
    started = time.perf_counter()
    F, f = _objective(p, x, rho)
    F_initial = F
    blocks_total = 0
    time_units = 0

    def record(k, blocks):
        gap = 0.5 * p.r * float(rho @ rho) / (p.r * bb) if bb > 0 else math.nan
        trace.append(
            TraceRecord(
                k=k,
                F=F,
                f=f,
                gap=gap,
                blocks=blocks,
                epochs=blocks_total / p.n,
                time_units=time_units,
                wall_ms=1000.0 * (time.perf_counter() - started),
            )
        )
        if config.keep_iterates:
            trace.iterates.append(BlockVector(p.partition, x))
        return gap

    def satisfied(gap) -> bool:
        if stop.kind == "f_ratio":
            return gap <= stop.eps
        if stop.kind == "gap":
            return F - f_star <= stop.eps
        if stop.kind == "stationarity":
            return prox_gradient_norm(p, BlockVector(p.partition, x)) <= stop.eps
        return False

    logger.info(
        "Running %s on %r with stop %s, max %i iterations", config.algorithm.value, p, stop, config.max_iters
    )
    gap = record(0, 0)
    converged = satisfied(gap)
    for k in range(1, config.max_iters + 1):
        if converged:
            break
        blocks, coordinates, change = driver.step(x, rho)
        if k % config.recompute_every == 0:
            rho = residual(p.A, x)
        else:
            driver.columns.apply(coordinates, change, rho)
        F_previous = F
        F, f = _objective(p, x, rho)
        blocks_total += len(blocks)
        time_units += math.ceil(len(blocks) / driver.processors)
        gap = record(k, len(blocks))
        logger.debug("k=%i F=%.17g gap=%.3g", k, F, gap)

        if not math.isfinite(F):
            raise DivergenceError(f"{config.algorithm.value} produced a non-finite objective at iteration {k}")
        if driver.monotone and F - F_previous > DIVERGENCE_TOL * abs(F_previous) + 1e-14 * abs(F_initial):
            raise DivergenceError(
                f"{config.algorithm.value} increased F from {F_previous:.17g} to {F:.17g} at iteration {k}"
            )
        converged = satisfied(gap)

    trace.x = BlockVector(p.partition, x)
    trace.converged = converged
    logger.info(
        "%s stopped after %i iterations, F=%.6g, converged=%s",
        config.algorithm.value,
        trace.iterations,
        F,
        converged,
    )
    return trace


def method_of_multipliers(
    p: CompositeProblem,
    inner: SolverConfig,
    outer_iters: int,
    inner_tol: float,
    z0: typing.Optional[BlockVector] = None,
) -> MultiplierTrace:
    """
    Alternates an inner solve of the augmented Lagrangian for fixed pi with
    the update pi <- pi + r (b - A z). The inner solve stops once the
    prox-gradient norm drops below inner_tol.
    :param p: problem with the initial multipliers
    :param inner: inner solver settings (algorithm other than MOM)
    :param outer_iters: number of multiplier updates
    :param inner_tol: inner stationarity tolerance
    :param z0: starting point
    """
    if inner.algorithm is Algorithm.MOM:
        raise ValueError("The inner solver of the method of multipliers cannot itself be MOM")
    inner = inner.replace(stop=StopRule("stationarity", inner_tol))
    problem = p
    z = z0 or p.feasible_start()
    trace = MultiplierTrace()
    for k in range(outer_iters):
        inner_trace = run(problem, inner, x0=z)
        z = inner_trace.x
        if not inner_trace.converged:
            logger.warning("Inner solve of outer iteration %i stopped before reaching %g", k, inner_tol)
        linking = float(np.linalg.norm(residual(problem.A, z)))
        pi = multiplier_update(problem, z)
        trace.append(pi, z, linking, inner_trace.iterations, inner_trace.converged)
        if len(trace.residuals) > 1 and linking > trace.residuals[-2]:
            logger.info("Linking residual increased at outer iteration %i: %g", k, linking)
        logger.info("Outer iteration %i: ||b - Az|| = %g after %i inner iterations", k, linking, inner_trace.iterations)
        problem = problem.with_multipliers(pi)
    return trace


def _run_multipliers(p: CompositeProblem, config: SolverConfig, x0: typing.Optional[BlockVector]) -> IterationTrace:
    inner = config.replace(algorithm=config.inner_algorithm)
    multipliers = method_of_multipliers(p, inner, config.outer_iters, config.inner_tol, x0)
    trace = IterationTrace(Algorithm.MOM)
    bb = float(p.b @ p.b)
    started = time.perf_counter()
    blocks_total = 0
    for k, (pi, z, inner_iterations) in enumerate(
        zip(multipliers.multipliers, multipliers.points, multipliers.inner_iterations), start=1
    ):
        problem = p.with_multipliers(pi)
        rho = residual(p.A, z)
        f = 0.5 * p.r * float(rho @ rho)
        blocks_total += inner_iterations * p.n
        trace.append(
            TraceRecord(
                k=k,
                F=f + problem.eval_psi(z),
                f=f,
                gap=f / (p.r * bb) if bb > 0 else math.nan,
                blocks=inner_iterations * p.n,
                epochs=blocks_total / p.n,
                time_units=blocks_total // p.n,
                wall_ms=1000.0 * (time.perf_counter() - started),
            )
        )
    trace.multipliers = multipliers.multipliers
    trace.x = multipliers.points[-1] if multipliers.points else (x0 or p.feasible_start())
    trace.converged = bool(multipliers.inner_converged) and all(multipliers.inner_converged)
    return trace
