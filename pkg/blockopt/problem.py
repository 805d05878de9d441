import dataclasses
import functools
import logging
import typing

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from blockopt.blockstruct import (
    BlockMatrix,
    BlockNorms,
    BlockPartition,
    BlockVector,
    block_lipschitz_constants,
    check_partitions,
    residual,
)
from blockopt.errors import (
    BlockStructureError,
    CertificationError,
    ConvergenceError,
    ProblemValidationError,
)
from blockopt.separability import partial_separability_degree
from blockopt.types import Vector

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-10
EIGEN_SHIFT = 1e-8
ZERO_EIGEN_TOL = 1e-10
DENSE_EIGEN_LIMIT = 2000
REFERENCE_CG_TOL = 1e-12
REFERENCE_RESIDUAL_TOL = 1e-10
REFERENCE_STATIONARITY_TOL = 1e-10


class BlockPsi:
    """
    Closed convex block term Psi_i(u) = <c, u> + (mu/2)||u||^2 + indicator{lo <= u <= hi}.
    The three kinds fix which parts are present.
    """

    kind = None

    def __init__(self, size: int):
        self.size = int(size)

    @property
    def c(self) -> Vector:
        return np.zeros(self.size)

    @property
    def mu(self) -> float:
        return 0.0

    @property
    def lo(self) -> Vector:
        return np.full(self.size, -np.inf)

    @property
    def hi(self) -> Vector:
        return np.full(self.size, np.inf)

    @property
    def has_box(self) -> bool:
        return False

    def value(self, u: Vector) -> float:
        raise NotImplementedError

    def prox(self, v: Vector, d: float) -> Vector:
        """
        argmin_u (d/2)||u - v||^2 + Psi_i(u)
        """
        raise NotImplementedError

    def with_linear(self, extra: Vector) -> "BlockPsi":
        """
        Same term plus <extra, u>
        """
        raise NotImplementedError

    def parameters(self) -> typing.List[float]:
        return []

    def _check(self, u: Vector) -> Vector:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.size,):
            raise BlockStructureError(f"{self.kind} term expects size {self.size}, got {u.shape}")
        return u


class ZeroPsi(BlockPsi):
    kind = "zero"

    def value(self, u: Vector) -> float:
        self._check(u)
        return 0.0

    def prox(self, v: Vector, d: float) -> Vector:
        return np.array(v, dtype=float)

    def with_linear(self, extra: Vector) -> BlockPsi:
        extra = np.asarray(extra, dtype=float)
        if not np.any(extra):
            return self
        return LinearQuadraticPsi(extra, 0.0)


class LinearBoxPsi(BlockPsi):
    kind = "linear_box"

    def __init__(self, c: Vector, lo: Vector, hi: Vector):
        c = np.atleast_1d(np.array(c, dtype=float))
        super().__init__(len(c))
        lo = np.broadcast_to(np.asarray(lo, dtype=float), c.shape).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), c.shape).copy()
        if np.any(lo > hi):
            raise ProblemValidationError(f"Box bounds need lo <= hi, got {lo} > {hi}")
        self._c, self._lo, self._hi = c, lo, hi

    @property
    def c(self) -> Vector:
        return self._c

    @property
    def lo(self) -> Vector:
        return self._lo

    @property
    def hi(self) -> Vector:
        return self._hi

    @property
    def has_box(self) -> bool:
        return True

    def value(self, u: Vector) -> float:
        u = self._check(u)
        if np.any(u < self._lo) or np.any(u > self._hi):
            return np.inf
        return float(self._c @ u)

    def prox(self, v: Vector, d: float) -> Vector:
        return np.clip(np.asarray(v, dtype=float) - self._c / d, self._lo, self._hi)

    def with_linear(self, extra: Vector) -> BlockPsi:
        return LinearBoxPsi(self._c + extra, self._lo, self._hi)

    def parameters(self) -> typing.List[float]:
        return [*self._c, *self._lo, *self._hi]


class LinearQuadraticPsi(BlockPsi):
    kind = "linear_quadratic"

    def __init__(self, c: Vector, mu: float):
        c = np.atleast_1d(np.array(c, dtype=float))
        super().__init__(len(c))
        if mu < 0:
            raise ProblemValidationError(f"Quadratic weight must be nonnegative, got {mu}")
        self._c = c
        self._mu = float(mu)

    @property
    def c(self) -> Vector:
        return self._c

    @property
    def mu(self) -> float:
        return self._mu

    def value(self, u: Vector) -> float:
        u = self._check(u)
        return float(self._c @ u + 0.5 * self._mu * (u @ u))

    def prox(self, v: Vector, d: float) -> Vector:
        v = np.asarray(v, dtype=float)
        if self._mu == 0.0:
            return v - self._c / d
        return (d * v - self._c) / (d + self._mu)

    def with_linear(self, extra: Vector) -> BlockPsi:
        return LinearQuadraticPsi(self._c + extra, self._mu)

    def parameters(self) -> typing.List[float]:
        return [self._mu, *self._c]


PSI_KINDS = {cls.kind: cls for cls in (ZeroPsi, LinearBoxPsi, LinearQuadraticPsi)}


def prox_psi_block(psi_i: BlockPsi, v: Vector, d: float) -> Vector:
    """
    argmin_u { (d/2)||u - v||^2 + Psi_i(u) }
    :param psi_i: block term
    :param v: prox center
    :param d: positive curvature
    """
    if d <= 0:
        raise ProblemValidationError(f"Prox weight must be positive, got {d}")
    return psi_i.prox(v, d)


class PsiStack:
    """
    All block terms flattened over R^N so that proxes over many scalar-curvature
    blocks run as one vectorized clip.
    """

    def __init__(self, partition: BlockPartition, psi: typing.Sequence[BlockPsi]):
        if len(psi) != partition.n:
            raise BlockStructureError(f"Expected {partition.n} block terms, got {len(psi)}")
        for i, psi_i in enumerate(psi):
            if psi_i.size != partition.sizes[i]:
                raise BlockStructureError(
                    f"Block term {i} has size {psi_i.size}, block has size {partition.sizes[i]}"
                )
        self.partition = partition
        self.blocks = list(psi)
        self.c = np.concatenate([p.c for p in psi])
        self.mu = partition.expand([p.mu for p in psi])
        self.lo = np.concatenate([p.lo for p in psi])
        self.hi = np.concatenate([p.hi for p in psi])
        self.has_box = any(p.has_box for p in psi)

    def value(self, data: Vector) -> float:
        if self.has_box and (np.any(data < self.lo) or np.any(data > self.hi)):
            return np.inf
        return float(self.c @ data + 0.5 * (self.mu * data) @ data)

    def prox(self, coordinates: np.ndarray, v: Vector, d: Vector) -> Vector:
        """
        Coordinatewise prox over the given coordinates with curvatures d
        """
        c = self.c[coordinates]
        mu = self.mu[coordinates]
        u = np.where(mu > 0, (d * v - c) / (d + mu), v - c / d)
        if self.has_box:
            u = np.clip(u, self.lo[coordinates], self.hi[coordinates])
        return u

    def project(self, data: Vector) -> Vector:
        return np.clip(data, self.lo, self.hi)


class SmoothFunction:
    """
    Smooth convex f on R^N seen through its value, gradient and block Hessians
    """

    FD_STEP = 1e-6

    def __init__(self, partition: BlockPartition):
        self.partition = partition

    def value(self, x: Vector) -> float:
        raise NotImplementedError

    def gradient(self, x: Vector) -> Vector:
        raise NotImplementedError

    def block_hessian(self, x: Vector, i: int) -> np.ndarray:
        """
        U_i^T f''(x) U_i by central differences of the gradient
        """
        sl = self.partition.slice(i)
        size = sl.stop - sl.start
        H = np.zeros((size, size))
        for k in range(size):
            step = self.FD_STEP * max(1.0, abs(x[sl.start + k]))
            forward = np.array(x, dtype=float)
            backward = np.array(x, dtype=float)
            forward[sl.start + k] += step
            backward[sl.start + k] -= step
            H[:, k] = (self.gradient(forward)[sl] - self.gradient(backward)[sl]) / (2 * step)
        return 0.5 * (H + H.T)


class QuadraticPenalty(SmoothFunction):
    """
    f(x) = (r/2)||b - Ax||^2 with exact block Hessians r A_i^T A_i
    """

    def __init__(self, A: BlockMatrix, r: float):
        super().__init__(A.partition)
        self.A = A
        self.r = float(r)
        self._grams: typing.List[typing.Optional[np.ndarray]] = [None] * A.partition.n

    def value(self, x: Vector) -> float:
        rho = residual(self.A, x)
        return 0.5 * self.r * float(rho @ rho)

    def gradient(self, x: Vector) -> Vector:
        return -self.r * (self.A.matrix.T @ residual(self.A, x))

    def block_hessian(self, x: Vector, i: int) -> np.ndarray:
        if self._grams[i] is None:
            self._grams[i] = self.r * self.A.gram(i)
        return self._grams[i]


@dataclasses.dataclass(frozen=True)
class StrongConvexityInfo:
    mu_F: float
    mu_f: float
    mu_psi: float
    w: np.ndarray
    conservative: bool = False

    def rescaled(self, t: float) -> "StrongConvexityInfo":
        """
        Constants with respect to the weights t w
        """
        if t <= 0:
            raise ProblemValidationError(f"Weight scale must be positive, got {t}")
        return StrongConvexityInfo(
            self.mu_F / t, self.mu_f / t, self.mu_psi / t, self.w * t, self.conservative
        )

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {
            "mu_F": self.mu_F,
            "mu_f": self.mu_f,
            "mu_psi": self.mu_psi,
            "conservative": self.conservative,
        }


class CompositeProblem:
    """
    F(x) = f(x) + Psi(x) with f(x) = (r/2)||b - Ax||^2 and
    Psi_i(u) = g_i(u) - <A_i^T pi, u>; the constant <pi, b> is dropped.
    """

    def __init__(
        self,
        A: BlockMatrix,
        r: float = 1.0,
        psi: typing.Optional[typing.Sequence[BlockPsi]] = None,
        pi: typing.Optional[Vector] = None,
        norms: typing.Optional[BlockNorms] = None,
    ):
        self._logger = logging.getLogger(__name__)
        if r <= 0:
            raise ProblemValidationError(f"Penalty parameter must be positive, got {r}")
        partition = A.partition
        if psi is None:
            psi = [ZeroPsi(size) for size in partition.sizes]
        if norms is None:
            norms = BlockNorms.identity_norms(partition)
        check_partitions(partition, norms.partition)
        self.A = A
        self.r = float(r)
        self.psi = list(psi)
        self.norms = norms
        self.L = block_lipschitz_constants(A, self.r, norms)
        self.L.flags.writeable = False
        self._set_multipliers(pi)

    def _set_multipliers(self, pi: typing.Optional[Vector]) -> None:
        if pi is None:
            pi = np.zeros(self.A.rows)
        pi = np.array(pi, dtype=float)
        if pi.shape != (self.A.rows,):
            raise BlockStructureError(f"Multipliers of shape {pi.shape}, expected ({self.A.rows},)")
        pi.flags.writeable = False
        self.pi = pi
        if np.any(pi):
            linear = -(self.A.matrix.T @ pi)
            self.effective_psi = [
                psi_i.with_linear(linear[self.partition.slice(i)])
                for i, psi_i in enumerate(self.psi)
            ]
        else:
            self.effective_psi = list(self.psi)
        self.psi_stack = PsiStack(self.partition, self.effective_psi)

    def with_multipliers(self, pi: Vector) -> "CompositeProblem":
        """
        Same problem with new multipliers; L and norms are reused
        """
        problem = CompositeProblem.__new__(CompositeProblem)
        problem.__dict__.update(self.__dict__)
        problem._set_multipliers(pi)
        return problem

    def with_norms(self, norms: BlockNorms) -> "CompositeProblem":
        return CompositeProblem(self.A, self.r, self.psi, self.pi, norms)

    @property
    def b(self) -> Vector:
        return self.A.b

    @property
    def partition(self) -> BlockPartition:
        return self.A.partition

    @property
    def n(self) -> int:
        return self.partition.n

    @functools.cached_property
    def omega(self) -> int:
        return partial_separability_degree(self.A)

    @functools.cached_property
    def penalty(self) -> QuadraticPenalty:
        return QuadraticPenalty(self.A, self.r)

    @property
    def is_smooth(self) -> bool:
        return not self.psi_stack.has_box

    def validate_for_solvers(self) -> None:
        zero = np.flatnonzero(self.L <= 0)
        if len(zero):
            raise ProblemValidationError(
                f"Blocks {zero.tolist()} of A are zero; solvers need every L_i > 0"
            )

    def feasible_start(self) -> BlockVector:
        """
        The origin projected onto the box constraints
        """
        return BlockVector(self.partition, self.psi_stack.project(np.zeros(self.partition.N)))

    def eval_psi(self, x: BlockVector) -> float:
        check_partitions(x.partition, self.partition)
        return self.psi_stack.value(x.data)

    def eval_F(self, x: BlockVector) -> float:
        return eval_f(self, x) + self.eval_psi(x)

    def __repr__(self):
        kinds = sorted({p.kind for p in self.psi})
        return f"CompositeProblem(A={self.A!r}, r={self.r}, psi={kinds})"


def eval_f(p: CompositeProblem, x: BlockVector) -> float:
    """
    f(x) = (r/2)||b - Ax||^2
    """
    rho = residual(p.A, x)
    return 0.5 * p.r * float(rho @ rho)


def grad_f(p: CompositeProblem, x: BlockVector) -> BlockVector:
    """
    f'(x) = r A^T (Ax - b)
    """
    return BlockVector(p.partition, -p.r * (p.A.matrix.T @ residual(p.A, x)))


def multiplier_update(p: CompositeProblem, z: BlockVector) -> Vector:
    """
    pi + r (b - Az)
    """
    return p.pi + p.r * residual(p.A, z)


def feasibility_gap(p: CompositeProblem, x: BlockVector) -> float:
    """
    (1/2)||b - Ax||^2 / b^T b, the quantity behind the f(x) <= eps b^T b stop
    """
    bb = float(p.b @ p.b)
    if bb == 0.0:
        raise ProblemValidationError("Feasibility gap is undefined for b = 0")
    rho = residual(p.A, x)
    return 0.5 * float(rho @ rho) / bb


def prox_gradient_norm(p: CompositeProblem, x: BlockVector) -> float:
    """
    ||x - prox_Psi(x - f'(x))||_inf, zero exactly at minimizers of F
    """
    g = grad_f(p, x).data
    coordinates = np.arange(p.partition.N)
    u = p.psi_stack.prox(coordinates, x.data - g, np.ones(p.partition.N))
    return float(np.abs(x.data - u).max())


def dqa_model(p: CompositeProblem, x: BlockVector, h: BlockVector, form: str = "direct") -> float:
    """
    The separable approximation f^DQA(x + h) in one of three equivalent forms:
    "direct" f(x) + <f'(x), h> + (r/2) sum ||A_i h_i||^2,
    "finite_difference" f(x) + sum [f(x + U_i h_i) - f(x)],
    "hessian" f(x) + sum [<f'(x)_i, h_i> + (1/2)<C_i h_i, h_i>] with C_i = U_i^T f'' U_i.
    """
    fx = eval_f(p, x)
    n = p.n
    if form == "direct":
        g = grad_f(p, x).data
        diagonal = sum(float(np.sum((p.A.block(i) @ h.block(i)) ** 2)) for i in range(n))
        return fx + float(g @ h.data) + 0.5 * p.r * diagonal
    if form == "finite_difference":
        total = fx
        for i in range(n):
            shifted = x.data.copy()
            shifted[p.partition.slice(i)] += h.block(i)
            total += p.penalty.value(shifted) - fx
        return total
    if form == "hessian":
        g = grad_f(p, x)
        total = fx
        for i in range(n):
            C_i = p.penalty.block_hessian(x.data, i)
            total += float(g.block(i) @ h.block(i)) + 0.5 * float(h.block(i) @ (C_i @ h.block(i)))
        return total
    raise ValueError(f"Unknown approximation form {form}")


def h_model(p: CompositeProblem, beta: float, w: Vector, x: BlockVector, h: BlockVector) -> float:
    """
    H_{beta,w}(x + h) = f(x) + <f'(x), h> + (beta/2)||h||_w^2 + Psi(x + h)
    """
    g = grad_f(p, x).data
    squared = sum(w[i] * p.norms.block_quadratic(i, h.block(i)) for i in range(p.n))
    return eval_f(p, x) + float(g @ h.data) + 0.5 * beta * squared + p.eval_psi(x + h)


def eso_model(p: CompositeProblem, beta: float, w: Vector, tau: int, x: BlockVector, h: BlockVector) -> float:
    """
    F^ESO(x + h) = (1 - tau/n) F(x) + (tau/n) H_{beta,w}(x + h)
    """
    alpha = tau / p.n
    return (1 - alpha) * p.eval_F(x) + alpha * h_model(p, beta, w, x, h)


def _hessian_f(p: CompositeProblem) -> scipy.sparse.csc_matrix:
    return (p.r * (p.A.matrix.T @ p.A.matrix)).tocsc()


def _weight_matrix(p: CompositeProblem, w: Vector) -> scipy.sparse.csc_matrix:
    blocks = [
        scipy.sparse.identity(len(B_i)) * w_i if identity else scipy.sparse.csc_matrix(w_i * B_i)
        for B_i, w_i, identity in zip(p.norms.B, w, p.norms.identity)
    ]
    return scipy.sparse.block_diag(blocks, format="csc")


def smallest_generalized_eigenvalue(
    H: scipy.sparse.spmatrix,
    D: scipy.sparse.spmatrix,
    tol: float = EIGEN_TOL,
    dense_limit: int = DENSE_EIGEN_LIMIT,
) -> float:
    """
    Smallest lambda with H v = lambda D v, H symmetric PSD, D SPD.
    Dense LAPACK up to dense_limit coordinates, ARPACK in shift-invert mode
    around a small negative shift beyond that. Values below 1e-10 of
    trace(H) / trace(D) are reported as 0.
    :param tol: relative accuracy asked of ARPACK
    :param dense_limit: largest N solved densely
    """
    N = H.shape[0]
    scale = float(H.diagonal().sum() / D.diagonal().sum())
    if scale == 0.0:
        return 0.0
    try:
        if N <= dense_limit:
            (lam,) = scipy.linalg.eigh(
                H.toarray(), D.toarray(), eigvals_only=True, subset_by_index=[0, 0]
            )
        else:
            (lam,) = scipy.sparse.linalg.eigsh(
                H.tocsc(), k=1, M=D.tocsc(), sigma=-EIGEN_SHIFT * scale, which="LM",
                tol=tol, return_eigenvectors=False,
            )
    except scipy.sparse.linalg.ArpackNoConvergence as e:
        raise ConvergenceError(f"Generalized eigenvalue did not converge: {e}")
    except (np.linalg.LinAlgError, RuntimeError) as e:
        raise ConvergenceError(f"Generalized eigenvalue computation failed: {e}")
    lam = float(lam)
    logger.debug("Smallest generalized eigenvalue %g (N=%i, scale %g)", lam, N, scale)
    if lam < ZERO_EIGEN_TOL * scale:
        return 0.0
    return lam


def strong_convexity_constants(p: CompositeProblem, w: typing.Optional[Vector] = None) -> StrongConvexityInfo:
    """
    mu_f(w), mu_Psi(w) and mu_F(w) with respect to ||.||_w. Box indicators
    contribute nothing; such results are marked conservative.
    :param p: problem
    :param w: weights, all ones when omitted
    """
    if w is None:
        w = np.ones(p.n)
    w = np.asarray(w, dtype=float)
    if w.shape != (p.n,) or np.any(w <= 0):
        raise ProblemValidationError("Weights must be n positive numbers")

    D = _weight_matrix(p, w)
    H_f = _hessian_f(p)
    mu_blocks = np.array([psi_i.mu for psi_i in p.effective_psi])
    mu_f = smallest_generalized_eigenvalue(H_f, D)
    mu_psi = float(
        min(mu_blocks[i] / (w[i] * p.norms.lambda_max(i)) for i in range(p.n))
    )
    H_F = (H_f + scipy.sparse.diags(p.partition.expand(mu_blocks))).tocsc()
    mu_F = smallest_generalized_eigenvalue(H_F, D) if np.any(mu_blocks) else mu_f

    conservative = p.psi_stack.has_box
    if conservative:
        logger.warning("Box constraints ignored in strong convexity constants; rates are conservative")
    return StrongConvexityInfo(mu_F, mu_f, mu_psi, w, conservative)


def reference_optimum(p: CompositeProblem, max_iters: int = 200000) -> typing.Tuple[BlockVector, float]:
    """
    Certified minimizer of F.
    Smooth terms: conjugate gradient on (r A^T A + Diag(mu)) x = r A^T b - c.
    Box terms: fully parallel PCDM until the prox-gradient norm is below 1e-10.
    :param p: problem
    :param max_iters: iteration cap of the box path
    :return: (x*, F*)
    """
    if p.is_smooth:
        return _smooth_optimum(p)
    return _box_optimum(p, max_iters)


def _smooth_optimum(p: CompositeProblem) -> typing.Tuple[BlockVector, float]:
    mu = p.psi_stack.mu
    H = (_hessian_f(p) + scipy.sparse.diags(mu)).tocsc()
    identity = scipy.sparse.identity(p.partition.N, format="csc")
    if smallest_generalized_eigenvalue(H, identity) <= 0.0:
        raise CertificationError(
            "reference optimum not certified: F is not strongly convex and A is rank deficient"
        )
    rhs = p.r * (p.A.matrix.T @ p.b) - p.psi_stack.c
    solution, info = scipy.sparse.linalg.cg(
        H, rhs, rtol=REFERENCE_CG_TOL, atol=0.0, maxiter=10 * p.partition.N + 100
    )
    stationarity = float(np.linalg.norm(H @ solution - rhs))
    if stationarity > REFERENCE_RESIDUAL_TOL * max(1.0, float(np.linalg.norm(rhs))):
        raise CertificationError(
            f"reference optimum not certified: stationarity residual {stationarity:g} (cg info {info})"
        )
    x_star = BlockVector(p.partition, solution)
    logger.info("Reference optimum by CG, stationarity residual %g", stationarity)
    return x_star, p.eval_F(x_star)


def _box_optimum(p: CompositeProblem, max_iters: int) -> typing.Tuple[BlockVector, float]:
    from blockopt import solvers

    x = p.feasible_start()
    for iteration in range(max_iters):
        x = solvers.pcdm_full_step(p, x, p.omega)
        if iteration % 10 == 0 and prox_gradient_norm(p, x) < REFERENCE_STATIONARITY_TOL:
            logger.info("Reference optimum by fully parallel PCDM after %i steps", iteration + 1)
            return x, p.eval_F(x)
    raise CertificationError(
        f"reference optimum not certified: prox-gradient norm {prox_gradient_norm(p, x):g} after {max_iters} steps"
    )
