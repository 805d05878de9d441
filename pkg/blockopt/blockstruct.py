import logging
import typing

import numpy as np
import scipy.linalg
import scipy.sparse

from blockopt.errors import BlockStructureError, ProblemValidationError
from blockopt.types import BlockSelection, IndexSet, Vector

logger = logging.getLogger(__name__)

POWER_ITERATION_TOL = 1e-10
SYMMETRY_TOL = 1e-12
SPD_EIGENVALUE_FLOOR = 1e-12


class BlockPartition:
    """
    Column partition of R^N into n consecutive blocks of sizes N_1..N_n.
    The embeddings U_i are never materialized, only the offsets.
    """

    def __init__(self, sizes: typing.Sequence[int]):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or len(sizes) == 0:
            raise BlockStructureError("A partition needs at least one block")
        if np.any(sizes <= 0):
            raise BlockStructureError(f"Block sizes must be positive, got {sizes.tolist()}")
        self.sizes = sizes
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.sizes.flags.writeable = False
        self.offsets.flags.writeable = False

    @classmethod
    def uniform(cls, n: int, size: int = 1) -> "BlockPartition":
        return cls([size] * n)

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def N(self) -> int:
        return int(self.offsets[-1])

    @property
    def is_scalar(self) -> bool:
        return bool(np.all(self.sizes == 1))

    def check_index(self, i: int) -> int:
        if not 0 <= i < self.n:
            raise BlockStructureError(f"Block index {i} out of range for {self.n} blocks")
        return int(i)

    def slice(self, i: int) -> slice:
        i = self.check_index(i)
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def indices(self, blocks: BlockSelection) -> np.ndarray:
        """
        Coordinate indices covered by a set of blocks, in block order
        :param blocks: block indices
        :return: int array of coordinates
        """
        blocks = np.asarray(blocks, dtype=np.int64)
        if self.is_scalar:
            return blocks
        if len(blocks) == 0:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(
            [np.arange(self.offsets[i], self.offsets[i + 1]) for i in blocks]
        )

    def block_of_column(self, columns: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.offsets, columns, side="right") - 1

    def expand(self, per_block: np.ndarray) -> np.ndarray:
        """
        Repeats one value per block over the block's coordinates
        """
        return np.repeat(np.asarray(per_block, dtype=float), self.sizes)

    def __eq__(self, other) -> bool:
        return isinstance(other, BlockPartition) and np.array_equal(
            self.sizes, other.sizes
        )

    def __hash__(self):
        return hash(tuple(self.sizes.tolist()))

    def __repr__(self):
        return f"BlockPartition(n={self.n}, N={self.N})"


class BlockVector:
    """
    A vector of R^N viewed as the stack of its blocks x^(1)..x^(n)
    """

    def __init__(self, partition: BlockPartition, data: Vector):
        data = np.array(data, dtype=float)
        if data.shape != (partition.N,):
            raise BlockStructureError(
                f"Vector of shape {data.shape} does not match partition with N={partition.N}"
            )
        data.flags.writeable = False
        self.partition = partition
        self.data = data

    @classmethod
    def zeros(cls, partition: BlockPartition) -> "BlockVector":
        return cls(partition, np.zeros(partition.N))

    def block(self, i: int) -> Vector:
        return self.data[self.partition.slice(i)]

    def blocks(self) -> typing.List[Vector]:
        return [self.block(i) for i in range(self.partition.n)]

    def with_blocks(self, blocks: BlockSelection, values: Vector) -> "BlockVector":
        """
        New vector equal to this one except on the given blocks
        :param blocks: block indices to replace
        :param values: stacked replacement values, in block order
        """
        data = self.data.copy()
        data[self.partition.indices(blocks)] = values
        return BlockVector(self.partition, data)

    def __add__(self, other: "BlockVector") -> "BlockVector":
        check_partitions(self.partition, other.partition)
        return BlockVector(self.partition, self.data + other.data)

    def __sub__(self, other: "BlockVector") -> "BlockVector":
        check_partitions(self.partition, other.partition)
        return BlockVector(self.partition, self.data - other.data)

    def __mul__(self, scalar: float) -> "BlockVector":
        return BlockVector(self.partition, self.data * scalar)

    __rmul__ = __mul__

    def __len__(self):
        return self.partition.N

    def __repr__(self):
        return f"BlockVector(n={self.partition.n}, N={self.partition.N})"


class BlockMatrix:
    """
    Sparse m x N matrix with a column-block partition. Column blocks A_i = A U_i
    are extracted once at construction and kept in CSC form.
    """

    def __init__(
        self,
        matrix: typing.Union[scipy.sparse.spmatrix, np.ndarray],
        partition: BlockPartition,
        b: typing.Optional[Vector] = None,
    ):
        self._logger = logging.getLogger(__name__)
        matrix = scipy.sparse.csc_matrix(matrix, dtype=float)
        matrix.eliminate_zeros()
        matrix.sort_indices()
        if matrix.shape[1] != partition.N:
            raise BlockStructureError(
                f"Matrix has {matrix.shape[1]} columns, partition expects {partition.N}"
            )
        if b is None:
            b = np.zeros(matrix.shape[0])
        b = np.array(b, dtype=float)
        if b.shape != (matrix.shape[0],):
            raise BlockStructureError(
                f"Right-hand side of shape {b.shape} does not match {matrix.shape[0]} rows"
            )
        b.flags.writeable = False
        self.matrix = matrix
        self.partition = partition
        self.b = b
        self._blocks = [
            matrix[:, partition.slice(i)].tocsc() for i in range(partition.n)
        ]
        self._logger.debug(
            "Built %ix%i block matrix with %i blocks and %i nonzeros",
            self.rows,
            partition.N,
            partition.n,
            matrix.nnz,
        )

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def shape(self) -> typing.Tuple[int, int]:
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def block(self, i: int) -> scipy.sparse.csc_matrix:
        return self._blocks[self.partition.check_index(i)]

    def columns(self, blocks: BlockSelection) -> scipy.sparse.csc_matrix:
        """
        Column submatrix for several blocks at once, in block order
        """
        return self.matrix[:, self.partition.indices(blocks)]

    def gram(self, i: int) -> np.ndarray:
        """
        Dense A_i^T A_i
        """
        block = self.block(i)
        return np.asarray((block.T @ block).todense())

    def with_rhs(self, b: Vector) -> "BlockMatrix":
        return BlockMatrix(self.matrix, self.partition, b)

    def __repr__(self):
        return f"BlockMatrix(m={self.rows}, N={self.partition.N}, n={self.partition.n}, nnz={self.nnz})"


class BlockNorms:
    """
    Block norms ||t||_(i) = <B_i t, t>^(1/2) together with the weights w of
    the separable norm ||x||_w.
    """

    def __init__(
        self,
        partition: BlockPartition,
        B: typing.Optional[typing.Sequence[np.ndarray]] = None,
        w: typing.Optional[Vector] = None,
    ):
        self.partition = partition
        if w is None:
            w = np.ones(partition.n)
        w = np.array(w, dtype=float)
        if w.shape != (partition.n,) or np.any(w <= 0):
            raise ProblemValidationError("Norm weights must be n positive numbers")
        w.flags.writeable = False
        self.w = w

        if B is None:
            self.B = [np.eye(int(size)) for size in partition.sizes]
            self.identity = [True] * partition.n
            self._cholesky = [None] * partition.n
            return

        if len(B) != partition.n:
            raise BlockStructureError(f"Expected {partition.n} norm matrices, got {len(B)}")
        self.B = []
        self.identity = []
        self._cholesky = []
        for i, B_i in enumerate(B):
            B_i = np.atleast_2d(np.array(B_i, dtype=float))
            size = int(partition.sizes[i])
            if B_i.shape != (size, size):
                raise BlockStructureError(
                    f"B_{i} has shape {B_i.shape}, block has size {size}"
                )
            scale = max(1.0, np.abs(B_i).max())
            if np.abs(B_i - B_i.T).max() > SYMMETRY_TOL * scale:
                raise ProblemValidationError(f"B_{i} is not symmetric")
            try:
                factor = scipy.linalg.cholesky(B_i, lower=True)
            except np.linalg.LinAlgError:
                raise ProblemValidationError(f"B_{i} is not positive definite")
            self.B.append(B_i)
            self.identity.append(bool(np.array_equal(B_i, np.eye(size))))
            self._cholesky.append(factor)

    @classmethod
    def identity_norms(cls, partition: BlockPartition, w: typing.Optional[Vector] = None):
        return cls(partition, None, w)

    @classmethod
    def curvature(cls, A: BlockMatrix, r: float, w: typing.Optional[Vector] = None):
        """
        The B_i = r A_i^T A_i choice, under which every L_i equals 1.
        Only valid when each A_i^T A_i is positive definite.
        :param A: block matrix
        :param r: penalty parameter
        :param w: optional weights
        """
        B = []
        for i in range(A.partition.n):
            B_i = r * A.gram(i)
            lam_min = smallest_eigenvalue(B_i)
            if lam_min <= SPD_EIGENVALUE_FLOOR:
                raise ProblemValidationError(
                    f"r A_{i}^T A_{i} is not positive definite (smallest eigenvalue {lam_min:g})"
                )
            B.append(B_i)
        return cls(A.partition, B, w)

    @property
    def all_identity(self) -> bool:
        return all(self.identity)

    def cholesky(self, i: int) -> typing.Optional[np.ndarray]:
        """
        Lower Cholesky factor of B_i, None when B_i is the identity
        """
        return self._cholesky[i]

    def block_quadratic(self, i: int, h: Vector) -> float:
        if self.identity[i]:
            return float(h @ h)
        return float(h @ (self.B[i] @ h))

    def lambda_max(self, i: int) -> float:
        if self.identity[i]:
            return 1.0
        return power_iteration(self.B[i])


def check_partitions(first: BlockPartition, second: BlockPartition) -> None:
    if first != second:
        raise BlockStructureError(f"Partition mismatch: {first} vs {second}")


def power_iteration(
    M: np.ndarray, tol: float = POWER_ITERATION_TOL, max_iter: typing.Optional[int] = None
) -> float:
    """
    Largest eigenvalue of a symmetric positive semidefinite matrix.
    Starts from the normalized all-ones vector; when that start is
    orthogonal to the range of M a fixed Philox(0) vector is used instead.
    :param M: dense symmetric PSD matrix
    :param tol: stop once ||M v - lambda v|| <= tol lambda
    :param max_iter: iteration cap, defaults to max(10 dim, 1000)
    :return: estimate of lambda_max
    """
    dim = M.shape[0]
    if max_iter is None:
        max_iter = max(10 * dim, 1000)
    if not np.any(M):
        return 0.0

    start = np.ones(dim)
    if np.linalg.norm(M @ start) <= 1e-14 * np.abs(M).sum():
        start = np.random.Generator(np.random.Philox(0)).standard_normal(dim)
    v = start / np.linalg.norm(start)

    lam = 0.0
    for iteration in range(max_iter):
        y = M @ v
        lam = float(v @ y)
        if np.linalg.norm(y - lam * v) <= tol * abs(lam):
            logger.debug("Power iteration converged after %i steps", iteration + 1)
            return lam
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        v = y / norm
    logger.debug("Power iteration hit the %i step cap", max_iter)
    return lam


def smallest_eigenvalue(M: np.ndarray) -> float:
    """
    Smallest eigenvalue of a symmetric matrix.
    Returns 0 when M has no Cholesky factorization (not positive definite).
    """
    try:
        scipy.linalg.cho_factor(M)
    except np.linalg.LinAlgError:
        return 0.0
    (lam,) = scipy.linalg.eigvalsh(M, subset_by_index=[0, 0])
    return max(float(lam), 0.0)


def weighted_norm(x: BlockVector, norms: BlockNorms) -> float:
    """
    ||x||_w = (sum_i w_i <B_i x^(i), x^(i)>)^(1/2)
    """
    check_partitions(x.partition, norms.partition)
    if norms.all_identity:
        squares = np.add.reduceat(x.data**2, x.partition.offsets[:-1])
        return float(np.sqrt(np.dot(norms.w, squares)))
    total = sum(
        norms.w[i] * norms.block_quadratic(i, x.block(i)) for i in range(x.partition.n)
    )
    return float(np.sqrt(total))


def block_lipschitz_constants(A: BlockMatrix, r: float, norms: typing.Optional[BlockNorms] = None) -> np.ndarray:
    """
    L_i = largest eigenvalue of r A_i^T A_i measured against B_i,
    i.e. r ||A_i^T A_i|| when B_i is the identity.
    Zero blocks get L_i = 0 and are flagged in the log.
    :param A: block matrix
    :param r: penalty parameter, positive
    :param norms: block norms, identity when omitted
    :return: array of n constants
    """
    if r <= 0:
        raise ProblemValidationError(f"Penalty parameter must be positive, got {r}")
    if norms is None:
        norms = BlockNorms.identity_norms(A.partition)
    check_partitions(A.partition, norms.partition)

    L = np.zeros(A.partition.n)
    for i in range(A.partition.n):
        block = A.block(i)
        if block.nnz == 0:
            logger.warning("Block %i of A is zero, its Lipschitz constant is 0", i)
            continue
        if block.shape[1] == 1 and norms.identity[i]:
            L[i] = r * float(block.data @ block.data)
            continue
        M = r * A.gram(i)
        factor = norms.cholesky(i)
        if factor is not None:
            M = scipy.linalg.solve_triangular(factor, M, lower=True)
            M = scipy.linalg.solve_triangular(factor, M.T, lower=True)
            M = 0.5 * (M + M.T)
        L[i] = power_iteration(M)
    return L


def residual(A: BlockMatrix, x: typing.Union[BlockVector, Vector]) -> Vector:
    """
    b - A x
    """
    data = x.data if isinstance(x, BlockVector) else np.asarray(x, dtype=float)
    if data.shape != (A.partition.N,):
        raise BlockStructureError(
            f"Vector of shape {data.shape} does not match {A.partition.N} columns"
        )
    return A.b - A.matrix @ data


def reassemble(blocks: typing.Sequence[scipy.sparse.spmatrix]) -> scipy.sparse.csc_matrix:
    """
    Horizontal concatenation of column blocks
    """
    return scipy.sparse.hstack(blocks, format="csc")


def selection(blocks: BlockSelection) -> IndexSet:
    return np.unique(np.asarray(blocks, dtype=np.int64))
