import collections
import json
import logging
import typing

import numpy as np

from blockopt.blockstruct import BlockMatrix, BlockVector
from blockopt.errors import ProblemValidationError

logger = logging.getLogger(__name__)


class SeparabilityReport:
    def __init__(self, omega: int, omega_R: int, per_row: np.ndarray):
        self.omega = int(omega)
        self.omega_R = int(omega_R)
        self.per_row = per_row

    def histogram(self) -> typing.Dict[int, int]:
        """
        {number of blocks touched: number of rows}
        """
        counts = collections.Counter(int(c) for c in self.per_row)
        return dict(sorted(counts.items()))

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {
            "omega": self.omega,
            "omega_R": self.omega_R,
            "per_row_histogram": {str(k): v for k, v in self.histogram().items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __repr__(self):
        return f"SeparabilityReport(omega={self.omega}, omega_R={self.omega_R})"


class RowSummand:
    """
    One summand (r/2)(b_j - sum_{i in J_j} A_ji x^(i))^2 of the row decomposition of f
    """

    def __init__(self, row: int, blocks: np.ndarray, columns: np.ndarray, values: np.ndarray, rhs: float, r: float):
        self.row = row
        self.blocks = blocks
        self.columns = columns
        self.values = values
        self.rhs = rhs
        self.r = r

    def __call__(self, x: typing.Union[BlockVector, np.ndarray]) -> float:
        data = x.data if isinstance(x, BlockVector) else x
        return 0.5 * self.r * (self.rhs - float(self.values @ data[self.columns])) ** 2


def _touched_pairs(A: BlockMatrix) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Distinct (row, block) pairs with a nonzero entry
    """
    if A.nnz == 0:
        raise ProblemValidationError("A is identically zero, f is constant and omega is undefined")
    coo = A.matrix.tocoo()
    blocks = A.partition.block_of_column(coo.col)
    pairs = np.unique(np.stack([coo.row, blocks], axis=1), axis=0)
    return pairs[:, 0], pairs[:, 1]


def row_degrees(A: BlockMatrix) -> np.ndarray:
    """
    omega_j = |{i : A_ji != 0}| for every row j
    """
    rows, _ = _touched_pairs(A)
    return np.bincount(rows, minlength=A.rows)


def partial_separability_degree(A: BlockMatrix) -> int:
    """
    Degree of partial separability of f(x) = (r/2)||b - Ax||^2: the largest
    number of blocks any single row of A touches.
    """
    return int(row_degrees(A).max())


def indicator_columns(A: BlockMatrix) -> typing.List[typing.List[int]]:
    """
    For each block i, the row positions of the ones in E^i: column u of E^i
    marks the u-th nonzero row of A_i.
    """
    if A.nnz == 0:
        raise ProblemValidationError("A is identically zero, f is constant and omega is undefined")
    columns = []
    for i in range(A.partition.n):
        block = A.block(i)
        columns.append(sorted(set(block.indices.tolist())))
    return columns


def ruszczynski_degree(A: BlockMatrix) -> int:
    """
    Number of neighbours omega_R by brute force: for every (i, u) count the
    pairs (i', u') with i' != i whose indicator columns overlap.
    Quadratic in the number of nonzero block rows, meant as a test oracle.
    """
    E = indicator_columns(A)
    items = [(i, u, row) for i, rows in enumerate(E) for u, row in enumerate(rows)]
    best = 0
    for i, u, row in items:
        neighbours = sum(
            1 for i_other, _, row_other in items if i_other != i and row_other == row
        )
        best = max(best, neighbours)
    return best


def separability_report(A: BlockMatrix, brute_force: bool = True) -> SeparabilityReport:
    """
    :param A: block matrix
    :param brute_force: compute omega_R by enumeration rather than as omega - 1
    """
    per_row = row_degrees(A)
    omega = int(per_row.max())
    omega_R = ruszczynski_degree(A) if brute_force else omega - 1
    if omega_R != omega - 1:
        logger.warning("Separability measures disagree: omega=%i, omega_R=%i", omega, omega_R)
    return SeparabilityReport(omega, omega_R, per_row)


def decompose_rows(A: BlockMatrix, r: float) -> typing.List[RowSummand]:
    """
    The partially separable row decomposition
    f(x) = (r/2) sum_j (b_j - sum_i A_ji x^(i))^2, one summand per row.
    Rows without nonzeros contribute the constant (r/2) b_j^2.
    """
    if A.nnz == 0:
        raise ProblemValidationError("A is identically zero, f is constant and omega is undefined")
    csr = A.matrix.tocsr()
    summands = []
    for j in range(A.rows):
        start, stop = csr.indptr[j], csr.indptr[j + 1]
        columns = csr.indices[start:stop]
        summands.append(
            RowSummand(
                row=j,
                blocks=np.unique(A.partition.block_of_column(columns)),
                columns=columns,
                values=csr.data[start:stop],
                rhs=float(A.b[j]),
                r=r,
            )
        )
    return summands


def mulvey_cross_products(A: BlockMatrix, x: BlockVector, y: BlockVector) -> float:
    """
    sum_{i != j} of the linearized cross products
    <A_i y_i, A_j x_j> + <A_i x_i, A_j y_j> - <A_i x_i, A_j x_j>
    which stand in for <A_i y_i, A_j y_j> in the separable approximation.
    """
    n = A.partition.n
    Ax = [A.block(i) @ x.block(i) for i in range(n)]
    Ay = [A.block(i) @ y.block(i) for i in range(n)]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            total += Ay[i] @ Ax[j] + Ax[i] @ Ay[j] - Ax[i] @ Ax[j]
    return float(total)
