import dataclasses
import logging
import typing

import numpy as np
import scipy.sparse

from blockopt.blockstruct import BlockMatrix, BlockPartition
from blockopt.errors import ProblemValidationError
from blockopt.types import Vector

logger = logging.getLogger(__name__)

FAMILIES = ("block_angular", "bounded_row")
RHS_MODES = ("feasible", "random")


def normalize_family(family: str) -> str:
    family = family.strip().lower().replace("-", "_")
    if family == "bounded_row_nnz":
        family = "bounded_row"
    if family not in FAMILIES:
        raise ProblemValidationError(f"Unknown problem family {family}; choose from {FAMILIES}")
    return family


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    """
    Recipe for one random instance.
    block_angular: n diagonal blocks C_i of block_rows x block_cols with density
    c_density, stacked over linking_rows rows [D_1 ... D_n] of which exactly
    omega D_i are nonzero (none when omega = 1).
    bounded_row: m rows, each touching between 1 and omega of the n blocks of
    width block_cols; row 0 touches exactly omega.
    """

    family: str = "block_angular"
    n: int = 20
    omega: int = 2
    seed: int = 0
    block_rows: int = 15
    block_cols: int = 10
    c_density: float = 0.1
    d_density: float = 1.0
    linking_rows: int = 1
    m: int = 2000
    rhs: str = "feasible"

    def __post_init__(self):
        object.__setattr__(self, "family", normalize_family(self.family))
        if self.n < 1:
            raise ProblemValidationError(f"Need at least one block, got n={self.n}")
        if not 1 <= self.omega <= self.n:
            raise ProblemValidationError(f"omega must lie in [1, {self.n}], got {self.omega}")
        if self.block_cols < 1:
            raise ProblemValidationError(f"Block width must be positive, got {self.block_cols}")
        if self.rhs not in RHS_MODES:
            raise ProblemValidationError(f"Unknown right-hand side mode {self.rhs}; choose from {RHS_MODES}")
        if self.family == "block_angular":
            if self.block_rows < self.block_cols:
                raise ProblemValidationError(
                    f"C blocks of {self.block_rows}x{self.block_cols} cannot have full column rank"
                )
            if not 0 < self.c_density <= 1 or not 0 < self.d_density <= 1:
                raise ProblemValidationError("Densities must lie in (0, 1]")
            if self.linking_rows < 1:
                raise ProblemValidationError(f"Need at least one linking row, got {self.linking_rows}")
        elif self.m * self.omega < self.n:
            raise ProblemValidationError(
                f"{self.m} rows touching at most {self.omega} blocks cannot cover {self.n} blocks"
            )

    def replace(self, **changes) -> "GeneratorSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return dataclasses.asdict(self)

    @property
    def partition(self) -> BlockPartition:
        return BlockPartition.uniform(self.n, self.block_cols)


def _values(stream: np.random.Generator, size) -> np.ndarray:
    """
    Uniform on [-1, 1] with exact zeros moved to 1 so the sparsity pattern is kept
    """
    values = stream.uniform(-1.0, 1.0, size)
    values[values == 0.0] = 1.0
    return values


def _rhs(spec: GeneratorSpec, stream: np.random.Generator, matrix: scipy.sparse.csc_matrix) -> Vector:
    if spec.rhs == "feasible":
        x_true = stream.standard_normal(matrix.shape[1])
        return matrix @ x_true
    return stream.standard_normal(matrix.shape[0])


def gen_block_angular(spec: GeneratorSpec) -> typing.Tuple[BlockMatrix, Vector]:
    """
    Primal block angular matrix
        [C_1            ]
        [     ...       ]
        [           C_n ]
        [D_1  ...   D_n ]
    Each C_i gets a random nonzero diagonal on top of its random fill so that
    C_i^T C_i is positive definite. The first linking row holds a nonzero in
    every active D_i, which pins the degree of separability to omega.
    """
    if spec.family != "block_angular":
        raise ProblemValidationError(f"Expected a block_angular spec, got {spec.family}")
    stream = np.random.Generator(np.random.Philox(spec.seed))
    rows, cols, vals = [], [], []
    height, width = spec.block_rows, spec.block_cols

    for i in range(spec.n):
        mask = stream.random((height, width)) < spec.c_density
        mask[np.arange(width), np.arange(width)] = True
        r, c = np.nonzero(mask)
        v = _values(stream, len(r))
        spine = r == c
        v[spine] = np.sign(v[spine]) * (1.0 + np.abs(v[spine]))
        rows.append(r + i * height)
        cols.append(c + i * width)
        vals.append(v)

    first_linking = spec.n * height
    active = np.sort(stream.choice(spec.n, size=spec.omega, replace=False)) if spec.omega > 1 else []
    for i in active:
        mask = stream.random((spec.linking_rows, width)) < spec.d_density
        mask[0, stream.integers(width)] = True
        r, c = np.nonzero(mask)
        rows.append(r + first_linking)
        cols.append(c + i * width)
        vals.append(_values(stream, len(r)))

    shape = (first_linking + spec.linking_rows, spec.n * width)
    matrix = scipy.sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )
    b = _rhs(spec, stream, matrix)
    logger.info(
        "Generated block angular %ix%i matrix, %i nonzeros, %i active linking blocks",
        shape[0],
        shape[1],
        matrix.nnz,
        len(active),
    )
    return BlockMatrix(matrix, spec.partition, b), b


def gen_bounded_row(spec: GeneratorSpec) -> typing.Tuple[BlockMatrix, Vector]:
    """
    Sparse matrix with at most omega blocks per row. Each row draws a count
    k in 1..omega and k distinct blocks, one column in each; row 0 has k = omega.
    Blocks no row has reached yet are preferred so that every block is nonzero.
    """
    if spec.family != "bounded_row":
        raise ProblemValidationError(f"Expected a bounded_row spec, got {spec.family}")
    stream = np.random.Generator(np.random.Philox(spec.seed))
    n, omega, width = spec.n, spec.omega, spec.block_cols
    uncovered = list(stream.permutation(n))
    chosen_rows = []

    for j in range(spec.m):
        k = omega if j == 0 else int(stream.integers(1, omega + 1))
        fresh = [uncovered.pop() for _ in range(min(k, len(uncovered)))]
        if len(fresh) < k:
            candidates = np.setdiff1d(np.arange(n), fresh)
            fresh += stream.choice(candidates, size=k - len(fresh), replace=False).tolist()
        chosen_rows.append(sorted(int(i) for i in fresh))

    if uncovered:
        raise ProblemValidationError(f"{len(uncovered)} blocks left uncovered by {spec.m} rows")

    rows = np.repeat(np.arange(spec.m), [len(blocks) for blocks in chosen_rows])
    blocks = np.concatenate([np.asarray(blocks, dtype=np.int64) for blocks in chosen_rows])
    offsets = stream.integers(width, size=len(blocks)) if width > 1 else np.zeros(len(blocks), dtype=np.int64)
    cols = blocks * width + offsets
    vals = _values(stream, len(rows))
    matrix = scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(spec.m, n * width))
    b = _rhs(spec, stream, matrix)
    logger.info("Generated bounded-row %ix%i matrix, %i nonzeros, omega %i", spec.m, n * width, matrix.nnz, omega)
    return BlockMatrix(matrix, spec.partition, b), b


GENERATORS = {
    "block_angular": gen_block_angular,
    "bounded_row": gen_bounded_row,
}


def generate(spec: GeneratorSpec) -> typing.Tuple[BlockMatrix, Vector]:
    return GENERATORS[spec.family](spec)
