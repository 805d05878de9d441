import typing

import numpy as np
import scipy.sparse

from blockopt.blockstruct import BlockMatrix, BlockPartition
from blockopt.problem import LinearBoxPsi, LinearQuadraticPsi, ZeroPsi


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def random_matrix(seed: int, m: int, sizes: typing.Sequence[int], density: float = 0.5) -> BlockMatrix:
    """
    Random sparse matrix with every column nonzero and b = A x_true
    """
    stream = philox(seed)
    partition = BlockPartition(sizes)
    N = partition.N
    dense = stream.uniform(-1.0, 1.0, (m, N)) * (stream.random((m, N)) < density)
    for col in range(N):
        if not np.any(dense[:, col]):
            dense[int(stream.integers(m)), col] = 1.0
    b = dense @ stream.standard_normal(N)
    return BlockMatrix(scipy.sparse.csc_matrix(dense), partition, b)


def make_psi(kind: str, sizes: typing.Sequence[int], seed: int = 0, mu: float = 1.0):
    stream = philox(seed + 7)
    psi = []
    for size in sizes:
        if kind == "zero":
            psi.append(ZeroPsi(size))
        elif kind == "quadratic":
            psi.append(LinearQuadraticPsi(stream.uniform(-1, 1, size), mu))
        elif kind == "box":
            psi.append(LinearBoxPsi(stream.uniform(-0.5, 0.5, size), -np.ones(size), np.ones(size)))
        else:
            raise ValueError(kind)
    return psi
