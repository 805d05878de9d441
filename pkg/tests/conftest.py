import typing

import numpy as np
import pytest

from blockopt.blockstruct import BlockMatrix, BlockPartition
from blockopt.problem import CompositeProblem
from helpers import make_psi, philox, random_matrix


@pytest.fixture
def stream() -> np.random.Generator:
    return philox(1234)


@pytest.fixture
def make_problem():
    def _make(
        seed: int = 0,
        m: int = 12,
        sizes: typing.Sequence[int] = (1,) * 6,
        density: float = 0.5,
        psi: str = "zero",
        r: float = 1.0,
        mu: float = 1.0,
    ) -> CompositeProblem:
        A = random_matrix(seed, m, sizes, density)
        return CompositeProblem(A, r=r, psi=make_psi(psi, sizes, seed, mu))

    return _make


@pytest.fixture
def toy_problem() -> CompositeProblem:
    """
    A = [[1, 1]], b = [1], r = 1, two scalar blocks
    """
    A = BlockMatrix(np.array([[1.0, 1.0]]), BlockPartition([1, 1]), np.array([1.0]))
    return CompositeProblem(A)


@pytest.fixture
def make_matrix():
    return random_matrix
