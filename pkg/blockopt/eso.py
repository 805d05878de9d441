import dataclasses
import itertools
import logging
import math
import typing

import numpy as np

from blockopt.blockstruct import BlockVector
from blockopt.errors import EnumerationBudgetError, ProblemValidationError
from blockopt.problem import CompositeProblem, eval_f, grad_f

logger = logging.getLogger(__name__)

MAX_ENUMERATION_BLOCKS = 12
MAX_ENUMERATION_SUBSETS = 100000
ESO_TOL = 1e-10
PSI_IDENTITY_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class EsoParams:
    beta: float
    w: np.ndarray
    tau: int
    omega: int
    n: int

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {
            "beta": self.beta,
            "w": self.w.tolist(),
            "tau": self.tau,
            "omega": self.omega,
            "n": self.n,
        }


def beta_nice(omega: int, tau: int, n: int) -> float:
    """
    beta = 1 + (omega - 1)(tau - 1) / max(1, n - 1)
    """
    return 1.0 + (omega - 1) * (tau - 1) / max(1, n - 1)


def eso_params(omega: int, tau: int, n: int, L: typing.Sequence[float]) -> EsoParams:
    """
    ESO parameters of a partially separable f under tau-nice sampling: beta and w = L.
    :param omega: degree of partial separability
    :param tau: sampling size
    :param n: number of blocks
    :param L: block Lipschitz constants
    """
    L = np.array(L, dtype=float)
    if not 1 <= omega <= n:
        raise ProblemValidationError(f"omega must lie in [1, {n}], got {omega}")
    if not 1 <= tau <= n:
        raise ProblemValidationError(f"tau must lie in [1, {n}], got {tau}")
    if L.shape != (n,) or np.any(L <= 0):
        raise ProblemValidationError("Need n positive block Lipschitz constants")
    L.flags.writeable = False
    return EsoParams(beta_nice(omega, tau, n), L, int(tau), int(omega), int(n))


def _subsets(n: int, tau: int) -> typing.Iterator[typing.Tuple[int, ...]]:
    count = math.comb(n, tau)
    if n > MAX_ENUMERATION_BLOCKS or count > MAX_ENUMERATION_SUBSETS:
        raise EnumerationBudgetError(
            f"Enumerating C({n}, {tau}) = {count} samplings exceeds the budget"
        )
    return itertools.combinations(range(n), tau)


def _restricted(x: BlockVector, h: BlockVector, subset: typing.Sequence[int]) -> BlockVector:
    data = x.data.copy()
    coordinates = x.partition.indices(subset)
    data[coordinates] += h.data[coordinates]
    return BlockVector(x.partition, data)


def expected_f(p: CompositeProblem, tau: int, x: BlockVector, h: BlockVector) -> float:
    """
    E[f(x + sum_{i in S} U_i h_i)] over the tau-nice sampling, exactly
    """
    values = [eval_f(p, _restricted(x, h, S)) for S in _subsets(p.n, tau)]
    return math.fsum(values) / len(values)


def verify_eso_exhaustive(p: CompositeProblem, params: EsoParams, x: BlockVector, h: BlockVector) -> bool:
    """
    Checks the ESO inequality
    E[f(x + h_S)] <= f(x) + (tau/n)(<f'(x), h> + (beta/2)||h||_w^2)
    by enumerating all tau-subsets.
    """
    lhs = expected_f(p, params.tau, x, h)
    fx = eval_f(p, x)
    squared = sum(params.w[i] * p.norms.block_quadratic(i, h.block(i)) for i in range(p.n))
    rhs = fx + (params.tau / p.n) * (float(grad_f(p, x).data @ h.data) + 0.5 * params.beta * squared)
    scale = max(1.0, abs(fx))
    holds = lhs <= rhs + ESO_TOL * scale
    if not holds:
        logger.warning("ESO inequality violated: %.17g > %.17g", lhs, rhs)
    return holds


def verify_psi_identity(p: CompositeProblem, tau: int, x: BlockVector, h: BlockVector) -> bool:
    """
    Checks E[Psi(x + h_S)] = (1 - tau/n) Psi(x) + (tau/n) Psi(x + h) by enumeration.
    Infeasible x or x + h make both sides infinite; reported as a vacuous pass.
    """
    psi_x = p.eval_psi(x)
    psi_xh = p.eval_psi(x + h)
    if math.isinf(psi_x) or math.isinf(psi_xh):
        logger.warning("Psi identity holds vacuously: infeasible x or x + h")
        return True
    values = [p.eval_psi(_restricted(x, h, S)) for S in _subsets(p.n, tau)]
    lhs = math.fsum(values) / len(values)
    alpha = tau / p.n
    rhs = (1 - alpha) * psi_x + alpha * psi_xh
    return abs(lhs - rhs) <= PSI_IDENTITY_TOL * max(1.0, abs(lhs), abs(rhs))
