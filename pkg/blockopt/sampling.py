import logging

import numpy as np

from blockopt.errors import BlockStructureError, ProblemValidationError
from blockopt.types import IndexSet


class TauNiceSampler:
    """
    tau-nice sampling: every draw is a uniformly random tau-subset of the
    n blocks. Randomness comes from a Philox counter-based stream, so a seed
    fixes the draw sequence on every platform.
    """

    def __init__(self, n: int, tau: int, seed: int = 0):
        self._logger = logging.getLogger(__name__)
        if n < 1:
            raise ProblemValidationError(f"Need at least one block, got n={n}")
        if not 1 <= tau <= n:
            raise ProblemValidationError(f"tau must lie in [1, {n}], got {tau}")
        self.n = int(n)
        self.tau = int(tau)
        self.seed = int(seed)
        self._stream = np.random.Generator(np.random.Philox(self.seed))
        self._draws = 0
        self._logger.debug("Sampler n=%i tau=%i seed=%i", n, tau, seed)

    @property
    def draws(self) -> int:
        return self._draws

    def draw(self) -> IndexSet:
        """
        Partial Fisher-Yates shuffle of 0..n-1, first tau positions, sorted
        """
        self._draws += 1
        if self.tau == self.n:
            return np.arange(self.n)
        order = np.arange(self.n)
        for j in range(self.tau):
            k = int(self._stream.integers(j, self.n))
            order[j], order[k] = order[k], order[j]
        return np.sort(order[: self.tau])

    def __iter__(self):
        while True:
            yield self.draw()

    def inclusion_probability(self, i: int) -> float:
        return inclusion_probability(self, i)

    def __repr__(self):
        return f"TauNiceSampler(n={self.n}, tau={self.tau}, seed={self.seed})"


def draw(s: TauNiceSampler) -> IndexSet:
    return s.draw()


def inclusion_probability(s: TauNiceSampler, i: int) -> float:
    """
    P(i in S) = E|S| / n = tau / n, the same for every block
    """
    if not 0 <= i < s.n:
        raise BlockStructureError(f"Block index {i} out of range for {s.n} blocks")
    return s.tau / s.n
