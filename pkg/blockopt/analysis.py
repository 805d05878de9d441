import dataclasses
import json
import logging
import math
import typing

import munch
import numpy as np

from blockopt.blockstruct import BlockVector
from blockopt.eso import EsoParams, beta_nice
from blockopt.errors import ProblemValidationError
from blockopt.problem import (
    CompositeProblem,
    StrongConvexityInfo,
    h_model,
    reference_optimum,
    strong_convexity_constants,
)

logger = logging.getLogger(__name__)

CONTRACTION_TOL = 1e-9
TIE_TOL = 1e-12


def _check_mu(mu_F: float, mu_f: float) -> None:
    if mu_F <= 0:
        raise ProblemValidationError(f"Rates need mu_F > 0, got {mu_F}")
    if mu_f < 0 or mu_f > mu_F * (1 + 1e-12):
        raise ProblemValidationError(f"Need 0 <= mu_f <= mu_F, got mu_f={mu_f}, mu_F={mu_F}")


def q_pcdm(mu_F_L: float, mu_f_L: float, omega: int) -> float:
    """
    Linear rate of fully parallel PCDM, 1 - mu_F(L) / (omega + mu_F(L) - mu_f(L))
    :param mu_F_L: strong convexity of F with respect to ||.||_L
    :param mu_f_L: strong convexity of f with respect to ||.||_L
    :param omega: degree of partial separability
    """
    _check_mu(mu_F_L, mu_f_L)
    if omega < 1:
        raise ProblemValidationError(f"omega must be at least 1, got {omega}")
    return 1.0 - mu_F_L / (omega + mu_F_L - mu_f_L)


def q_dqam(mu_F_e: float, L_prime: float, omega: int) -> float:
    """
    Linear rate of DQAM with theta = 1/(2(omega-1)),
    1 - mu_F(e) / (16 L' (omega-1)^3 + 4 (omega-1) mu_F(e)).
    DQAM has no rate for omega = 1.
    """
    if omega < 2:
        raise ProblemValidationError(f"The DQAM rate needs omega >= 2, got {omega}")
    if mu_F_e <= 0:
        raise ProblemValidationError(f"Rates need mu_F > 0, got {mu_F_e}")
    if L_prime <= 0:
        raise ProblemValidationError(f"L' must be positive, got {L_prime}")
    spread = omega - 1
    return 1.0 - mu_F_e / (16 * L_prime * spread**3 + 4 * spread * mu_F_e)


def _ceil(value: float) -> int:
    # log(e) and friends land a hair above an integer
    return int(math.ceil(value * (1 - 1e-14)))


def k_bound(
    n: int,
    E_size: float,
    beta: float,
    mu_F_w: float,
    mu_f_w: float,
    gap0: float,
    eps: float,
    rho: float,
) -> int:
    """
    Iterations after which P(F(x_K) - F* <= eps) >= 1 - rho for PCDM:
    K = ceil((n / E|S|) ((beta + mu_F - mu_f) / mu_F) log(gap0 / (eps rho)))
    """
    _check_mu(mu_F_w, mu_f_w)
    if not 0 < eps < gap0:
        raise ProblemValidationError(f"Need 0 < eps < gap0, got eps={eps}, gap0={gap0}")
    if not 0 < rho <= 1:
        raise ProblemValidationError(f"Confidence level rho must lie in (0, 1], got {rho}")
    if not 0 < E_size <= n:
        raise ProblemValidationError(f"Expected sample size must lie in (0, {n}], got {E_size}")
    if beta < mu_f_w:
        raise ProblemValidationError(f"Need beta >= mu_f, got beta={beta}, mu_f={mu_f_w}")
    value = (n / E_size) * ((beta + mu_F_w - mu_f_w) / mu_F_w) * math.log(gap0 / (eps * rho))
    return max(0, _ceil(value))


def deterministic_iterations(q: float, gap0: float, eps: float) -> int:
    """
    k = ceil(log(gap0 / eps) / (1 - q)), enough for F(x_k) - F* <= eps under
    a linear rate q
    """
    if not 0 <= q < 1:
        raise ProblemValidationError(f"Rate must lie in [0, 1), got {q}")
    if not 0 < eps < gap0:
        raise ProblemValidationError(f"Need 0 < eps < gap0, got eps={eps}, gap0={gap0}")
    return _ceil(math.log(gap0 / eps) / (1 - q))


class Speedup(typing.NamedTuple):
    exact: float
    lower_bound: float


def speedup_ratio(omega: int, L_prime: float, L_bar: float, mu_F_e: float, mu_f_e: float) -> Speedup:
    """
    (1 - q_PCDM) / (1 - q_DQAM) = (16 L' (omega-1)^3 + 4 (omega-1) mu_F(e)) / (L_bar omega)
    and its lower bound 16 (omega-1)^3 / omega * L' / L_bar
    """
    if omega < 2:
        raise ProblemValidationError(f"The speedup ratio needs omega >= 2, got {omega}")
    if L_bar <= 0 or L_prime <= 0:
        raise ProblemValidationError("L' and L_bar must be positive")
    if mu_F_e < 0:
        raise ProblemValidationError(f"mu_F must be nonnegative, got {mu_F_e}")
    if not math.isclose(mu_F_e, mu_f_e, rel_tol=1e-9, abs_tol=1e-15):
        logger.warning("Speedup ratio assumes mu_F(e) = mu_f(e), got %g and %g", mu_F_e, mu_f_e)
    spread = omega - 1
    exact = (16 * L_prime * spread**3 + 4 * spread * mu_F_e) / (L_bar * omega)
    lower_bound = 16 * spread**3 / omega * (L_prime / L_bar)
    return Speedup(exact, lower_bound)


def t_curve(
    n: int, p: int, omega: int, tau_grid: typing.Optional[typing.Iterable[int]] = None
) -> typing.Tuple[typing.Dict[int, float], int]:
    """
    Time-unit model T(tau) = ceil(tau / p) (n / tau) beta(tau) over a grid.
    Near-ties (relative 1e-12) go to the fewest batches ceil(tau / p), then the largest tau.
    :param n: number of blocks
    :param p: number of processors
    :param omega: degree of partial separability
    :param tau_grid: sampling sizes, 1..n by default
    :return: ({tau: T(tau)}, argmin)
    """
    if n < 2:
        raise ProblemValidationError(f"The time-unit model needs n > 1, got {n}")
    if not 1 <= p <= n:
        raise ProblemValidationError(f"Processor count must lie in [1, {n}], got {p}")
    if not 1 <= omega <= n:
        raise ProblemValidationError(f"omega must lie in [1, {n}], got {omega}")
    grid = sorted(set(tau_grid)) if tau_grid is not None else list(range(1, n + 1))
    if not grid or grid[0] < 1 or grid[-1] > n:
        raise ProblemValidationError(f"tau grid must be a nonempty subset of 1..{n}")

    T = {tau: math.ceil(tau / p) * (n / tau) * beta_nice(omega, tau, n) for tau in grid}
    best = min(T.values())
    ties = [tau for tau in grid if T[tau] <= best * (1 + TIE_TOL)]
    tau_opt = min(ties, key=lambda tau: (math.ceil(tau / p), -tau))
    if tau_opt != p and p in T:
        logger.warning("T(tau) minimized at tau=%i rather than p=%i", tau_opt, p)
    return T, tau_opt


def contraction_factor(beta: float, info: StrongConvexityInfo) -> float:
    """
    (beta - mu_f) / (mu_F + beta - mu_f)
    """
    return (beta - info.mu_f) / (info.mu_F + beta - info.mu_f)


def verify_contraction_lemma(
    p: CompositeProblem,
    params: EsoParams,
    x: BlockVector,
    info: typing.Optional[StrongConvexityInfo] = None,
    f_star: typing.Optional[float] = None,
) -> bool:
    """
    Checks H_{beta,w}(x + h(x)) - F* <= ((beta - mu_f) / (mu_F + beta - mu_f)) (F(x) - F*)
    where h(x) minimizes H_{beta,w}(x + .) over all blocks.
    :param p: strongly convex problem
    :param params: beta and w; constants are measured against this w
    :param x: point to check at
    :param info: precomputed constants with respect to params.w
    :param f_star: optimal value, computed by reference_optimum when omitted
    """
    from blockopt import solvers

    if info is None:
        info = strong_convexity_constants(p, params.w)
    _check_mu(info.mu_F, info.mu_f)
    if params.beta < info.mu_f:
        raise ProblemValidationError(f"Need beta >= mu_f, got beta={params.beta}, mu_f={info.mu_f}")
    if f_star is None:
        f_star = reference_optimum(p)[1]

    full = solvers.pcdm_step(p, x, params, np.arange(p.n))
    h = full - x
    lhs = h_model(p, params.beta, params.w, x, h) - f_star
    F_x = p.eval_F(x)
    rhs = contraction_factor(params.beta, info) * (F_x - f_star)
    holds = lhs <= rhs + CONTRACTION_TOL * max(1.0, abs(f_star), abs(F_x))
    if not holds:
        logger.warning("Contraction inequality violated: %.17g > %.17g", lhs, rhs)
    return holds


def geometric_decay_bound(gap0: float, eps: float, gamma: float) -> int:
    """
    Smallest k from ceil((1/gamma) log(gap0 / eps)) upward with (1 - gamma)^k gap0 <= eps
    """
    if not 0 < eps < gap0:
        raise ProblemValidationError(f"Need 0 < eps < gap0, got eps={eps}, gap0={gap0}")
    if not 0 < gamma <= 1:
        raise ProblemValidationError(f"gamma must lie in (0, 1], got {gamma}")
    k = _ceil(math.log(gap0 / eps) / gamma)
    while (1 - gamma) ** k * gap0 > eps:
        k += 1
    return k


def varying_constants_comparison(
    L: typing.Sequence[float],
    omega: int,
    info_e: StrongConvexityInfo,
    info_w: typing.Optional[StrongConvexityInfo] = None,
) -> munch.Munch:
    """
    Rate comparison for unequal block constants with w = L / L_bar.
    The approximate figures use mu(w) ~ mu(e); the exact ones use constants
    measured against w when info_w is given.
    """
    L = np.asarray(L, dtype=float)
    L_prime = float(L.max())
    L_bar = float(L.mean())
    report = munch.Munch(L_prime=L_prime, L_bar=L_bar, omega=int(omega))

    def rates(info, label):
        q_p = q_pcdm(info.mu_F / L_bar, info.mu_f / L_bar, omega)
        entry = munch.Munch(label=label, mu_F=info.mu_F, mu_f=info.mu_f, q_pcdm=q_p)
        if omega >= 2:
            q_d = q_dqam(info_e.mu_F, L_prime, omega)
            entry.q_dqam = q_d
            entry.ratio = (1 - q_p) / (1 - q_d)
        return entry

    report.approximate = rates(info_e, "mu(w) ~ mu(e)")
    if info_w is not None:
        report.exact = rates(info_w, "mu(w) measured at w = L / L_bar")
    if omega >= 2:
        report.speedup = speedup_ratio(omega, L_prime, L_bar, info_e.mu_F, info_e.mu_f)._asdict()
    return report


@dataclasses.dataclass
class ComplexityEstimate:
    omega: int
    q_pcdm: float
    q_dqam: typing.Optional[float] = None
    K_highprob: typing.Optional[int] = None
    speedup_ratio: typing.Optional[float] = None
    speedup_lower_bound: typing.Optional[float] = None
    T_curve: typing.Dict[int, float] = dataclasses.field(default_factory=dict)
    tau_opt: typing.Optional[int] = None
    notes: typing.List[str] = dataclasses.field(default_factory=list)

    def to_dict(self) -> munch.Munch:
        data = munch.Munch(dataclasses.asdict(self))
        data.T_curve = {str(tau): value for tau, value in self.T_curve.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def complexity_estimate(
    omega: int,
    L_prime: float,
    L_bar: float,
    mu_F_e: float,
    mu_f_e: float,
    mu_F_L: typing.Optional[float] = None,
    mu_f_L: typing.Optional[float] = None,
    n: typing.Optional[int] = None,
    tau: typing.Optional[int] = None,
    processors: typing.Optional[int] = None,
    gap0: typing.Optional[float] = None,
    eps: typing.Optional[float] = None,
    rho: float = 0.1,
) -> ComplexityEstimate:
    """
    Everything the rate calculators can say about one set of constants.
    Without mu(L) the approximation mu(L) ~ mu(e) / L_bar is used and noted.
    DQAM figures are left empty for omega = 1.
    """
    notes = []
    if mu_F_L is None or mu_f_L is None:
        mu_F_L, mu_f_L = mu_F_e / L_bar, mu_f_e / L_bar
        notes.append("mu(L) approximated by mu(e) / L_bar")
    estimate = ComplexityEstimate(omega=int(omega), q_pcdm=q_pcdm(mu_F_L, mu_f_L, omega), notes=notes)

    if omega >= 2:
        estimate.q_dqam = q_dqam(mu_F_e, L_prime, omega)
        speedup = speedup_ratio(omega, L_prime, L_bar, mu_F_e, mu_f_e)
        estimate.speedup_ratio = speedup.exact
        estimate.speedup_lower_bound = speedup.lower_bound
    else:
        notes.append("DQAM rate unavailable for omega = 1")

    if n is not None:
        tau = tau or n
        if gap0 is not None and eps is not None:
            estimate.K_highprob = k_bound(
                n, tau, beta_nice(omega, tau, n), mu_F_L, mu_f_L, gap0, eps, rho
            )
        if processors is not None and n > 1:
            estimate.T_curve, estimate.tau_opt = t_curve(n, processors, omega)
    return estimate
