"""Asymptotic Bayes-optimal overlap and MMSE via the state-evolution fixed point.

The learning problem is parameterized by the sample ratio alpha, the width
ratio kappa, and the label noise delta.  Its asymptotic MMSE is kappa times
the matrix-denoising error at an effective noise level t = 1/q_hat, where the
conjugate overlap q_hat solves the scalar fixed-point equation

    (1 - 2 alpha) + tilde_delta q_hat / 2 = (4 pi^2 / 3 q_hat) int mu_{1/q_hat}^3,

mu_t being the free convolution of the prior spectrum with a semicircle of
variance t.  Above the noiseless perfect-recovery threshold the equation has
no root and the MMSE is exactly zero (q_hat = infinity).

The free-entropy functional F(q) whose maximizer is the overlap q* is also
provided; its inner conjugate solve, the fixed-point solver, and the iterative
route in `gamp.state_evolution_iterate` are independent implementations whose
agreement is asserted in the tests.
"""

import dataclasses
import math

import numpy as np
from scipy import optimize

from . import freeprob
from .freeprob import PriorSpectrum

SOLVER_NODES = 801
# q_hat beyond this is numerically indistinguishable from the perfect-recovery
# fixed point at infinity (MMSE ~ 2 alpha kappa / q_hat < 1e-8)
QHAT_MAX = 1e9


class NoConvergence(RuntimeError):
    """Fixed-point root finder exhausted its iteration budget."""


class OutOfRange(RuntimeError):
    """Solved overlap fell outside [q_min, Q0] beyond tolerance."""


@dataclasses.dataclass(frozen=True)
class ProblemParams:
    """Problem sizes (alpha, kappa, delta) with the derived constants.

    alpha = n / d^2 samples per squared dimension, kappa = m / d hidden units
    per dimension, delta = per-unit label noise variance.  The reduced matrix
    problem has Gaussian channel variance tilde_delta and prior second moment
    q0; q_min is the squared prior mean, the overlap reached with no data.
    """

    alpha: float
    kappa: float
    delta: float = 0.0
    prior: PriorSpectrum = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if self.prior is None:
            object.__setattr__(
                self, "prior", PriorSpectrum.marchenko_pastur(self.kappa)
            )
        elif self.prior.kappa != self.kappa:
            raise ValueError(
                f"prior kappa {self.prior.kappa} != problem kappa {self.kappa}"
            )

    @property
    def tilde_delta(self) -> float:
        """Effective Gaussian-channel variance 2 delta (2 + delta) / kappa."""
        return 2.0 * self.delta * (2.0 + self.delta) / self.kappa

    @property
    def lam(self) -> float:
        """Noise combination delta (2 + delta)."""
        return self.delta * (2.0 + self.delta)

    @property
    def q0(self) -> float:
        """Prior second moment (1 + 1/kappa for the Marchenko-Pastur prior)."""
        return self.prior.second_moment

    @property
    def q_min(self) -> float:
        """Squared prior mean: the overlap of the data-free estimator."""
        return self.prior.mean**2

    @property
    def mmse_max(self) -> float:
        """kappa (Q0 - q_min): the MMSE with no data (1 for the MP prior)."""
        return self.kappa * (self.q0 - self.q_min)


@dataclasses.dataclass
class SEFixedPoint:
    q: float
    q_hat: float
    mmse: float
    free_entropy: float
    iterations: int
    residual: float
    status: str = "converged"
    clipped: float = 0.0


def _cube(prior, t):
    dens = freeprob.density(prior, t, n_nodes=SOLVER_NODES, refine_edges=False)
    return dens.cube_integral()


def _fixed_point_lhs_minus_rhs(params, q_hat):
    """Residual of the scalar fixed-point equation at q_hat."""
    t = 1.0 / q_hat
    return (
        (1.0 - 2.0 * params.alpha)
        + 0.5 * params.tilde_delta * q_hat
        - (4.0 * np.pi**2 / 3.0) / q_hat * _cube(params.prior, t)
    )


def _f_rie(prior, t):
    """Denoising error t - (4 pi^2 / 3) t^2 int mu_t^3 (resolvent route).

    A deliberately separate implementation from `matdenoise.mmse`, which the
    iterative state evolution uses; the two routes are cross-checked in the
    tests.
    """
    return t - (4.0 * np.pi**2 / 3.0) * t**2 * _cube(prior, t)


def solve_qhat(params: ProblemParams, with_free_entropy: bool = True) -> SEFixedPoint:
    """Solve the fixed-point equation for q_hat and assemble the MMSE.

    The root is bracketed and solved in log q_hat starting from the
    initialization q_hat = 2 alpha / Q0.  In the noiseless supercritical
    regime (no root below QHAT_MAX) the perfect-recovery fixed point is
    returned: q_hat = inf, MMSE = 0, q = Q0.
    """
    if not params.alpha > 0:
        raise ValueError("solve_qhat requires alpha > 0")
    g = lambda u: _fixed_point_lhs_minus_rhs(params, math.exp(u))
    u0 = math.log(2.0 * params.alpha / params.q0)
    evals = 0
    lo, g_lo = u0, g(u0)
    evals += 1
    while g_lo > 0.0:
        # g(q_hat -> 0) = -2 alpha < 0, so a sign change below always exists
        lo -= 2.0
        g_lo = g(lo)
        evals += 1
        if evals > 60:
            raise NoConvergence("lower bracket expansion failed")
    hi, g_hi = lo, g_lo
    while g_hi < 0.0:
        hi += 1.0
        if hi > math.log(QHAT_MAX):
            return _perfect_recovery_point(params, evals)
        g_hi = g(hi)
        evals += 1
    if lo == hi:
        lo = hi - 1.0
    u_star, info = optimize.brentq(
        g, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200, full_output=True
    )
    if not info.converged:
        raise NoConvergence(f"brentq did not converge: {info.flag}")
    q_hat = math.exp(u_star)
    residual = abs(g(u_star))
    mmse_raw = 2.0 * params.alpha * params.kappa / q_hat - 0.5 * params.kappa * params.tilde_delta
    q_raw = params.q0 - mmse_raw / params.kappa
    if not (params.q_min - 1e-6 <= q_raw <= params.q0 + 1e-6):
        raise OutOfRange(
            f"overlap q={q_raw} outside [{params.q_min}, {params.q0}] "
            f"at alpha={params.alpha}, kappa={params.kappa}, delta={params.delta}"
        )
    mmse = min(max(mmse_raw, 0.0), params.mmse_max)
    q = params.q0 - mmse / params.kappa
    fe = free_entropy(params, q) if with_free_entropy else float("nan")
    return SEFixedPoint(
        q=q,
        q_hat=q_hat,
        mmse=mmse,
        free_entropy=fe,
        iterations=evals + info.iterations,
        residual=residual,
        clipped=abs(mmse - mmse_raw),
    )


def _perfect_recovery_point(params, evals):
    return SEFixedPoint(
        q=params.q0,
        q_hat=float("inf"),
        mmse=0.0,
        free_entropy=float("inf"),
        iterations=evals,
        residual=0.0,
        status="supercritical",
    )


def _inner_conjugate(params, q):
    """q_hat realizing the inner infimum of I(q): solves F_RIE(1/q_hat) = Q0 - q."""
    target = params.q0 - q
    g = lambda v: _f_rie(params.prior, math.exp(v)) - target
    v = math.log(max(target, 1e-12))
    g_v = g(v)
    lo, hi = v, v
    g_lo = g_hi = g_v
    n = 0
    # F_RIE is increasing in t from 0 to the prior variance, so expand in the
    # direction indicated by the sign
    while g_lo > 0.0:
        lo -= 1.0
        g_lo = g(lo)
        n += 1
        if n > 80:
            raise NoConvergence("inner conjugate bracket (low) failed")
    while g_hi < 0.0:
        hi += 1.0
        g_hi = g(hi)
        n += 1
        if n > 80:
            raise NoConvergence("inner conjugate bracket (high) failed")
    if lo == hi:
        return 1.0 / math.exp(lo)
    v_star = optimize.brentq(g, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
    return 1.0 / math.exp(v_star)


def overlap_rate(params: ProblemParams, q: float, n_nodes: int = SOLVER_NODES) -> float:
    """I(q): the prior-side rate function of the overlap.

    inf over q_hat >= 0 of (Q0-q) q_hat/4 - Sigma(mu_{1/q_hat})/2
    - log(q_hat)/4 - 1/8, with Sigma the log potential.  Zero at q = q_min;
    the infimum is attained at the conjugate returned by the inner solve.
    """
    span = params.q0 - params.q_min
    if q <= params.q_min + 1e-12 * span:
        return 0.0
    q = min(q, params.q0 - 1e-9 * span)
    q_hat = _inner_conjugate(params, q)
    t = 1.0 / q_hat
    sigma = freeprob.log_potential(
        freeprob.density(params.prior, t, n_nodes=n_nodes, refine_edges=False)
    )
    return (
        0.25 * (params.q0 - q) * q_hat
        - 0.5 * sigma
        - 0.25 * math.log(q_hat)
        - 0.125
    )


def free_entropy(params: ProblemParams, q: float, n_nodes: int = SOLVER_NODES) -> float:
    """F(q) = I(q) - (alpha/2) log[tilde_delta + 2 (Q0 - q)].

    The asymptotic overlap is the maximizer of F over [q_min, Q0].  At the
    noiseless boundary q -> Q0 the channel term diverges; q is evaluated a
    relative 1e-9 inside the boundary, which preserves the (in)finite-ness
    competition between the two terms.
    """
    if not (params.q_min - 1e-9 <= q <= params.q0 + 1e-9):
        raise ValueError(f"q={q} outside [{params.q_min}, {params.q0}]")
    span = params.q0 - params.q_min
    q = min(max(q, params.q_min), params.q0 - 1e-9 * span)
    channel = -0.5 * params.alpha * math.log(
        params.tilde_delta + 2.0 * (params.q0 - q)
    )
    return overlap_rate(params, q, n_nodes=n_nodes) + channel


def perfect_recovery_threshold(kappa: float) -> float:
    """Noiseless sample ratio above which the MMSE is exactly zero.

    kappa - kappa^2/2 below square aspect, 1/2 above (Marchenko-Pastur
    prior).
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return kappa - 0.5 * kappa**2 if kappa <= 1.0 else 0.5


def mmse_slope_at_pr(kappa: float) -> float:
    """Slope dMMSE/dalpha of the noiseless curve at the recovery threshold."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if kappa <= 1.0:
        return -2.0 - 4.0 / kappa + 12.0 / (1.0 + kappa)
    return -2.0 + 2.0 / kappa


def small_kappa_mmse(alpha_tilde: float, delta: float = 0.0) -> float:
    """Narrow-width limit of the MMSE as a function of alpha/kappa.

    Below the breakpoint (1 + Lambda)/2 the MMSE sticks at 1; above it
    follows -Lambda + 2 at [1 - at + sqrt((1 - at)^2 + Lambda)], which in the
    noiseless case is 4 at (1 - at) until perfect recovery at alpha/kappa = 1.
    """
    if alpha_tilde < 0:
        raise ValueError("alpha_tilde must be nonnegative")
    lam = delta * (2.0 + delta)
    if alpha_tilde <= 0.5 * (1.0 + lam):
        return 1.0
    at = alpha_tilde
    val = -lam + 2.0 * at * (1.0 - at + math.sqrt((1.0 - at) ** 2 + lam))
    return max(val, 0.0)


def large_kappa_mmse(alpha: float, delta: float = 0.0) -> float:
    """Wide-width limit of the MMSE: max(1 - 2 alpha, 0) when noiseless."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lam = delta * (2.0 + delta)
    return 0.5 * (
        1.0 - 2.0 * alpha - lam + math.sqrt((1.0 - 2.0 * alpha + lam) ** 2 + 8.0 * alpha * lam)
    )


def threshold_alpha(
    kappa: float,
    delta: float = 0.0,
    level: float = 1e-3,
    alpha_lo: float = 1e-3,
    alpha_hi: float = 0.8,
    tol: float = 1e-3,
    prior: PriorSpectrum = None,
) -> float:
    """Smallest alpha at which the solved MMSE drops below `level`.

    Bisection over alpha; each probe is a full fixed-point solve.  Used to
    locate the perfect-recovery transition from the solver itself, as an
    independent check of the closed-form threshold.
    """

    def mmse_at(alpha):
        p = ProblemParams(alpha=alpha, kappa=kappa, delta=delta, prior=prior)
        return solve_qhat(p, with_free_entropy=False).mmse

    lo, hi = alpha_lo, alpha_hi
    if mmse_at(hi) >= level:
        raise NoConvergence(f"MMSE still above {level} at alpha={hi}")
    if mmse_at(lo) < level:
        raise NoConvergence(f"MMSE already below {level} at alpha={lo}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mmse_at(mid) < level:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def sweep(grid, with_free_entropy: bool = True):
    """Solve every cell of a ProblemParams list; failures are recorded inline.

    Returns a list of SEFixedPoint in input order; cells whose solve raises
    get a placeholder with status "error: ..." and NaN values so that the
    rest of the sweep is unaffected.
    """
    out = []
    for params in grid:
        try:
            out.append(solve_qhat(params, with_free_entropy=with_free_entropy))
        except Exception as exc:
            out.append(
                SEFixedPoint(
                    q=float("nan"),
                    q_hat=float("nan"),
                    mmse=float("nan"),
                    free_entropy=float("nan"),
                    iterations=0,
                    residual=float("nan"),
                    status=f"error: {exc}",
                )
            )
    return out
