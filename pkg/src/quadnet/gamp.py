"""Message-passing reconstruction of the teacher matrix from reduced labels.

The iteration alternates a scalar Gaussian channel step on the n observations
with a rotationally-invariant matrix denoising step on the d x d estimate:

    V^t     = c_hat^t
    omega^t = Tr[Z_i S_hat^t] - g_out(y_i, omega^{t-1}, V^{t-1}) V^t
    A^t     = (2 alpha / n) sum_i g_out(y_i, omega^t, V^t)^2
    R^t     = S_hat^t + (1 / (d A^t)) sum_i g_out(y_i, omega^t, V^t) Z_i
    S_hat^{t+1} = denoise(R^t, 1 / (2 A^t)),  c_hat^{t+1} = 2 mmse(1 / (2 A^t))

with g_out(y, omega, V) = (y - omega) / (tilde_delta + V).  The memory term
in the omega update keeps the residuals decorrelated from the running
estimate; dropping it breaks the agreement with the scalar state evolution
(see ``state_evolution_iterate``), which is what the iteration is tracked
against in the tests.

Initialization options:

* ``"mean"`` (default): S_hat^0 is the prior mean, c_hat^0 = 2 * prior
  variance.  This is exactly self-consistent (c_hat^0 equals twice the
  expected squared error of S_hat^0) and makes the iteration line up with
  ``state_evolution_iterate`` started at q_init = q_min from the first step.
* ``"sample"``: S_hat^0 is an independent draw from the prior, with
  c_hat^0 = 4 * prior variance, again twice the expected initial error (the
  error of an independent sample is twice the prior variance).  Same fixed
  point, different transient.

The labels are recentered by their sample mean before the iteration: at
finite d the reduced labels carry a common offset sqrt(d) (Tr S*/d - 1) of
order 1/sqrt(d) that the Gaussian channel cannot represent, and which
otherwise degrades the noiseless fixed point.  Disable with
``GampOptions(center=False)``.
"""

import dataclasses

import numpy as np

from . import matdenoise
from .matdenoise import DenoiseSpec
from .model import ReducedDataset, matrix_mse
from .state_evolution import ProblemParams

# Below this denoising noise level the shrinkage correction is smaller than
# floating-point noise on the eigenvalues; the denoiser degenerates to the
# identity and the mmse to the noise level itself.
T_FLOOR = 1e-6

# Above this noise level (in units of the prior variance) the channel carries
# essentially no information and the posterior mean is the prior mean; the
# asymptotic shrinkage formula is skipped because at such levels the observed
# spectrum is dominated by finite-sample outliers far off the model support.
T_CEIL_FACTOR = 100.0

# Division guard for g_out in the noiseless channel (tilde_delta = 0).
V_FLOOR = 1e-10

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 20


class Diverged(RuntimeError):
    """The error trace grew an order of magnitude beyond its starting point."""


@dataclasses.dataclass(frozen=True)
class ChannelGaussian:
    """Score of a Gaussian observation channel with variance tilde_delta."""

    tilde_delta: float

    def g_out(self, y, omega, v):
        return (y - omega) / (self.tilde_delta + v)


@dataclasses.dataclass
class GampOptions:
    max_iter: int = 1000
    tol: float = 1e-6
    damping: float = 0.0
    init: str = "mean"
    center: bool = True
    seed: int = 0
    s_star: np.ndarray | None = None
    omit_onsager: bool = False  # regression tests only

    def __post_init__(self):
        if not 0.0 <= self.damping <= 0.5:
            raise ValueError(f"damping must be in [0, 0.5], got {self.damping}")
        if self.init not in ("mean", "sample"):
            raise ValueError(f"init must be 'mean' or 'sample', got {self.init!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclasses.dataclass
class GampState:
    """Live state of the iteration plus per-iteration traces.

    ``mse_trace`` holds matrix_mse against ``s_star`` when the teacher matrix
    was provided, otherwise the mean squared channel residual (the only
    error proxy observable without the teacher).  ``a_trace``, ``v_trace``
    and ``c_trace`` record A^t, V^t and c_hat^{t+1}.
    """

    S_hat: np.ndarray
    c_hat: float
    omega: np.ndarray
    V: float
    A: float
    R: np.ndarray
    iter: int
    mse_trace: list
    a_trace: list
    v_trace: list
    c_trace: list
    converged: bool = False
    n_v_floor: int = 0


def prior_mean(prior, d):
    """Mean of the signal prior: (first moment) * identity."""
    return prior.mean * np.eye(d)


def sample_prior(prior, d, rng):
    """Independent draw from the signal prior at dimension d."""
    m = max(1, round(prior.kappa * d))
    w = rng.normal(size=(m, d))
    if prior.kind == "marchenko_pastur":
        return w.T @ w / m
    values = np.array([a for a, _ in prior.atoms])
    weights = np.array([p for _, p in prior.atoms])
    a = rng.choice(values, size=m, p=weights)
    return (w.T * a) @ w / m


def _denoise_step(prior, t_lvl, R):
    """One prior step: returns (S_new, c_new) at noise level t_lvl."""
    if t_lvl < T_FLOOR:
        return 0.5 * (R + R.T), 2.0 * t_lvl
    if t_lvl > T_CEIL_FACTOR * prior.variance:
        return prior_mean(prior, R.shape[0]), 2.0 * prior.variance
    spec = DenoiseSpec.create(prior, t_lvl)
    return matdenoise.denoise_matrix(spec, R), 2.0 * matdenoise.mmse(spec)


def run(dataset: ReducedDataset, params: ProblemParams, opts: GampOptions | None = None):
    """Iterate the message passing on a reduced dataset.

    Returns ``(S_hat, state)`` where ``S_hat`` is the lowest-error iterate
    seen (by the trace metric) and ``state`` carries the final live state
    and the traces.  Raises ``Diverged`` when the trace metric exceeds
    ``DIVERGENCE_FACTOR`` times its initial value for
    ``DIVERGENCE_PATIENCE`` consecutive iterations.
    """
    opts = opts or GampOptions()
    prior = params.prior
    channel = ChannelGaussian(dataset.tilde_delta)
    d = dataset.d
    rng = np.random.default_rng(opts.seed)

    y = dataset.y_tilde
    if opts.center:
        y = y - np.mean(y)

    if opts.init == "mean":
        S = prior_mean(prior, d)
        c = 2.0 * prior.variance
    else:
        S = sample_prior(prior, d, rng)
        c = 4.0 * prior.variance

    state = GampState(
        S_hat=S, c_hat=c, omega=np.zeros(dataset.n), V=c, A=np.nan,
        R=S, iter=0, mse_trace=[], a_trace=[], v_trace=[], c_trace=[],
    )

    def error_metric(S_cur, residual):
        if opts.s_star is not None:
            return matrix_mse(S_cur, opts.s_star, params.kappa)
        return float(np.mean(residual**2))

    g = None
    best_S = S
    best_err = np.inf
    n_over = 0
    for it in range(1, opts.max_iter + 1):
        V = c
        v_eff = V
        if channel.tilde_delta + v_eff < V_FLOOR:
            v_eff = V_FLOOR - channel.tilde_delta
            state.n_v_floor += 1
        tz = dataset.trace_products(S)
        if g is None or opts.omit_onsager:
            omega = tz
        else:
            omega = tz - g * V
        g = channel.g_out(y, omega, v_eff)
        A = 2.0 * float(g @ g) / d**2
        R = S + dataset.weighted_sum(g) / (d * A)
        S_new, c_new = _denoise_step(prior, 1.0 / (2.0 * A), R)
        if opts.damping > 0.0:
            S_new = (1.0 - opts.damping) * S_new + opts.damping * S

        err = error_metric(S_new, y - omega)
        state.mse_trace.append(err)
        state.a_trace.append(A)
        state.v_trace.append(V)
        state.c_trace.append(c_new)
        if err < best_err:
            best_err = err
            best_S = S_new

        rel = float(np.linalg.norm(S_new - S) / max(np.linalg.norm(S), 1e-300))
        state.S_hat, state.c_hat = S_new, c_new
        state.omega, state.V, state.A, state.R = omega, V, A, R
        state.iter = it
        S, c = S_new, c_new

        if state.mse_trace[0] > 0 and err > DIVERGENCE_FACTOR * state.mse_trace[0]:
            n_over += 1
            if n_over >= DIVERGENCE_PATIENCE:
                raise Diverged(
                    f"error {err:.3g} stayed above {DIVERGENCE_FACTOR:g}x the "
                    f"initial {state.mse_trace[0]:.3g} for {n_over} iterations"
                )
        else:
            n_over = 0
        if rel < opts.tol:
            state.converged = True
            break

    return best_S, state


def state_evolution_iterate(params: ProblemParams, q_init: float | None = None,
                            tol: float = 1e-10, max_iter: int = 5000):
    """Scalar tracker of the iteration: alternates the channel and prior maps.

    q_hat^t = 4 alpha / (tilde_delta + 2 (Q0 - q^t)), then
    q^{t+1} = Q0 - mmse(1 / q_hat^t).  Returns the trace as a list of
    (q, q_hat) pairs, starting with the first updated pair.  The overlap
    q = Q0 - mmse matches the matrix iteration started from the prior mean:
    kappa * (Q0 - q^t) is the predicted error after t denoising steps.
    """
    prior = params.prior
    q0 = params.q0
    q_min = params.q_min
    if q_init is None:
        q_init = q_min
    if not q_min - 1e-9 <= q_init <= q0 + 1e-9:
        raise ValueError(f"q_init must lie in [{q_min}, {q0}], got {q_init}")
    td = params.tilde_delta
    q = min(max(q_init, q_min), q0)
    trace = []
    for _ in range(max_iter):
        gap = q0 - q
        q_hat = 4.0 * params.alpha / (td + 2.0 * gap)
        t_lvl = 1.0 / q_hat
        if t_lvl < T_FLOOR:
            # noiseless perfect-recovery endpoint: the map keeps contracting,
            # the limit is exact recovery
            trace.append((q0, q_hat))
            break
        if t_lvl > T_CEIL_FACTOR * prior.variance:
            mmse_val = prior.variance
        else:
            mmse_val = matdenoise.mmse(DenoiseSpec.create(prior, t_lvl))
        q_new = q0 - mmse_val
        trace.append((q_new, q_hat))
        if abs(q_new - q) < tol:
            q = q_new
            break
        q = q_new
    return trace
