"""Optimal rotationally-invariant denoising of extensive-rank matrices.

Observation model: Y = S + sqrt(delta) * G with S a rotationally-invariant
signal matrix whose spectrum follows a PriorSpectrum law, and G a GOE matrix
(variance (1 + delta_ij)/d).  The Bayes-optimal rotationally-invariant
estimator keeps the eigenvectors of Y and shrinks each eigenvalue lam to

    f_delta(lam) = lam - 2 * delta * h_delta(lam),

where h_delta is the Hilbert transform of the spectral density of Y,
rho_delta = prior (+) semicircle(delta).  Its asymptotic mean squared error
per matrix entry (times d) is

    F_RIE(delta) = delta - (4 pi^2 / 3) delta^2 * int rho_delta^3,

equivalently delta - 4 delta^2 * int rho_delta h_delta^2; both forms are
computed and cross-checked on every call.
"""

import dataclasses

import numpy as np

from . import freeprob
from .freeprob import PriorSpectrum, SpectralDensity

DEFAULT_TABLE_NODES = 4001


class EigenFailure(RuntimeError):
    """Eigendecomposition of the observed matrix did not converge."""


class FormMismatch(RuntimeError):
    """The two analytic forms of the denoising MMSE disagree."""


@dataclasses.dataclass(frozen=True)
class DenoiseSpec:
    """Prior + noise level, with the spectral density of the observation cached.

    The cached density provides the interpolation table for the Hilbert
    transform on the support (`shrink` is called once per eigenvalue inside
    iterative algorithms); off-support eigenvalues fall back to direct
    Stieltjes evaluation.
    """

    prior: PriorSpectrum
    delta: float
    rho: SpectralDensity

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.rho.prior != self.prior or self.rho.t != self.delta:
            raise ValueError("cached density does not match (prior, delta)")

    @classmethod
    def create(
        cls, prior: PriorSpectrum, delta: float, n_nodes: int = DEFAULT_TABLE_NODES
    ) -> "DenoiseSpec":
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        return cls(prior=prior, delta=delta, rho=freeprob.density(prior, delta, n_nodes=n_nodes))


def shrink(spec: DenoiseSpec, lam):
    """Scalar shrinker f_delta(lam) = lam - 2 delta h_delta(lam).

    Accepts a scalar or an array of eigenvalues; defined on and off the
    support of rho_delta (outside, the Hilbert transform is the ordinary
    integral, evaluated from the real Stieltjes transform).
    """
    h = freeprob.hilbert(spec.prior, spec.delta, lam, dens=spec.rho)
    out = np.asarray(lam, dtype=float) - 2.0 * spec.delta * np.asarray(h)
    return float(out) if np.ndim(lam) == 0 else out


def denoise_matrix(spec: DenoiseSpec, R: np.ndarray) -> np.ndarray:
    """Apply the shrinker in the eigenbasis of a symmetric matrix R.

    R = U diag(lam) U^T maps to U diag(f_delta(lam)) U^T: eigenvectors are
    kept, eigenvalues are shrunk.  The output is symmetrized to remove
    floating-point asymmetry.
    """
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError(f"R must be square, got shape {R.shape}")
    try:
        evals, vecs = np.linalg.eigh(R)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(f"eigendecomposition failed: {exc}") from exc
    shrunk = shrink(spec, evals)
    out = (vecs * shrunk) @ vecs.T
    return 0.5 * (out + out.T)


def mmse_forms(spec: DenoiseSpec) -> tuple[float, float]:
    """Both closed forms of the denoising MMSE, for cross-validation.

    Primary form: delta - (4 pi^2 / 3) delta^2 int rho^3.  Secondary form:
    delta - 4 delta^2 int rho h^2 with h the Hilbert transform on the grid.
    Their agreement validates the quadrature and the h table at once.
    """
    delta = spec.delta
    rho = spec.rho
    cube = rho.cube_integral()
    primary = delta - (4.0 * np.pi**2 / 3.0) * delta**2 * cube
    h = rho.hilbert_on_grid()
    quad = rho.integrate([r * hi**2 for r, hi in zip(rho.rho, h)])
    secondary = delta - 4.0 * delta**2 * quad
    return primary, secondary


def mmse(spec: DenoiseSpec) -> float:
    """Asymptotic denoising MMSE F_RIE(delta), cross-checked in two forms."""
    primary, secondary = mmse_forms(spec)
    if abs(primary - secondary) > 1e-4:
        raise FormMismatch(
            f"denoising MMSE forms disagree at delta={spec.delta}: "
            f"{primary!r} vs {secondary!r}"
        )
    return primary


# ----------------------------------------------------------------------------
# sampling helpers for Monte-Carlo validation (tests and the CLI harness)
# ----------------------------------------------------------------------------


def sample_goe(d: int, rng: np.random.Generator) -> np.ndarray:
    """GOE draw: symmetric, off-diagonal variance 1/d, diagonal variance 2/d."""
    a = rng.normal(size=(d, d))
    return (a + a.T) / np.sqrt(2.0 * d)


def sample_wishart(d: int, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """S = W^T W / m with W an m x d standard Gaussian matrix, m = round(kappa d)."""
    m = max(1, round(kappa * d))
    w = rng.normal(size=(m, d))
    return w.T @ w / m
