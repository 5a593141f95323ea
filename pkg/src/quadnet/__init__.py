"""Bayes-optimal learning of extensive-width quadratic networks.

Numerical toolkit: free-convolution spectral densities, the asymptotic-MMSE
state evolution, a rotation-invariant matrix denoiser, GAMP message passing
on the reduced linear-on-matrices model, and gradient-descent baselines.
"""

__version__ = "0.1.0"

from . import freeprob, gamp, gd, matdenoise, model, state_evolution  # noqa: F401
