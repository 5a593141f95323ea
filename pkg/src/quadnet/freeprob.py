"""Spectral densities of free convolutions mu_t = mu_prior (+) semicircle(t).

The measures handled here are the asymptotic eigenvalue laws of
S + sqrt(t) * GOE, where S is a sample-covariance-type matrix whose limiting
law is a (generalized) Marchenko-Pastur distribution with aspect ratio kappa.
Everything downstream (matrix denoising, state evolution, message passing)
consumes the objects built here: Stieltjes transforms, densities on adaptive
grids, support edges, Hilbert transforms, and the log potential
Sigma(mu) = E log|X - Y|.

Conventions
-----------
Stieltjes transform g(z) = E[1/(X - z)], analytic on the upper half plane,
with Im g(z) > 0 for Im z > 0 and g(z) ~ -1/z as |z| -> infinity.  Densities
are recovered from the boundary values rho(x) = Im g(x + i*eps) / pi.

The R-transform of the prior is R(s) = sum_k p_k * kappa * a_k / (kappa - s * a_k)
(a single atom a=1 gives the plain Marchenko-Pastur R(s) = kappa / (kappa - s)).
Adding a semicircle of variance t adds t*s, so g solves the self-consistency

    z = -t*g + R(-g) - 1/g ,

which is polynomial in g after clearing denominators: a cubic for the plain
MP prior (solved in closed form), degree 2 + #atoms for the general prior
(solved via companion matrices).
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "PriorSpectrum",
    "SpectralDensity",
    "StieltjesSolution",
    "NoAdmissibleRoot",
    "EdgeDetectionFailed",
    "stieltjes",
    "density",
    "support_edges",
    "cube_integral",
    "hilbert",
    "log_potential",
    "sigma_t_derivative",
]

DEFAULT_EPS = 1e-8
DEFAULT_NODES = 2001

# probes used only to classify support gaps; a smaller offset sharpens the
# on/off contrast without affecting the densities returned to callers
_PROBE_EPS = 1e-11
_PROBE_RHO_MIN = 1e-7

_OMEGA = np.exp(2j * np.pi / 3)


class NoAdmissibleRoot(RuntimeError):
    """No root of the self-consistency polynomial lies in the upper half plane."""


class EdgeDetectionFailed(RuntimeError):
    """Support-edge candidates could not be classified into intervals."""


# ============
# prior family
# ============


@dataclasses.dataclass(frozen=True)
class PriorSpectrum:
    """Limiting spectral law of the overlap matrix S = W^T D W / m.

    Parameters
    ----------
    kappa : float
        Aspect ratio m/d of the underlying m x d Gaussian matrix.
    atoms : tuple of (value, weight)
        Atom law of the diagonal variance profile D.  The default single atom
        (1, 1) gives the plain Marchenko-Pastur law of parameter kappa.
    kind : str
        Either ``"marchenko_pastur"`` or ``"compound_poisson"``.  The two kinds
        select independent root-finding code paths (closed-form cubic vs
        companion matrices); with atoms ((1, 1),) they describe the same
        measure, which is exercised as a cross-check in the tests.
    """

    kappa: float
    atoms: tuple[tuple[float, float], ...] = ((1.0, 1.0),)
    kind: str = "marchenko_pastur"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.kind not in ("marchenko_pastur", "compound_poisson"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if len(self.atoms) == 0:
            raise ValueError("need at least one atom")
        for a, p in self.atoms:
            # a = 0 is allowed: an atom at zero contributes nothing to the
            # R-transform, so {(0, 1)} degenerates to a pure point mass whose
            # free convolution with the semicircle is the semicircle itself
            if a < 0 or not np.isfinite(a) or p <= 0:
                raise ValueError(
                    f"atom values must be finite and >= 0 with positive weights,"
                    f" got ({a}, {p})"
                )
        wsum = sum(p for _, p in self.atoms)
        if abs(wsum - 1.0) > 1e-12:
            raise ValueError(f"atom weights must sum to 1, got {wsum!r}")
        if self.kind == "marchenko_pastur" and self.atoms != ((1.0, 1.0),):
            raise ValueError("marchenko_pastur kind fixes atoms to ((1, 1),)")

    @classmethod
    def marchenko_pastur(cls, kappa: float) -> "PriorSpectrum":
        return cls(kappa=float(kappa))

    @classmethod
    def compound_poisson(cls, kappa, atoms) -> "PriorSpectrum":
        atoms = tuple((float(a), float(p)) for a, p in atoms)
        return cls(kappa=float(kappa), atoms=atoms, kind="compound_poisson")

    # --- moments -----------------------------------------------------------

    @property
    def mean_atom(self) -> float:
        """m_a = E[a], first moment of the variance profile."""
        return sum(a * p for a, p in self.atoms)

    @property
    def second_moment_atom(self) -> float:
        """c_a = E[a^2]."""
        return sum(a * a * p for a, p in self.atoms)

    @property
    def mean(self) -> float:
        return self.mean_atom

    @property
    def variance(self) -> float:
        return self.second_moment_atom / self.kappa

    @property
    def second_moment(self) -> float:
        return self.mean_atom**2 + self.second_moment_atom / self.kappa

    def r_transform(self, s):
        """R(s) = sum_k p_k kappa a_k / (kappa - s a_k)."""
        out = 0.0
        for a, p in self.atoms:
            out = out + p * self.kappa * a / (self.kappa - s * a)
        return out


@dataclasses.dataclass(frozen=True)
class StieltjesSolution:
    """Admissible solution g(z) of the self-consistency equation at one z."""

    z: complex
    g: complex
    t: float
    residual: float


# =======================
# polynomial root finding
# =======================


def _selfcons(prior, t, z, g):
    """Residual F(g) = z + t g + 1/g - R(-g); zero at every branch of g(z)."""
    return z + t * g + 1.0 / g - prior.r_transform(-g)


def _coeffs_desc(prior, t, z):
    """Descending coefficients of the cleared polynomial P_z(g), shape (M, D+1)."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if prior.kind == "marchenko_pastur":
        kappa = prior.kappa
        one = np.ones_like(z)
        if t != 0.0:
            cols = [t * one, z + t * kappa, z * kappa + 1.0 - kappa, kappa * one]
        else:
            cols = [z, z * kappa + 1.0 - kappa, kappa * one]
        return np.stack(cols, axis=-1)
    acoef, bcoef = _poly_ab(prior, t)
    deg = len(acoef) - 1 if t != 0.0 else len(bcoef) - 1
    acoef = acoef[: deg + 1]  # top entries vanish when t = 0
    # atoms at zero lower the degree: top coefficients are exact zeros then
    while (
        deg > 1
        and acoef[deg] == 0.0
        and (deg >= len(bcoef) or bcoef[deg] == 0.0)
    ):
        deg -= 1
        acoef = acoef[: deg + 1]
    coeffs = np.zeros((len(z), deg + 1), dtype=complex)
    coeffs[:, : len(acoef)] += acoef
    coeffs[:, : len(bcoef)] += z[:, None] * bcoef
    return coeffs[:, ::-1]


def _newton_polish(prior, t, z, g, steps=2):
    """Safeguarded Newton steps on the cleared polynomial (Horner form).

    Stable where the analytic root formulas lose the small root (large |z|,
    tiny t).  Steps are only accepted when they reduce |P|: near collided
    root pairs (square-root edges) plain Newton stalls at the pair midpoint
    and would otherwise corrupt an already-accurate root.
    """
    coeffs = _coeffs_desc(prior, t, z)

    def horner(gv):
        p = np.zeros_like(gv)
        dp = np.zeros_like(gv)
        for k in range(coeffs.shape[-1]):
            dp = dp * gv + p
            p = p * gv + coeffs[..., k]
        return p, dp

    p0, dp0 = horner(g)
    for _ in range(steps):
        with np.errstate(all="ignore"):
            step = p0 / dp0
        cand = g - np.where(np.isfinite(step), step, 0.0)
        p1, dp1 = horner(cand)
        better = np.abs(p1) < np.abs(p0)
        g = np.where(better, cand, g)
        p0 = np.where(better, p1, p0)
        dp0 = np.where(better, dp1, dp0)
    return g


def _cardano(c3, c2, c1, c0):
    """All three roots of c3 g^3 + c2 g^2 + c1 g + c0 with complex coefficients.

    Vectorized over the coefficient arrays; returns shape (..., 3).
    """
    b = c2 / c3
    c = c1 / c3
    d = c0 / c3
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    s = np.sqrt(0.25 * q * q + p**3 / 27.0 + 0j)
    u3a = -0.5 * q + s
    u3b = -0.5 * q - s
    u3 = np.where(np.abs(u3a) >= np.abs(u3b), u3a, u3b)
    u = u3 ** (1.0 / 3.0)
    # triple-root degeneracy: fall back to a tiny offset, Newton cleans it up
    u = np.where(np.abs(u) < 1e-100, 1e-100 + 0j, u)
    roots = []
    for k in range(3):
        w = u * _OMEGA**k
        roots.append(w - p / (3.0 * w) - b / 3.0)
    return np.stack(roots, axis=-1)


def _quadratic(c2, c1, c0):
    """Both roots of c2 g^2 + c1 g + c0, stable in complex arithmetic."""
    disc = np.sqrt(c1 * c1 - 4.0 * c2 * c0 + 0j)
    # pick the sign that avoids cancellation in c1 + disc
    flip = np.real(np.conj(c1) * disc) < 0.0
    disc = np.where(flip, -disc, disc)
    qq = -0.5 * (c1 + disc)
    with np.errstate(all="ignore"):
        r1 = np.where(np.abs(c2) > 0, qq / c2, -c0 / c1)
        r2 = np.where(np.abs(qq) > 0, c0 / qq, r1)
    return np.stack([r1, r2], axis=-1)


def _poly_ab(prior, t):
    """Ascending coefficients (A, B) with P_z(g) = A(g) + z * B(g) the cleared
    self-consistency polynomial for the compound-Poisson prior."""
    kappa = prior.kappa
    pi = np.array([1.0])
    for a, _ in prior.atoms:
        pi = np.convolve(pi, [kappa, a])
    bcoef = np.concatenate([[0.0], pi])  # g * Pi(g)
    deg = len(pi) + 2
    acoef = np.zeros(deg)
    if t != 0.0:
        acoef[2 : 2 + len(pi)] += t * pi
    acoef[: len(pi)] += pi
    for i, (a, p) in enumerate(prior.atoms):
        pi_no = np.array([1.0])
        for j, (aj, _) in enumerate(prior.atoms):
            if j != i:
                pi_no = np.convolve(pi_no, [kappa, aj])
        acoef[1 : 1 + len(pi_no)] -= p * kappa * a * pi_no
    return acoef, bcoef


def _companion_roots(coeffs_desc):
    """Batched np.roots: eigenvalues of the stacked companion matrices.

    coeffs_desc has shape (M, D+1), descending powers, nonzero leading column.
    """
    c = coeffs_desc / coeffs_desc[:, :1]
    m, dp1 = c.shape
    deg = dp1 - 1
    comp = np.zeros((m, deg, deg), dtype=complex)
    idx = np.arange(deg - 1)
    comp[:, idx + 1, idx] = 1.0
    comp[:, 0, :] = -c[:, 1:]
    return np.linalg.eigvals(comp)


def _all_roots(prior, t, z):
    """All branches of g(z), shape (M, deg).  z is a complex array.

    For t much smaller than the other coefficient scales the leading (t g^3)
    term makes the direct root formulas ill-conditioned; in that regime the
    reversed polynomial in w = 1/g is well-scaled, so solve that and invert.
    The huge spurious branch then comes out as w ~ 0 (inaccurate/inf), which
    is harmless because it is never the admissible pick.
    """
    coeffs = _coeffs_desc(prior, t, z)
    invert = t != 0.0 and t < 1e-4 * (1.0 + float(np.mean(np.abs(z))))
    if invert:
        coeffs = coeffs[:, ::-1]
    if prior.kind == "marchenko_pastur":
        if t != 0.0:
            roots = _cardano(coeffs[:, 0], coeffs[:, 1], coeffs[:, 2], coeffs[:, 3])
        else:
            roots = _quadratic(coeffs[:, 0], coeffs[:, 1], coeffs[:, 2])
    else:
        roots = _companion_roots(coeffs)
    if invert:
        with np.errstate(all="ignore"):
            roots = 1.0 / roots
        roots = np.where(np.isfinite(roots), roots, -1e100 - 1e100j)
    return roots


def _homotopy_solve(prior, t, x, eps, steps_per_decade=4, polish_each=True):
    """Physical branch of g at z = x + i*eps for real x (vectorized).

    Follows the root from high in the upper half plane, where g ~ -1/z is
    unambiguous, down to the requested offset, always taking the admissible
    root closest to the previous level and polishing with Newton.  Robust on
    and off the support, including inside spectral gaps where spurious
    branches of the polynomial can also lie in the upper half plane.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    scale = 1.0 + np.sqrt(prior.second_moment + max(t, 0.0)) + np.abs(x)
    top = np.maximum(10.0 * scale, 2.0 * eps)
    n_steps = int(
        max(20, steps_per_decade * np.ceil(np.log10(top.max() / eps)))
    )
    ladder = np.exp(
        np.linspace(np.log(top), np.full_like(top, np.log(eps)), n_steps)
    )
    g = -1.0 / (x + 1j * top)
    rows = np.arange(len(x))
    for k in range(n_steps):
        z = x + 1j * ladder[k]
        roots = _all_roots(prior, t, z)
        dist = np.abs(roots - g[:, None])
        # exclude clearly lower-half-plane roots; roots within roundoff of the
        # real axis (off-support points at small heights) are left to the
        # closest-to-previous rule, which is what resolves them correctly
        adm = roots.imag > -1e-6 * (1.0 + np.abs(roots))
        dist_adm = np.where(adm, dist, np.inf)
        pick = np.argmin(dist_adm, axis=1)
        none = ~np.isfinite(dist_adm[rows, pick])
        if np.any(none):
            pick[none] = np.argmin(dist[none], axis=1)
        g = roots[rows, pick]
        if polish_each:
            g = _newton_polish(prior, t, z, g, steps=1)
    g = _newton_polish(prior, t, x + 1j * eps, g, steps=2)
    # at square-root edges the physical root and its conjugate collide as the
    # height shrinks; if polishing landed on the lower partner, flip to the
    # conjugate root (same Re, which is all a collision point determines)
    neg = g.imag < 0.0
    if np.any(neg):
        roots = _all_roots(prior, t, x[neg] + 1j * eps)
        sub = np.arange(int(neg.sum()))
        cand = roots[sub, np.argmin(np.abs(roots - np.conj(g[neg])[:, None]), axis=1)]
        near = np.abs(cand - np.conj(g[neg])) < 1e-5 * (1.0 + np.abs(g[neg]))
        gn = g[neg]
        gn[near] = cand[near]
        g[neg] = gn
    bad = g.imag < -1e-6 * (1.0 + np.abs(g))
    if np.any(bad):
        raise NoAdmissibleRoot(
            f"homotopy ended in the lower half plane at x={x[bad][:3]} (t={t})"
        )
    return g


def _grid_branch(prior, t, x, eps):
    """Physical g on a dense grid spanning one support interval.

    Fast path: on the support the physical root has Im g = pi*rho, which is
    the admissible root of largest imaginary part.  Points where more than
    one root lies in the upper half plane (spurious branch pairs near gaps
    and branch collisions) are re-solved by homotopy, which is unambiguous.
    """
    z = x + 1j * eps
    roots = _all_roots(prior, t, z)
    im = roots.imag
    g = roots[np.arange(len(x)), np.argmax(im, axis=1)]
    n_adm = (im > 1e-13).sum(axis=1)
    ambiguous = n_adm > 1
    if np.any(ambiguous):
        g[ambiguous] = _homotopy_solve(prior, t, x[ambiguous], eps)
    g = _newton_polish(prior, t, z, g, steps=2)
    return g


# ==================
# public operations
# ==================


def stieltjes(prior: PriorSpectrum, t: float, z: complex, eps: float = DEFAULT_EPS):
    """Admissible Stieltjes transform g(z) of mu_t at a single point z.

    Parameters
    ----------
    prior : PriorSpectrum
    t : float
        Variance of the added semicircle part, t >= 0.
    z : complex
        Evaluation point with Im z > 0.

    Returns
    -------
    StieltjesSolution
        Carries g, the offset actually used, and the self-consistency
        residual |z + t g - R(-g) + 1/g|.
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError("stieltjes requires Im z > 0")
    if t < 0:
        raise ValueError("t must be nonnegative")
    g = _homotopy_solve(prior, t, np.array([z.real]), z.imag)[0]
    # the residual mixes terms of size |z| and O(1); finish with Newton in
    # extended precision so cancellation noise stays below the 1e-10 contract
    # even at |z| ~ 1e6
    zl = np.clongdouble(z)
    gl = np.clongdouble(g)
    coeffs = _coeffs_desc(prior, t, np.array([z]))[0].astype(np.clongdouble)
    for _ in range(3):
        p = np.clongdouble(0.0)
        dp = np.clongdouble(0.0)
        for c in coeffs:
            dp = dp * gl + p
            p = p * gl + c
        if dp != 0.0:
            gl = gl - p / dp
    res = abs(_selfcons(prior, np.longdouble(t), zl, gl))
    return StieltjesSolution(z=z, g=complex(gl), t=t, residual=float(res))


def _phi(prior, t, g):
    """Inverse map z = phi(g) = -t g + R(-g) - 1/g on a real branch."""
    return -t * g + prior.r_transform(-g) - 1.0 / g


def _edge_candidates(prior, t):
    """Real critical points of phi and their images z = phi(g).

    phi'(g) = 0 cleared of denominators is a polynomial of degree
    2 + 2 * #atoms; every support edge is among its real critical values.
    """
    kappa = prior.kappa
    pi = np.array([1.0])
    for a, _ in prior.atoms:
        pi = np.convolve(pi, [kappa, a])
    pi2 = np.convolve(pi, pi)
    deg = len(pi2) + 2
    poly = np.zeros(deg)
    poly[2 : 2 + len(pi2)] -= t * pi2
    poly[: len(pi2)] += pi2
    for i, (a, p) in enumerate(prior.atoms):
        pi_no = np.array([1.0])
        for j, (aj, _) in enumerate(prior.atoms):
            if j != i:
                pi_no = np.convolve(pi_no, [kappa, aj])
        pin2 = np.convolve(pi_no, pi_no)
        poly[2 : 2 + len(pin2)] -= p * kappa * a**2 * pin2
    roots = np.roots(poly[::-1])
    real = roots[np.abs(roots.imag) <= 1e-8 * (1.0 + np.abs(roots))].real
    # drop critical points sitting on poles of phi
    keep = np.abs(real) > 1e-12
    for a, _ in prior.atoms:
        if a > 0:
            keep &= np.abs(real + kappa / a) > 1e-12
    real = real[keep]
    if real.size == 0:
        raise EdgeDetectionFailed(f"no real critical points for t={t}")
    zc = _phi(prior, t, real)
    zc = np.sort(zc[np.isfinite(zc)])
    # dedupe collisions
    out = [zc[0]]
    for v in zc[1:]:
        if v - out[-1] > 1e-11 * (1.0 + abs(v)):
            out.append(v)
    return np.array(out)


def _probe_rho(prior, t, x):
    g = _homotopy_solve(
        prior, t, np.atleast_1d(x), _PROBE_EPS, steps_per_decade=3, polish_each=False
    )
    return g.imag / np.pi


def support_edges(prior: PriorSpectrum, t: float, refine: bool = True):
    """Support intervals of mu_t = prior (+) semicircle(t), t > 0.

    Candidate edges are the real critical values of the inverse map
    z = phi(g); candidates are classified by probing the density between
    consecutive candidates, and each surviving edge is confirmed by bisection
    on the on/off-support indicator to absolute tolerance 1e-10.

    With refine=False the confirmation bisection is skipped and the critical
    values are returned as they are.  They already solve the edge equation to
    machine precision, so this only drops the independent cross-check; hot
    loops that build many densities use it.

    Returns
    -------
    tuple of (left, right) pairs, ascending.
    """
    if t <= 0:
        raise ValueError("support_edges requires t > 0 (t = 0 edges are analytic)")
    zc = _edge_candidates(prior, t)
    if len(zc) == 2:
        # a bounded nonempty support with exactly two candidates is a single
        # interval; no classification probes needed
        edges = [(zc[0], True), (zc[1], False)]
    else:
        span = max(zc[-1] - zc[0], 1.0)
        probes = np.concatenate(
            [
                [zc[0] - 0.1 * span - 1.0],
                0.5 * (zc[1:] + zc[:-1]),
                [zc[-1] + 0.1 * span + 1.0],
            ]
        )
        on = _probe_rho(prior, t, probes) > _PROBE_RHO_MIN
        if on[0] or on[-1]:
            raise EdgeDetectionFailed(
                "support appears unbounded; edge candidates are wrong"
            )
        edges = []
        for i in range(len(zc)):
            if on[i] != on[i + 1]:
                edges.append((zc[i], bool(on[i + 1])))  # True: left edge
        if len(edges) % 2 != 0 or any(
            edges[i][1] == edges[i + 1][1] for i in range(len(edges) - 1)
        ):
            raise EdgeDetectionFailed(
                f"inconsistent on/off pattern at t={t}: {edges}"
            )
    refined = (
        _refine_edges(prior, t, np.array([e for e, _ in edges]), zc)
        if refine
        else [e for e, _ in edges]
    )
    intervals = tuple(
        (refined[2 * i], refined[2 * i + 1]) for i in range(len(refined) // 2)
    )
    if prior.kind == "marchenko_pastur" and len(intervals) > 2:
        raise EdgeDetectionFailed(
            f"MP prior cannot have {len(intervals)} support intervals"
        )
    return intervals


def _has_complex_pair(prior, t, x):
    """Whether the branch polynomial at real z = x has a complex root pair.

    Inside a window around a candidate edge that excludes every other
    candidate this is an exact support indicator: branches collide and leave
    the real axis precisely at the edge, and any other branch collision point
    would be a candidate itself.  Unlike a density probe at x + i*eps it has
    no offset bias.
    """
    roots = _all_roots(prior, t, np.asarray(x, dtype=complex))
    return (roots.imag > 1e-7 * (1.0 + np.abs(roots))).any(axis=1)


def _refine_edges(prior, t, e, zc):
    """Bisection on the branch-collision indicator around all edges at once."""
    gaps = np.diff(zc)
    local = gaps.min() if gaps.size else 1.0
    delta = np.minimum(1e-6 * (1.0 + np.abs(e)), 0.25 * local)
    lo, hi = e - delta, e + delta
    on = lambda x: _has_complex_pair(prior, t, x)
    on_lo, on_hi = on(lo), on(hi)
    # where the indicator does not flip across the window the candidate is
    # already exact to machine precision; keep it as is
    active = on_lo != on_hi
    out = e.copy()
    while np.any(active) and np.max(hi[active] - lo[active]) > 1e-10:
        mid = 0.5 * (lo + hi)
        same = on(mid[active]) == on_lo[active]
        lo[active] = np.where(same, mid[active], lo[active])
        hi[active] = np.where(same, hi[active], mid[active])
    out[active] = 0.5 * (lo[active] + hi[active])
    return out


def _simpson_weights(n):
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson rule needs an odd number of nodes >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


@dataclasses.dataclass
class SpectralDensity:
    """Density of mu_t on its support, sampled on edge-refined grids.

    Per interval [l, u] the grid is x = l + (u - l) sin^2(theta) with theta
    uniform on [0, pi/2]; this clusters nodes at the square-root edges and
    makes composite Simpson in theta spectrally accurate for edge integrands.

    Attributes
    ----------
    intervals : tuple of (l, u)
    x, rho, re_g : tuples of arrays, one per interval
        Grid, density, and Re g(x + i eps) (the negative Hilbert transform).
    atom_mass_at_zero : float
        Only nonzero for the t = 0 Marchenko-Pastur law with kappa < 1.
    """

    prior: PriorSpectrum
    t: float
    eps: float
    intervals: tuple
    x: tuple
    rho: tuple
    re_g: tuple
    atom_mass_at_zero: float = 0.0

    def _weights(self, i):
        l, u = self.intervals[i]
        n = len(self.x[i])
        theta = np.linspace(0.0, 0.5 * np.pi, n)
        h = theta[1] - theta[0]
        return _simpson_weights(n) * h * (u - l) * np.sin(2.0 * theta)

    def integrate(self, values_per_interval):
        """Sum_i int values_i(x) dx over the support intervals."""
        out = 0.0
        for i, v in enumerate(values_per_interval):
            out += float(np.dot(self._weights(i), v))
        return out

    def mass(self):
        return self.integrate(self.rho) + self.atom_mass_at_zero

    def mean(self):
        return self.integrate([r * x for r, x in zip(self.rho, self.x)])

    def second_moment(self):
        return self.integrate([r * x * x for r, x in zip(self.rho, self.x)])

    def cube_integral(self):
        """int rho(x)^3 dx over the continuous part."""
        return self.integrate([r**3 for r in self.rho])

    def hilbert_on_grid(self):
        """h(x) = PV int rho(s)/(x - s) ds = -Re g on the stored grid."""
        return tuple(-rg for rg in self.re_g)

    def interp(self, lam, values_per_interval, outside=np.nan):
        """Piecewise-linear interpolation of per-interval node values at lam;
        points outside every interval get `outside`."""
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        out = np.full(lam.shape, outside, dtype=float)
        for (l, u), xg, vg in zip(self.intervals, self.x, values_per_interval):
            m = (lam >= l) & (lam <= u)
            if np.any(m):
                out[m] = np.interp(lam[m], xg, vg)
        return out

    def to_csv(self, path, header_lines=()):
        import csv

        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["interval_index", "x", "density"])
            for i, (xg, rg) in enumerate(zip(self.x, self.rho)):
                for xv, rv in zip(xg, rg):
                    writer.writerow([i, f"{xv:.12g}", f"{rv:.12g}"])


def _mp_analytic_density(prior, n_nodes, eps):
    """t = 0 closed form: bulk kappa sqrt((l+ - x)(x - l-))/(2 pi x) plus a
    point mass max(1 - kappa, 0) at zero."""
    kappa = prior.kappa
    lam_m = (1.0 - kappa**-0.5) ** 2
    lam_p = (1.0 + kappa**-0.5) ** 2
    theta = np.linspace(0.0, 0.5 * np.pi, n_nodes)
    x = lam_m + (lam_p - lam_m) * np.sin(theta) ** 2
    with np.errstate(all="ignore"):
        rho = kappa * np.sqrt(np.maximum((lam_p - x) * (x - lam_m), 0.0)) / (2 * np.pi * x)
    rho = np.where(np.isfinite(rho), rho, 0.0)
    g = _grid_branch(prior, 0.0, x, eps)
    return SpectralDensity(
        prior=prior,
        t=0.0,
        eps=eps,
        intervals=((lam_m, lam_p),),
        x=(x,),
        rho=(rho,),
        re_g=(g.real,),
        atom_mass_at_zero=max(1.0 - kappa, 0.0),
    )


def density(
    prior: PriorSpectrum,
    t: float,
    n_nodes: int = DEFAULT_NODES,
    eps: float = DEFAULT_EPS,
    refine_edges: bool = True,
) -> SpectralDensity:
    """Density of mu_t = prior (+) semicircle(t) on edge-adapted grids.

    For t > 0 the support is located with `support_edges` and the admissible
    Stieltjes branch is evaluated at x + i*eps on each interval.  t = 0 falls
    back to the closed-form Marchenko-Pastur density (prior kind must be MP;
    the generalized law has no closed form at t = 0).

    On intervals narrower than eps / 1e-5 the offset is lowered to 1e-5 times
    the interval width, so that very thin bulks (t well below 1e-6) are not
    smeared by the evaluation offset itself.

    Parameters
    ----------
    n_nodes : int
        Grid nodes per interval (odd; even values are bumped by one).
    refine_edges : bool
        Forwarded to `support_edges`; hot loops pass False.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if n_nodes % 2 == 0:
        n_nodes += 1
    if t == 0.0:
        if prior.kind != "marchenko_pastur":
            raise ValueError("t = 0 density is only available for the MP prior")
        return _mp_analytic_density(prior, n_nodes, eps)
    intervals = support_edges(prior, t, refine=refine_edges)
    xs, rhos, regs = [], [], []
    for l, u in intervals:
        theta = np.linspace(0.0, 0.5 * np.pi, n_nodes)
        x = l + (u - l) * np.sin(theta) ** 2
        g = _grid_branch(prior, t, x, min(eps, 1e-5 * (u - l)))
        xs.append(x)
        rhos.append(np.maximum(g.imag / np.pi, 0.0))
        regs.append(g.real)
    return SpectralDensity(
        prior=prior,
        t=t,
        eps=eps,
        intervals=intervals,
        x=tuple(xs),
        rho=tuple(rhos),
        re_g=tuple(regs),
    )


def cube_integral(dens: SpectralDensity) -> float:
    """int rho^3 over the continuous part of the measure."""
    return dens.cube_integral()


def hilbert(prior, t, lam, dens: SpectralDensity | None = None, eps: float = DEFAULT_EPS):
    """Principal-value transform h(lam) = PV int rho(s)/(lam - s) ds.

    Equal to -Re g(lam + i*eps); valid at every real lam, on or off the
    support.  When a SpectralDensity for the same (prior, t) is supplied its
    stored grid is used inside the support and only off-support points are
    solved fresh.
    """
    lam = np.asarray(lam, dtype=float)
    scalar = lam.ndim == 0
    lam = np.atleast_1d(lam)
    out = np.empty(lam.shape)
    if dens is not None:
        vals = dens.interp(lam, dens.hilbert_on_grid())
        inside = np.isfinite(vals)
        out[inside] = vals[inside]
    else:
        inside = np.zeros(lam.shape, dtype=bool)
    if np.any(~inside):
        g = _homotopy_solve(prior, t, lam[~inside], eps)
        out[~inside] = -g.real
    return float(out[0]) if scalar else out


def log_potential(dens: SpectralDensity) -> float:
    """Sigma(mu) = E log|X - Y| with X, Y independent draws from mu.

    The inner integral against the piecewise-linear density is done with the
    exact antiderivative of (a + b y) log|x - y|, so the log singularity is
    integrated analytically; the outer integral uses the edge-adapted Simpson
    rule.  Only densities without an atom are supported (the atom would make
    Sigma divergent).
    """
    if dens.atom_mass_at_zero != 0.0:
        raise ValueError("log potential diverges for densities with an atom")
    xl_list, xr_list, rl_list, rr_list = [], [], [], []
    for xg, rg in zip(dens.x, dens.rho):
        xl_list.append(xg[:-1])
        xr_list.append(xg[1:])
        rl_list.append(rg[:-1])
        rr_list.append(rg[1:])
    xl = np.concatenate(xl_list)
    xr = np.concatenate(xr_list)
    rl = np.concatenate(rl_list)
    rr = np.concatenate(rr_list)
    b = (rr - rl) / (xr - xl)

    def xlog(u):
        with np.errstate(all="ignore"):
            v = u * np.log(np.abs(u))
        return np.where(u == 0.0, 0.0, v)

    def xxlog(u):
        with np.errstate(all="ignore"):
            v = 0.5 * u * u * np.log(np.abs(u)) - 0.25 * u * u
        return np.where(u == 0.0, 0.0, v)

    total = 0.0
    for i, (xg, rg) in enumerate(zip(dens.x, dens.rho)):
        w = dens._weights(i)
        kernel = np.empty(len(xg))
        chunk = 128
        for s in range(0, len(xg), chunk):
            x0 = xg[s : s + chunk][:, None]
            u1 = xl[None, :] - x0
            u2 = xr[None, :] - x0
            c0 = rl[None, :] + b[None, :] * (x0 - xl[None, :])
            seg = c0 * (xlog(u2) - u2 - xlog(u1) + u1) + b[None, :] * (
                xxlog(u2) - xxlog(u1)
            )
            kernel[s : s + chunk] = seg.sum(axis=1)
        total += float(np.dot(w, rg * kernel))
    return total


def sigma_t_derivative(prior, t, n_nodes: int = DEFAULT_NODES) -> float:
    """d Sigma(mu_t) / dt = (2 pi^2 / 3) int rho_t^3.

    The identity follows from the Burgers evolution of the density under
    semicircular flow; validated against finite differences of
    `log_potential` in the tests.
    """
    if t <= 0:
        raise ValueError("sigma_t_derivative requires t > 0")
    return (2.0 * np.pi**2 / 3.0) * density(prior, t, n_nodes=n_nodes).cube_integral()
