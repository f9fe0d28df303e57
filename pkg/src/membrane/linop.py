"""Linearised elliptic operators about (distorted) spheres and their spectra.

All operators act on scalar functions on the reference sphere and are
symmetric in L^2(g0), so the harmonic coefficient inner product (Parseval)
is the natural one for Krylov methods.
"""

from dataclasses import dataclass

import numpy as np

from . import harmonics as sh
from .errors import NoConvergenceError
from .gauge import check_tangent, exp_map
from .geometry import KAPPA, Embedding, geometry_of

MEAN_COEFF = 6.0 / (4.0 * np.pi)

__all__ = [
    "apply_L_id",
    "L_id_multipliers",
    "PhiOperator",
    "apply_L_phi",
    "apply_L_pert",
    "PertOperator",
    "ZeroModeProjection",
    "p0_project",
    "operator_matrix",
    "rayleigh_extremes",
    "lanczos_top",
    "spectrum_report",
]


def L_id_multipliers(lmax):
    l = np.asarray(sh.degrees(lmax), float)
    out = 2.0 - l * (l + 1.0)
    out[l == 0] = -4.0
    return out


def apply_L_id(phi):
    """Linearised operator at the identity, diagonal in the harmonic basis."""
    return sh.SpectralField(phi.lmax, phi.coeffs * L_id_multipliers(phi.lmax))


def _distorted(X, grid):
    if X is None:
        X = np.zeros((3,) + grid.shape)
    check_tangent(X, grid, tol=1e-8)
    return Embedding(exp_map(X, grid), grid, grid.max_lmax)


def _as_values(phi, grid):
    if isinstance(phi, sh.SpectralField):
        return sh.synthesize(phi, grid)
    return np.asarray(phi, float)


class PhiOperator:
    """L_phi = (dmu_phi/dmu0)(Lap_{g(i_phi)} + 2 - (6/4pi) int . dmu_phi) for fixed X.

    Geometry of i_phi = exp_map(X) is computed once at construction.
    """

    def __init__(self, X, grid):
        self.grid = grid
        self.X = X
        self.embedding = _distorted(X, grid)
        self.geo = geometry_of(self.embedding)

    def __call__(self, phi):
        v = _as_values(phi, self.grid)
        geo = self.geo
        lap = geo.laplace_beltrami(v)
        return geo.area_ratio * (lap + 2.0 * v - MEAN_COEFF * geo.integrate(v))

    def spectral(self, lmax):
        """The Galerkin form c -> analyze(L synthesize(c)) at band ``lmax``."""

        def op(c):
            return sh.analyze(self(c), self.grid, lmax)

        return op

    def zero_modes(self):
        return ZeroModeProjection(self.geo.N, self.grid)


def apply_L_phi(X, phi, grid):
    return PhiOperator(X, grid)(phi)


class PertOperator:
    """L(phi, u) for w = i_phi + a + u with velocity u_t, at one time slice.

        A [Lap_g + |h|^2 + Lam H - kappa/V^2 int . dmu(w)] - |d_t N|^2
    """

    def __init__(self, X, a, u, u_t, grid, kappa=KAPPA):
        self.grid = grid
        base = _distorted(X, grid).values
        a = np.zeros(3) if a is None else np.asarray(a, float)
        u = 0.0 if u is None else np.asarray(u, float)
        w = base + a[:, None, None] + u
        self.geo = geo = geometry_of(Embedding(w, grid, grid.max_lmax))
        lam = -geo.H + kappa / geo.volume
        self.potential = geo.h_norm2 + lam * geo.H
        self.mean_coeff = kappa / geo.volume**2
        if u_t is None:
            self.dtN2 = np.zeros(grid.shape)
        else:
            d = sh.derivatives(sh.analyze(np.asarray(u_t, float), grid, grid.max_lmax), grid)
            # N . d_j w_t, then d_t N = -g^ij (N . d_j w_t) d_i w
            nd = np.stack([np.sum(geo.N * d[1], axis=0), np.sum(geo.N * d[2], axis=0)])
            dtN = -geo.gradient(nd[0], nd[1])
            self.dtN2 = np.sum(dtN**2, axis=0)

    def __call__(self, phi):
        v = _as_values(phi, self.grid)
        geo = self.geo
        body = geo.laplace_beltrami(v) + self.potential * v - self.mean_coeff * geo.integrate(v)
        return geo.area_ratio * body - self.dtN2 * v

    def spectral(self, lmax):
        return lambda c: sh.analyze(self(c), self.grid, lmax)


def apply_L_pert(X, a, u, u_t, phi, grid, kappa=KAPPA):
    return PertOperator(X, a, u, u_t, grid, kappa)(phi)


@dataclass(eq=False)
class ZeroModeProjection:
    """Orthogonal L^2(g0) projection onto span{N^1, N^2, N^3}.

    ``gram`` is the full 3x3 Gram matrix, so the projection is exact even
    when the N^k are not mutually orthogonal (X != 0).
    """

    basis: np.ndarray
    grid: sh.SphGrid

    def __post_init__(self):
        self.gram = np.array(
            [[sh.inner(self.basis[k], self.basis[j], self.grid) for j in range(3)] for k in range(3)]
        )

    def coefficients(self, phi):
        rhs = np.array([sh.inner(phi, self.basis[k], self.grid) for k in range(3)])
        return np.linalg.solve(self.gram, rhs)

    def __call__(self, phi):
        phi = _as_values(phi, self.grid)
        c = self.coefficients(phi)
        return c, np.einsum("k,k...->...", c, self.basis)

    def spectral_basis(self, lmax):
        """Orthonormal coefficient vectors spanning the analysed zero modes."""
        B = sh.analyze(self.basis, self.grid, lmax).coeffs.T
        q, _ = np.linalg.qr(B)
        return q.T


def p0_project(X, phi, grid):
    """Return (c, proj) with proj = sum_k c_k N^k(i_phi)."""
    return ZeroModeProjection(_distorted(X, grid).values, grid)(phi)


def operator_matrix(op, lmax, symmetrize=True):
    """Dense matrix of a coefficient-space operator on degree <= lmax."""
    n = sh.ncoeffs(lmax)
    cols = op(sh.SpectralField(lmax, np.eye(n)))
    M = np.asarray(cols.coeffs if isinstance(cols, sh.SpectralField) else cols).T
    return 0.5 * (M + M.T) if symmetrize else M


def _as_coeff_op(op, lmax):
    def apply(v):
        out = op(sh.SpectralField(lmax, v))
        return out.coeffs if isinstance(out, sh.SpectralField) else np.asarray(out)

    return apply


def lanczos_top(op, lmax, deflate=None, tol=1e-8, maxiter=None, seed=0):
    """Largest eigenvalue by Lanczos with full reorthogonalisation.

    Returns (value, vector, residual, iterations).  ``deflate`` is a
    ZeroModeProjection or an array of orthonormal coefficient rows whose
    span is removed from the Krylov space.
    """
    n = sh.ncoeffs(lmax)
    apply = _as_coeff_op(op, lmax)
    if isinstance(deflate, ZeroModeProjection):
        D = deflate.spectral_basis(lmax)
    elif deflate is None:
        D = np.zeros((0, n))
    else:
        D = np.atleast_2d(np.asarray(deflate, float))
    maxiter = n if maxiter is None else min(maxiter, n)

    def project(v):
        return v - D.T @ (D @ v) if len(D) else v

    rng = np.random.default_rng(seed)
    q = project(rng.standard_normal(n))
    q /= np.linalg.norm(q)
    Q = [q]
    alpha, beta = [], []
    theta, s, resid = np.nan, None, np.inf
    for k in range(maxiter):
        v = project(apply(Q[-1]))
        a = float(Q[-1] @ v)
        alpha.append(a)
        Qm = np.array(Q)
        v = v - Qm.T @ (Qm @ v)
        v = v - Qm.T @ (Qm @ v)
        v = project(v)
        bnext = float(np.linalg.norm(v))
        T = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        evals, evecs = np.linalg.eigh(T)
        theta, s = evals[-1], evecs[:, -1]
        resid = abs(bnext * s[-1])
        scale = max(abs(theta), float(np.max(np.abs(evals))), 1.0)
        if resid <= tol * scale or bnext <= 1e-14 * scale:
            return float(theta), Qm.T @ s, resid, k + 1
        beta.append(bnext)
        Q.append(v / bnext)
    if len(Q) > len(alpha):
        Q.pop()
    raise NoConvergenceError(
        f"Lanczos did not converge in {maxiter} steps (last Rayleigh quotient {theta:.12g})",
        last=float(theta),
        residual=float(resid),
    )


def rayleigh_extremes(op, lmax, deflate=None, tol=1e-8, maxiter=None):
    """Top eigenvalue of a symmetric coefficient-space operator."""
    return lanczos_top(op, lmax, deflate, tol, maxiter)[0]


def spectrum_report(op, lmax):
    """Rows (index, eigenvalue, residual) of the dense Galerkin matrix, descending."""
    M = operator_matrix(op, lmax)
    evals, evecs = np.linalg.eigh(M)
    order = np.argsort(evals)[::-1]
    rows = []
    for i, k in enumerate(order):
        v = evecs[:, k]
        res = float(np.linalg.norm(M @ v - evals[k] * v))
        rows.append((i, float(evals[k]), res))
    return rows
