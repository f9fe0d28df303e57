"""Exponential map of the round sphere and its derivative in the generator.

``exp_map(X)`` is the map x -> exp_x(X(x)), i.e. the diffeomorphism generated
by a tangent field X composed with the standard embedding.  ``sigma_apply``
is its derivative in X, and ``sigma_inverse`` inverts that derivative node
by node on the tangent plane.
"""

import numpy as np

from .errors import InjectivityRadiusError, NotTangentError, SingularMapError

TANGENT_TOL = 1e-8
COND_MAX = 1e8

__all__ = ["check_tangent", "exp_map", "sigma_apply", "sigma_inverse", "killing_field"]


def _dot(a, b):
    return np.einsum("i...,i...->...", a, b)


def check_tangent(X, grid, tol=1e-10):
    """Raise NotTangentError unless X . x = 0 at every node."""
    err = np.abs(_dot(X, grid.position))
    if err.max(initial=0.0) > tol * max(1.0, float(np.abs(X).max(initial=0.0))):
        raise NotTangentError(f"field has normal component up to {err.max():.3e}")
    return X


def _norm(X, grid):
    r = np.sqrt(_dot(X, X))
    if np.any(r >= np.pi):
        raise InjectivityRadiusError(f"|X| reaches {r.max():.6g} >= pi")
    return r


def _sinc(r):
    return np.sinc(r / np.pi)


def _c(r):
    # (cos r - sin r / r) / r^2 with its Taylor series near zero
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    out = (np.cos(rs) - np.sin(rs) / rs) / rs**2
    r2 = r * r
    return np.where(small, -1.0 / 3.0 + r2 / 30.0 - r2 * r2 / 840.0, out)


def exp_map(X, grid):
    """Pointwise cos|X| x + (sin|X|/|X|) X, shape (3, nlat, nlon)."""
    X = np.asarray(X, float)
    r = _norm(X, grid)
    return np.cos(r) * grid.position + _sinc(r) * X


def sigma_apply(X, Y, grid):
    """Directional derivative of ``exp_map`` at X in direction Y."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    r = _norm(X, grid)
    s = _sinc(r)
    xy = _dot(X, Y)
    return -s * xy * grid.position + _c(r) * xy * X + s * Y


def sigma_inverse(X, xi, grid):
    """Tangent field Y with ``sigma_apply(X, Y) = xi``.

    Raises
    ------
    NotTangentError
        If xi has a normal component along exp_map(X) above 1e-8.
    SingularMapError
        If the pointwise 3x2 system has condition number above 1e8.
    """
    xi = np.asarray(xi, float)
    target = exp_map(X, grid)
    normal = np.abs(_dot(xi, target))
    scale = max(1.0, float(np.abs(xi).max(initial=0.0)))
    if normal.max(initial=0.0) > TANGENT_TOL * scale:
        raise NotTangentError(f"target has normal component up to {normal.max():.3e}")
    cols = np.stack([sigma_apply(X, grid.e_theta, grid), sigma_apply(X, grid.e_phi, grid)])
    # node-major 3x2 systems
    M = np.moveaxis(cols, (0, 1), (-1, -2)).reshape(-1, 3, 2)
    rhs = np.moveaxis(xi, 0, -1).reshape(-1, 3)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cond = s[:, 0] / s[:, 1]
    if not np.all(cond <= COND_MAX):
        raise SingularMapError(f"pointwise Sigma has condition number {np.nanmax(cond):.3e}")
    coef = np.einsum("nji,nj->ni", U, rhs) / s
    ab = np.einsum("nji,nj->ni", Vt, coef).reshape(grid.shape + (2,))
    return ab[..., 0] * grid.e_theta + ab[..., 1] * grid.e_phi


def killing_field(grid, axis=(0.0, 0.0, 1.0), angle=1.0):
    """Rotation generator a x position, scaled so the equator moves by ``angle``."""
    a = np.asarray(axis, float)
    a = angle * a / np.linalg.norm(a)
    p = grid.position
    return np.stack(
        [a[1] * p[2] - a[2] * p[1], a[2] * p[0] - a[0] * p[2], a[0] * p[1] - a[1] * p[0]]
    )
