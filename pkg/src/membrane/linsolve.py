"""Modewise solution of the damped linearised Cauchy problem and the (Y, c, v) split.

Every mode of the scalar problem obeys

    a'' + b a' + lam a = g(t),        lam >= 0,

whose propagators are written in the stable form

    K(t) = exp(-b t/2) t sinhc(d t/2),
    A(t) = exp(-b t/2) (cosh(d t/2) + (b/2) t sinhc(d t/2)),    d = sqrt(b^2 - 4 lam),

so the critically damped case, the lam = 0 zero modes (A = 1,
K = (1 - e^{-bt})/b) and the b = 0 limit (K = t) need no special branches.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline

from . import harmonics as sh
from .errors import ForcingNotDecayingError, InsufficientDataError
from .fitting import decay_fit
from .gauge import exp_map, sigma_apply, sigma_inverse
from .linop import L_id_multipliers, PhiOperator, operator_matrix

__all__ = [
    "beta",
    "ModeRoots",
    "mode_roots",
    "mode_kernels",
    "ModalBasis",
    "Forcing",
    "LinearTrajectory",
    "evolve_linear",
    "evolve_tangential",
    "TripleSplit",
    "triple_split",
    "exp_map",
    "sigma_apply",
    "sigma_inverse",
]

# series switch for the propagators, in |d t / 2|
_SERIES_Z = 1e-2
# truncation of integrals to infinity: exp(-beta T) < 1e-12
_TAIL = np.log(1e12)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def beta(b):
    """Guaranteed decay rate: (b - sqrt(b^2 - 4))/3 for b >= 2, b/3 below."""
    if not b > 0:
        raise ValueError(f"damping must be positive, got {b}")
    if b >= 2:
        return (b - np.sqrt(b * b - 4.0)) / 3.0
    return b / 3.0


class ModeRoots(NamedTuple):
    lam: float
    b: float
    omega_plus: complex
    omega_minus: complex


def mode_roots(b, lam):
    """Characteristic roots (-b +- sqrt(b^2 - 4 lam))/2 of one mode."""
    d = np.sqrt(complex(b * b - 4.0 * lam))
    return ModeRoots(float(lam), float(b), (-b + d) / 2.0, (-b - d) / 2.0)


def mode_kernels(lam, b, t):
    """Propagators (A, K, A', K') broadcast over ``lam`` and ``t`` (t >= 0)."""
    lam = np.asarray(lam, float)
    t = np.asarray(t, float)
    lam, t = np.broadcast_arrays(lam, t)
    d = np.sqrt((b * b - 4.0 * lam).astype(complex))
    z = d * t / 2.0
    small = np.abs(z) < _SERIES_Z
    damp = np.exp(-0.5 * b * t)

    z2 = np.where(small, z * z, 0.0)
    cosh_s = 1 + z2 / 2 + z2**2 / 24 + z2**3 / 720
    sinhc_s = 1 + z2 / 6 + z2**2 / 120 + z2**3 / 5040
    K_s = damp * t * sinhc_s
    A_s = damp * (cosh_s + 0.5 * b * t * sinhc_s)

    dd = np.where(small, 1.0, d)
    wp = (-b + dd) / 2.0
    wm = (-b - dd) / 2.0
    ep = np.exp(np.where(small, 0.0, wp * t))
    em = np.exp(np.where(small, 0.0, wm * t))
    K_e = (ep - em) / dd
    A_e = (wp * em - wm * ep) / dd

    K = np.where(small, K_s, K_e).real
    A = np.where(small, A_s, A_e).real
    dA = -lam * K
    dK = A - b * K
    return A, K, dA, dK


@dataclass(eq=False)
class ModalBasis:
    """Orthonormal coefficient-space eigenbasis of -L with eigenvalues ``lam``.

    Rows of ``Q`` are modes; the first ``nzero`` rows span the zero modes.
    """

    lmax: int
    Q: np.ndarray
    lam: np.ndarray
    nzero: int
    grid: sh.SphGrid = None
    X: np.ndarray = None

    @classmethod
    def identity(cls, lmax, grid=None):
        lam = -L_id_multipliers(lmax)
        l = np.asarray(sh.degrees(lmax))
        order = np.argsort(l != 1, kind="stable")
        Q = np.eye(sh.ncoeffs(lmax))[order]
        return cls(lmax, Q, np.maximum(lam[order], 0.0), 3, grid, None)

    @classmethod
    def for_X(cls, X, grid, lmax):
        """Numerical eigenbasis of the distorted operator at band ``lmax``."""
        if X is None or not np.any(X):
            return cls.identity(lmax, grid)
        op = PhiOperator(X, grid)
        M = operator_matrix(op.spectral(lmax), lmax)
        Z = op.zero_modes().spectral_basis(lmax)
        # orthonormal complement of the zero modes
        full, _ = np.linalg.qr(np.vstack([Z, np.eye(len(M))]).T)
        C = full[:, 3:].T
        mu, V = np.linalg.eigh(C @ M @ C.T)
        Q = np.vstack([Z, V.T @ C])
        lam = np.concatenate([np.zeros(3), np.maximum(-mu, 0.0)])
        return cls(lmax, Q, lam, 3, grid, X)

    def to_modes(self, coeffs):
        return np.asarray(coeffs) @ self.Q.T

    def from_modes(self, modes):
        return np.asarray(modes) @ self.Q


class Forcing:
    """Time-dependent forcing given as a callable or as samples.

    Samples are interpolated with a cubic spline.  Past the last sample the
    forcing is treated as zero, except in integrals to infinity, which add
    the tail value divided by the decay rate.
    """

    def __init__(self, source=None, times=None):
        self._eval = None
        self.spline = None
        self.times = None
        if source is None:
            return
        if callable(source):
            fn = source
            self._eval = lambda ts: np.stack([np.asarray(fn(float(s)), float) for s in ts])
            return
        if times is None:
            raise ValueError("sampled forcing needs sample times")
        t = np.asarray(times, float)
        y = np.asarray(source, float)
        if len(t) < 4:
            raise InsufficientDataError("sampled forcing needs at least 4 samples")
        self.times = t
        self.samples = y
        self.spline = CubicSpline(t, y, axis=0)

    @property
    def zero(self):
        return self._eval is None and self.spline is None

    def __call__(self, t):
        """Values at an array of times, stacked on a leading axis."""
        t = np.atleast_1d(np.asarray(t, float))
        if self._eval is not None:
            return self._eval(t)
        out = self.spline(np.clip(t, self.times[0], self.times[-1]))
        beyond = t > self.times[-1]
        if np.any(beyond):
            out[beyond] = 0.0
        return out

    def mapped(self, f):
        """Forcing composed with a linear map ``f`` acting on stacked values."""
        if self.zero:
            return Forcing()
        if self.spline is not None:
            return Forcing(f(self.samples), self.times)
        out = Forcing()
        base = self._eval
        out._eval = lambda ts: f(base(ts))
        return out

    def horizon(self, rate):
        """Time after which the forcing is negligible for integrals to infinity."""
        if self.spline is not None:
            return float(self.times[-1])
        return _TAIL / rate


def _panel_edges(t0, t1, hmax):
    n = max(1, int(np.ceil((t1 - t0) / hmax - 1e-12)))
    return np.linspace(t0, t1, n + 1)


def _propagate(lam, b, a0, v0, forcing, times, hmax):
    """Exact homogeneous propagation plus Gauss-Legendre Duhamel panels.

    ``lam`` has shape (n,); ``a0``, ``v0`` and forcing values have shape
    (n,) or (n, ...) with extra trailing axes broadcast against ``lam``.
    """
    times = np.asarray(times, float)
    extra = a0.ndim - 1
    lam_b = lam.reshape(lam.shape + (1,) * extra)
    out_a = np.empty((len(times),) + a0.shape)
    out_v = np.empty_like(out_a)
    if forcing.zero:
        for k, t in enumerate(times):
            A, K, dA, dK = mode_kernels(lam_b, b, t)
            out_a[k] = A * a0 + K * v0
            out_v[k] = dA * a0 + dK * v0
        return out_a, out_v
    a, v, t = a0.copy(), v0.copy(), 0.0
    for k, target in enumerate(times):
        if target < t:
            raise ValueError("output times must be nondecreasing and start at >= 0")
        edges = _panel_edges(t, target, hmax)
        for lo, hi in zip(edges[:-1], edges[1:]):
            h = hi - lo
            if h <= 0:
                continue
            A, K, dA, dK = mode_kernels(lam_b, b, h)
            s = lo + 0.5 * h * (_GL_NODES + 1.0)
            g = forcing(s)
            wq = 0.5 * h * _GL_WEIGHTS
            _, Kq, _, dKq = mode_kernels(lam_b[None], b, (hi - s).reshape((-1,) + (1,) * (1 + extra)))
            duh = np.tensordot(wq, Kq * g, axes=(0, 0))
            duh_v = np.tensordot(wq, dKq * g, axes=(0, 0))
            a, v = A * a + K * v + duh, dA * a + dK * v + duh_v
        t = target
        out_a[k], out_v[k] = a, v
    return out_a, out_v


def _hmax(lam, b):
    top = max(np.sqrt(float(np.max(lam, initial=0.0))), b, 1e-300)
    return min(0.25, 2.0 / top)


def _integral_to_infinity(forcing, rate, hmax=0.25):
    """int_0^infinity forcing, truncated where exp(-rate T) < 1e-12."""
    if forcing.zero:
        return None
    T = forcing.horizon(rate)
    total = 0.0
    edges = _panel_edges(0.0, T, hmax)
    for lo, hi in zip(edges[:-1], edges[1:]):
        s = lo + 0.5 * (hi - lo) * (_GL_NODES + 1.0)
        total = total + np.tensordot(0.5 * (hi - lo) * _GL_WEIGHTS, forcing(s), axes=(0, 0))
    if forcing.spline is not None:
        # exponential tail beyond the samples
        tail = forcing.samples[-1]
        total = total + tail / rate
    return total


@dataclass(eq=False)
class LinearTrajectory:
    """Solution samples in harmonic coefficients plus the limit when it exists."""

    times: np.ndarray
    phi: sh.SpectralField
    dphi: sh.SpectralField
    limit: sh.SpectralField = None
    has_limit: bool = False
    basis: ModalBasis = None

    def at(self, k):
        return sh.SpectralField(self.phi.lmax, self.phi.coeffs[k])


def _coeffs(x, lmax, grid):
    if x is None:
        return np.zeros(sh.ncoeffs(lmax))
    if isinstance(x, sh.SpectralField):
        return x.truncate(lmax).coeffs
    x = np.asarray(x, float)
    if x.ndim == 1 and x.size == sh.ncoeffs(lmax):
        return x
    return sh.analyze(np.asarray(x, float), grid, lmax).coeffs


def _stacked_coeffs(x, lmax, grid):
    """Coefficients of a stack of fields (leading time axis)."""
    if isinstance(x, sh.SpectralField):
        return x.truncate(lmax).coeffs
    x = np.asarray(x, float)
    if x.shape[-1] == sh.ncoeffs(lmax) and x.shape[-2:] != grid.shape:
        return x
    return sh.analyze(x, grid, lmax).coeffs


def evolve_linear(X, b, phi0, dphi0, gamma=None, times=(0.0,), lmax=None, grid=None, basis=None):
    """Solve phi'' + b phi' = L phi + gamma modewise.

    Parameters
    ----------
    X : tangent field or None
        Generator of the reference diffeomorphism; None or zeros for the identity.
    phi0, dphi0 : SpectralField or grid values
    gamma : Forcing, callable t -> coefficients, or None
    times : output times (nondecreasing, >= 0)

    Returns
    -------
    LinearTrajectory
        ``limit`` is P0 phi0 + P0 dphi0/b + (1/b) int P0 gamma when b > 0;
        for b = 0 ``has_limit`` is False (zero modes grow linearly).
    """
    if b < 0:
        raise ValueError("damping must be non-negative")
    if lmax is None:
        lmax = phi0.lmax if isinstance(phi0, sh.SpectralField) else None
    if lmax is None:
        raise ValueError("lmax is required for grid-valued data")
    if basis is None:
        if X is not None and np.any(X):
            grid = grid or sh.SphGrid.for_lmax(lmax, factor=2)
            basis = ModalBasis.for_X(X, grid, lmax)
        else:
            basis = ModalBasis.identity(lmax, grid)
    if grid is None:
        grid = basis.grid or sh.SphGrid.for_lmax(lmax)
    a0 = basis.to_modes(_coeffs(phi0, lmax, grid))
    v0 = basis.to_modes(_coeffs(dphi0, lmax, grid))
    forcing = gamma if isinstance(gamma, Forcing) else Forcing(gamma)
    modal_forcing = forcing.mapped(lambda c: basis.to_modes(_stacked_coeffs(c, lmax, grid)))

    times = np.asarray(times, float)
    a, v = _propagate(basis.lam, b, a0, v0, modal_forcing, times, _hmax(basis.lam, b))
    phi = sh.SpectralField(lmax, basis.from_modes(a))
    dphi = sh.SpectralField(lmax, basis.from_modes(v))

    limit, has_limit = None, False
    if b > 0:
        nz = basis.nzero
        lim = np.zeros_like(a0)
        lim[:nz] = a0[:nz] + v0[:nz] / b
        integral = _integral_to_infinity(modal_forcing, beta(b))
        if integral is not None:
            lim[:nz] += integral[:nz] / b
        limit = sh.SpectralField(lmax, basis.from_modes(lim))
        has_limit = True
    return LinearTrajectory(times, phi, dphi, limit, has_limit, basis)


@dataclass(eq=False)
class TangentialTrajectory:
    times: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    limit: np.ndarray = None
    has_limit: bool = False


def evolve_tangential(b, psi0, dpsi0, f_top=None, times=(0.0,)):
    """psi'' + b psi' = f_top pointwise, for fields of any shape."""
    psi0 = np.asarray(psi0, float)
    dpsi0 = np.zeros_like(psi0) if dpsi0 is None else np.asarray(dpsi0, float)
    flat0, flatv = psi0.reshape(-1), dpsi0.reshape(-1)
    lam = np.zeros(flat0.size)
    forcing = f_top if isinstance(f_top, Forcing) else Forcing(f_top)
    flat_forcing = forcing.mapped(lambda x: np.asarray(x, float).reshape(len(x), -1))
    times = np.asarray(times, float)
    hmax = 0.25 if b <= 8 else 2.0 / b
    a, v = _propagate(lam, b, flat0, flatv, flat_forcing, times, hmax)
    shape = (len(times),) + psi0.shape
    limit, has_limit = None, False
    if b > 0:
        limit = psi0 + dpsi0 / b
        integral = _integral_to_infinity(flat_forcing, beta(b))
        if integral is not None:
            limit = limit + integral.reshape(psi0.shape) / b
        has_limit = True
    return TangentialTrajectory(times, a.reshape(shape), v.reshape(shape), limit, has_limit)


@dataclass(eq=False)
class TripleSplit:
    """eta(t) = Sigma_X Y + c + v(t), with v decaying exponentially."""

    Y: np.ndarray
    c: np.ndarray
    times: np.ndarray
    v: np.ndarray
    dv: np.ndarray
    beta_used: float
    eta: np.ndarray
    normal: LinearTrajectory = None
    tangential: TangentialTrajectory = None


def _dot(a, b):
    return np.einsum("i...,i...->...", a, b)


def _check_forcing_decay(forcing, b, grid, probe_T=None):
    if forcing.zero:
        return
    rate_needed = beta(b)
    if forcing.spline is not None:
        t = forcing.times
    else:
        T = probe_T or max(20.0, 10.0 / rate_needed)
        t = np.linspace(0.0, T, 201)
    vals = forcing(t)
    norms = np.sqrt(np.sum(vals.reshape(len(t), -1) ** 2, axis=1))
    peak = norms.max()
    if peak == 0:
        return
    floor = 1e-13 * peak
    if norms[-1] <= floor:
        return
    try:
        fit = decay_fit(t, norms, window=(0.5, 1.0), floor=floor, min_samples=4)
    except InsufficientDataError:
        return
    if fit.rate < rate_needed - 0.05:
        raise ForcingNotDecayingError(
            f"forcing decays at rate {fit.rate:.4g}, below beta(b) - 0.05 = {rate_needed - 0.05:.4g}"
        )


def triple_split(X, b, eta0, deta0, f=None, times=(0.0,), lmax=None, grid=None, basis=None):
    """Solve the linearised problem at (X, u = 0) and split it as (Y, c, v).

    Parameters
    ----------
    X : tangent field or None
    eta0, deta0 : R^3 grid fields, Cauchy data
    f : forcing (callable t -> R^3 grid field, Forcing, or None)
    times : output times for v
    lmax : band used for the normal component (default grid.max_lmax)

    Returns
    -------
    TripleSplit
    """
    if not b > 0:
        raise ValueError("the split needs positive damping")
    if grid is None:
        raise ValueError("grid is required")
    lmax = grid.max_lmax if lmax is None else lmax
    if X is None:
        X = np.zeros((3,) + grid.shape)
    N = exp_map(X, grid)
    eta0 = np.asarray(eta0, float)
    deta0 = np.zeros_like(eta0) if deta0 is None else np.asarray(deta0, float)
    forcing = f if isinstance(f, Forcing) else Forcing(f)
    _check_forcing_decay(forcing, b, grid)

    # both accept a leading stack axis
    def normal_part(x):
        return np.sum(np.asarray(x, float) * N, axis=-3)

    def tangent_part(x):
        x = np.asarray(x, float)
        return x - normal_part(x)[..., None, :, :] * N

    normal = evolve_linear(
        X,
        b,
        sh.analyze(normal_part(eta0), grid, lmax),
        sh.analyze(normal_part(deta0), grid, lmax),
        forcing.mapped(lambda x: sh.analyze(normal_part(x), grid, lmax).coeffs),
        times,
        lmax=lmax,
        grid=grid,
        basis=basis,
    )
    tang = evolve_tangential(b, tangent_part(eta0), tangent_part(deta0), forcing.mapped(tangent_part), times)

    # c from the zero-mode content of the normal limit
    Nk = sh.analyze(N, grid, lmax).coeffs.T
    c, *_ = np.linalg.lstsq(Nk, normal.limit.coeffs, rcond=None)
    phi_inf = np.einsum("k,k...->...", c, N)
    c_top = c[:, None, None] - phi_inf * N
    Y = sigma_inverse(X, -c_top + tang.limit, grid)

    phi_t = sh.synthesize(normal.phi, grid)
    dphi_t = sh.synthesize(normal.dphi, grid)
    eta = phi_t[:, None] * N + tang.psi
    v = (phi_t - phi_inf)[:, None] * N + (tang.psi - tang.limit)
    dv = dphi_t[:, None] * N + tang.dpsi
    return TripleSplit(Y, c, normal.times, v, dv, beta(b), eta, normal, tang)
