"""
Real spherical-harmonic transforms on a Gauss-Legendre x equiangular grid.

The basis is orthonormal under the round-sphere measure and carries no
Condon-Shortley phase::

    Y_{l,m}  = sqrt(2) * P_l^m(cos t) * cos(m p)      m > 0
    Y_{l,0}  =           P_l^0(cos t)
    Y_{l,-m} = sqrt(2) * P_l^m(cos t) * sin(m p)      m > 0

with P_l^m the fully normalised associated Legendre functions, so that
x, y, z of the unit sphere are multiples of Y_{1,1}, Y_{1,-1}, Y_{1,0}.

Coefficients are stored l-major, m running from -l to l; the flat index of
(l, m) is ``l*l + l + m``.  Grid values are arrays of shape (nlat, nlon),
optionally with leading batch axes.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import ResolutionError

__all__ = [
    "SphGrid",
    "SpectralField",
    "ncoeffs",
    "lm_index",
    "degrees",
    "orders",
    "analyze",
    "synthesize",
    "laplacian",
    "smooth",
    "band_limit",
    "sobolev_norm",
    "differentiate",
    "derivatives",
    "integrate",
    "inner",
    "basis_field",
    "evaluate",
    "legendre_tables",
]


def ncoeffs(lmax):
    return (lmax + 1) ** 2


def lm_index(l, m):
    return l * l + l + m


@lru_cache(maxsize=None)
def degrees(lmax):
    """Degree l of every flat coefficient slot (read-only array)."""
    out = np.concatenate([np.full(2 * l + 1, l) for l in range(lmax + 1)])
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def orders(lmax):
    out = np.concatenate([np.arange(-l, l + 1) for l in range(lmax + 1)])
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SphGrid:
    """Gauss-Legendre colatitudes (no pole nodes) times uniform longitudes."""

    nlat: int
    nlon: int

    def __post_init__(self):
        if self.nlat < 1 or self.nlon < 1:
            raise ValueError("grid dimensions must be positive")

    @classmethod
    def for_lmax(cls, lmax, padded=True, factor=1.5):
        """Grid for band limit ``lmax``.

        ``padded`` oversamples by ``factor`` so that products and quotients
        of band-limited fields (geometry) are integrated accurately.
        """
        if not padded:
            return cls(lmax + 1, 2 * lmax + 1)
        return cls(int(np.ceil(factor * (lmax + 1))), int(np.ceil(2 * factor * lmax)) + 2)

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    @property
    def max_lmax(self):
        """Largest band limit this grid resolves exactly."""
        return min(self.nlat - 1, (self.nlon - 1) // 2)

    @cached_property
    def _gauss(self):
        x, w = np.polynomial.legendre.leggauss(self.nlat)
        # order nodes north to south
        return x[::-1].copy(), w[::-1].copy()

    @cached_property
    def cos_theta(self):
        return self._gauss[0]

    @cached_property
    def theta(self):
        return np.arccos(self.cos_theta)

    @cached_property
    def sin_theta(self):
        return np.sqrt(1.0 - self.cos_theta**2)

    @cached_property
    def lat_weights(self):
        return self._gauss[1]

    @cached_property
    def phi(self):
        return 2.0 * np.pi * np.arange(self.nlon) / self.nlon

    @cached_property
    def weights(self):
        """Quadrature weight of every node; sums to 4*pi."""
        return np.outer(self.lat_weights, np.full(self.nlon, 2.0 * np.pi / self.nlon))

    @cached_property
    def position(self):
        """Unit-sphere embedding i0 at the nodes, shape (3, nlat, nlon)."""
        st = self.sin_theta[:, None]
        return np.stack(
            [
                st * np.cos(self.phi)[None, :],
                st * np.sin(self.phi)[None, :],
                np.broadcast_to(self.cos_theta[:, None], self.shape),
            ]
        )

    @cached_property
    def e_theta(self):
        ct = self.cos_theta[:, None]
        return np.stack(
            [
                ct * np.cos(self.phi)[None, :],
                ct * np.sin(self.phi)[None, :],
                np.broadcast_to(-self.sin_theta[:, None], self.shape),
            ]
        )

    @cached_property
    def e_phi(self):
        return np.stack(
            [
                np.broadcast_to(-np.sin(self.phi)[None, :], self.shape),
                np.broadcast_to(np.cos(self.phi)[None, :], self.shape),
                np.zeros(self.shape),
            ]
        )

    def check(self, lmax):
        if lmax < 0:
            raise ResolutionError("lmax must be non-negative")
        if self.nlat < lmax + 1 or self.nlon < 2 * lmax + 1:
            raise ResolutionError(
                f"grid {self.nlat}x{self.nlon} cannot resolve lmax={lmax} "
                f"(needs nlat >= {lmax + 1} and nlon >= {2 * lmax + 1})"
            )


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real harmonic coefficients up to degree ``lmax``.

    ``coeffs`` has shape ``(..., (lmax+1)**2)``; leading axes hold batches or
    vector components and are summed over by the norms.
    """

    lmax: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[-1:] != (ncoeffs(self.lmax),):
            raise ValueError(
                f"expected trailing axis of {ncoeffs(self.lmax)} coefficients, got {c.shape}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, lmax, lead=()):
        return cls(lmax, np.zeros(tuple(lead) + (ncoeffs(lmax),)))

    @classmethod
    def single(cls, lmax, l, m, value=1.0):
        c = np.zeros(ncoeffs(lmax))
        c[lm_index(l, m)] = value
        return cls(lmax, c)

    def __getitem__(self, lm):
        l, m = lm
        return self.coeffs[..., lm_index(l, m)]

    def __add__(self, other):
        return SpectralField(self.lmax, self.coeffs + _aligned(other, self.lmax))

    def __sub__(self, other):
        return SpectralField(self.lmax, self.coeffs - _aligned(other, self.lmax))

    def __mul__(self, scalar):
        return SpectralField(self.lmax, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralField(self.lmax, -self.coeffs)

    def truncate(self, lmax):
        """Restrict or zero-pad to another band limit."""
        out = np.zeros(self.coeffs.shape[:-1] + (ncoeffs(lmax),))
        n = min(ncoeffs(lmax), ncoeffs(self.lmax))
        out[..., :n] = self.coeffs[..., :n]
        return SpectralField(lmax, out)

    def rows(self):
        """Yield (l, m, value) triples for a scalar field."""
        if self.coeffs.ndim != 1:
            raise ValueError("rows() is defined for scalar fields only")
        for k, (l, m) in enumerate(zip(degrees(self.lmax), orders(self.lmax))):
            yield int(l), int(m), float(self.coeffs[k])


def _aligned(other, lmax):
    if other.lmax != lmax:
        raise ValueError("band limits differ")
    return other.coeffs


def legendre_tables(lmax, theta):
    """Normalised P_l^m(cos theta) with first and second theta-derivatives.

    Returns three arrays of shape (lmax+1, lmax+1, len(theta)) indexed
    [l, m, node]; entries with m > l are zero.  ``theta`` must avoid the poles.
    """
    L = lmax
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.cos(theta)
    s = np.sin(theta)
    nl = theta.size
    pbar = np.zeros((L + 1, L + 1, nl))
    pbar[0, 0] = 1.0 / np.sqrt(4.0 * np.pi)
    for m in range(1, L + 1):
        pbar[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * pbar[m - 1, m - 1]
    for m in range(0, L):
        pbar[m + 1, m] = np.sqrt(2.0 * m + 3) * x * pbar[m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            a_prev = np.sqrt((4.0 * (l - 1) ** 2 - 1) / ((l - 1) ** 2 - m * m))
            pbar[l, m] = a * (x * pbar[l - 1, m] - pbar[l - 2, m] / a_prev)

    # sin(t) dP/dt = l cos(t) P_l - c P_{l-1}
    dpbar = np.zeros_like(pbar)
    for l in range(L + 1):
        for m in range(l + 1):
            lower = 0.0
            if l - 1 >= m:
                c = np.sqrt((2 * l + 1) * (l * l - m * m) / (2.0 * l - 1))
                lower = c * pbar[l - 1, m]
            dpbar[l, m] = (l * x * pbar[l, m] - lower) / s
    # Legendre's equation supplies the second derivative
    ll = np.arange(L + 1)[:, None, None]
    mm = np.arange(L + 1)[None, :, None]
    cot = (x / s)[None, None, :]
    ddpbar = -cot * dpbar - (ll * (ll + 1) - mm**2 / (s**2)[None, None, :]) * pbar
    return pbar, dpbar, ddpbar


def _fourier(lmax, phi):
    """sqrt(2)cos / 1 / sqrt(2)sin rows for m = -lmax..lmax and their phi-derivative."""
    mvals = np.arange(-lmax, lmax + 1)[:, None]
    phi = np.atleast_1d(np.asarray(phi, dtype=float))[None, :]
    am = np.abs(mvals)
    r2 = np.sqrt(2.0)
    T = np.where(mvals > 0, r2 * np.cos(am * phi), np.where(mvals < 0, r2 * np.sin(am * phi), 1.0))
    dT = np.where(
        mvals > 0, -am * r2 * np.sin(am * phi), np.where(mvals < 0, am * r2 * np.cos(am * phi), 0.0)
    )
    return T, dT


class _Tables:
    """Legendre and Fourier tables for one (grid, lmax) pair."""

    def __init__(self, grid, lmax):
        grid.check(lmax)
        self.grid = grid
        self.lmax = lmax
        L = lmax
        nl = grid.nlat
        pbar, dpbar, ddpbar = legendre_tables(L, grid.theta)

        # expand to signed order index mi = m + L
        def signed(tab):
            out = np.zeros((L + 1, 2 * L + 1, nl))
            out[:, L:, :] = tab
            out[:, :L, :] = tab[:, 1:, :][:, ::-1, :]
            # zero entries with |m| > l
            mask = np.abs(np.arange(-L, L + 1))[None, :] <= np.arange(L + 1)[:, None]
            return out * mask[:, :, None]

        self.P = signed(pbar)
        self.dP = signed(dpbar)
        self.ddP = signed(ddpbar)

        T, dT = _fourier(L, grid.phi)
        mvals = np.arange(-L, L + 1)
        self.T = T
        self.dT = dT
        self.ddT = -(mvals**2)[:, None] * T
        self.T_analysis = T * (2.0 * np.pi / grid.nlon)

        # flat index -> (l, mi)
        self.l_of = np.asarray(degrees(L))
        self.mi_of = np.asarray(orders(L)) + L

    def to_matrix(self, flat):
        L = self.lmax
        out = np.zeros(flat.shape[:-1] + (L + 1, 2 * L + 1))
        out[..., self.l_of, self.mi_of] = flat
        return out

    def from_matrix(self, mat):
        return mat[..., self.l_of, self.mi_of]

    def latitude_sums(self, flat, table):
        return np.einsum("...lm,lmt->...mt", self.to_matrix(flat), table, optimize=True)

    def synth(self, flat):
        G = self.latitude_sums(flat, self.P)
        return np.einsum("...mt,mp->...tp", G, self.T, optimize=True)

    def anal(self, values):
        F = np.einsum("...tp,mp->...mt", values, self.T_analysis, optimize=True)
        F = F * self.grid.lat_weights
        A = np.einsum("...mt,lmt->...lm", F, self.P, optimize=True)
        return self.from_matrix(A)


@lru_cache(maxsize=64)
def _tables(grid, lmax):
    return _Tables(grid, lmax)


def analyze(values, grid, lmax):
    """Quadrature projection of grid values onto harmonics of degree <= lmax."""
    values = np.asarray(values, dtype=float)
    if values.shape[-2:] != grid.shape:
        raise ValueError(f"values of shape {values.shape} do not match grid {grid.shape}")
    return SpectralField(lmax, _tables(grid, lmax).anal(values))


def synthesize(field, grid):
    """Evaluate the expansion at the grid nodes."""
    return _tables(grid, field.lmax).synth(field.coeffs)


def laplacian(field):
    l = np.asarray(degrees(field.lmax))
    return SpectralField(field.lmax, field.coeffs * -(l * (l + 1)))


def smooth(field, j):
    """Cutoff smoothing: keep modes with l(l+1) <= 2**j."""
    if j < 0:
        raise ValueError("smoothing index must be non-negative")
    l = np.asarray(degrees(field.lmax))
    keep = l * (l + 1) <= 2.0**j
    return SpectralField(field.lmax, field.coeffs * keep)


def band_limit(field, lcut):
    """Zero every degree above ``lcut`` (keeps the storage band limit)."""
    l = np.asarray(degrees(field.lmax))
    return SpectralField(field.lmax, field.coeffs * (l <= lcut))


def sobolev_norm(field, n):
    """Graded norm sqrt(sum (1 + l(l+1))**n a_lm**2), summed over leading axes."""
    if n < 0:
        raise ValueError("Sobolev index must be non-negative")
    l = np.asarray(degrees(field.lmax))
    w = (1.0 + l * (l + 1.0)) ** n
    return float(np.sqrt(np.sum(w * field.coeffs**2)))


def derivatives(field, grid):
    """Values and coordinate derivatives up to second order at the nodes.

    Returns ``(f, f_t, f_p, f_tt, f_tp, f_pp)`` where t is colatitude and p
    longitude.  All are exact for the truncated expansion.
    """
    tab = _tables(grid, field.lmax)
    c = field.coeffs
    G = tab.latitude_sums(c, tab.P)
    Gd = tab.latitude_sums(c, tab.dP)
    Gdd = tab.latitude_sums(c, tab.ddP)

    def lon(g, t):
        return np.einsum("...mt,mp->...tp", g, t, optimize=True)

    return (
        lon(G, tab.T),
        lon(Gd, tab.T),
        lon(G, tab.dT),
        lon(Gdd, tab.T),
        lon(Gd, tab.dT),
        lon(G, tab.ddT),
    )


def differentiate(field, grid):
    """Colatitude and longitude derivatives at the nodes."""
    tab = _tables(grid, field.lmax)
    c = field.coeffs
    G = tab.latitude_sums(c, tab.P)
    Gd = tab.latitude_sums(c, tab.dP)
    d_theta = np.einsum("...mt,mp->...tp", Gd, tab.T, optimize=True)
    d_phi = np.einsum("...mt,mp->...tp", G, tab.dT, optimize=True)
    return d_theta, d_phi


def integrate(values, grid):
    """Quadrature of grid values over the unit sphere (over the last two axes)."""
    return np.sum(np.asarray(values) * grid.weights, axis=(-2, -1))


def inner(f, g, grid):
    return integrate(f * g, grid)


def basis_field(grid, l, m):
    """Grid values of the single harmonic Y_{l,m}."""
    return synthesize(SpectralField.single(l, l, m), grid)


def evaluate(field, theta, phi):
    """Evaluate a scalar expansion at scattered points (theta off the poles)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    L = field.lmax
    pbar = legendre_tables(L, theta)[0]
    T = _fourier(L, phi)[0]
    out = np.zeros(theta.shape)
    for l, m, a in field.rows():
        if a != 0.0:
            out += a * pbar[l, abs(m)] * T[m + L]
    return out
