"""Extrinsic geometry of embedded spheres and the surface-tension/pressure force.

Surfaces are parameterised over the unit sphere in (colatitude, longitude)
coordinates.  Coordinate derivatives are taken spectrally, so every quantity
is exact for the band-limited embedding up to pointwise round-off.

Sign conventions: ``N`` is the outward unit normal, ``h_ij = -N . d_i d_j w``
and ``H = g^ij h_ij``, so the unit sphere has ``H = 2`` and
``Laplace_g(w) = -H N``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import harmonics as sh
from .errors import DegenerateEmbeddingError

KAPPA = 8.0 * np.pi / 3.0
VOL0 = 4.0 * np.pi / 3.0

# degeneracy threshold on det g relative to (trace g)^2
DEGENERACY_TOL = 1e-12

__all__ = [
    "KAPPA",
    "VOL0",
    "Embedding",
    "GeometryCache",
    "geometry_of",
    "rhs_force",
    "apply_psi_prime",
    "surface_laplacian",
    "sphere_embedding",
]


@dataclass(frozen=True, eq=False)
class Embedding:
    """An R^3-valued field on the grid, differentiated at band limit ``lmax``."""

    values: np.ndarray
    grid: sh.SphGrid
    lmax: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (3,) + self.grid.shape:
            raise ValueError(f"embedding values must have shape (3, {self.grid.shape}), got {v.shape}")
        self.grid.check(self.lmax)
        object.__setattr__(self, "values", v)

    @property
    def x(self):
        return self.values[0]

    @property
    def y(self):
        return self.values[1]

    @property
    def z(self):
        return self.values[2]

    def spectral(self):
        return sh.analyze(self.values, self.grid, self.lmax)

    def translated(self, a):
        return Embedding(self.values + np.asarray(a, float)[:, None, None], self.grid, self.lmax)

    def rotated(self, R):
        return Embedding(np.einsum("ij,jtp->itp", R, self.values), self.grid, self.lmax)


def sphere_embedding(grid, lmax, radius=1.0, center=(0.0, 0.0, 0.0)):
    return Embedding(radius * grid.position + np.asarray(center, float)[:, None, None], grid, lmax)


def _cross(a, b):
    return np.stack(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _dot(a, b):
    return np.einsum("i...,i...->...", a, b)


@dataclass(eq=False)
class GeometryCache:
    """Pointwise geometry of one embedding plus global area and volume.

    Tensor fields carry their two coordinate indices first, e.g. ``g[i, j]``
    has shape (nlat, nlon).  Index 0 is colatitude, 1 longitude.
    """

    grid: sh.SphGrid
    lmax: int
    w: np.ndarray
    dw: np.ndarray  # dw[i] = d_i w, shape (2, 3, nlat, nlon)
    ddw: np.ndarray  # ddw[i, j] = d_i d_j w
    g: np.ndarray
    ginv: np.ndarray
    sqrt_detg: np.ndarray
    N: np.ndarray
    h: np.ndarray
    H: np.ndarray
    h_norm2: np.ndarray
    area_ratio: np.ndarray
    area: float
    volume: float
    flipped: bool = False
    min_det_ratio: float = field(default=np.nan)

    def gradient(self, f_t, f_p):
        """Ambient gradient vector g^ij f_j d_i w from coordinate derivatives.

        Leading batch axes of ``f_t``/``f_p`` are kept; the vector axis is
        inserted just before the grid axes.
        """
        up0 = self.ginv[0, 0] * f_t + self.ginv[0, 1] * f_p
        up1 = self.ginv[1, 0] * f_t + self.ginv[1, 1] * f_p
        return up0[..., None, :, :] * self.dw[0] + up1[..., None, :, :] * self.dw[1]

    def laplace_beltrami(self, f, lmax=None):
        """Laplace-Beltrami of a scalar given as grid values or a SpectralField.

        Uses the embedding form ``g^ij (f_ij - d_i d_j w . grad f)``, which
        is smooth in the polar chart.  Grid values are first analysed at
        ``lmax`` (default: the largest band the grid resolves).  Leading
        batch axes are allowed.
        """
        if not isinstance(f, sh.SpectralField):
            f = sh.analyze(f, self.grid, self.grid.max_lmax if lmax is None else lmax)
        _, ft, fp, ftt, ftp, fpp = sh.derivatives(f, self.grid)
        grad = self.gradient(ft, fp)

        def hess(i, j, fij):
            return fij - np.sum(self.ddw[i, j] * grad, axis=-3)

        gi = self.ginv
        return (
            gi[0, 0] * hess(0, 0, ftt)
            + 2.0 * gi[0, 1] * hess(0, 1, ftp)
            + gi[1, 1] * hess(1, 1, fpp)
        )

    def integrate(self, values):
        """Integral against the induced measure dmu(w), kept broadcastable."""
        return sh.integrate(values * self.area_ratio, self.grid)[..., None, None]

    def summary(self):
        return {
            "area": self.area,
            "volume": self.volume,
            "H_min": float(self.H.min()),
            "H_max": float(self.H.max()),
            "min_detg_ratio": float(self.min_det_ratio),
        }


def geometry_of(w, check=True):
    """Compute the full geometry cache of an embedding.

    Raises
    ------
    DegenerateEmbeddingError
        If ``det g <= 1e-12 (tr g)^2`` or a value is non-finite at some node.
    """
    grid = w.grid
    if not np.all(np.isfinite(w.values)):
        raise DegenerateEmbeddingError("embedding has non-finite values")
    d = sh.derivatives(w.spectral(), grid)
    val, wt, wp, wtt, wtp, wpp = d
    dw = np.stack([wt, wp])
    ddw = np.stack([np.stack([wtt, wtp]), np.stack([wtp, wpp])])

    gtt, gtp, gpp = _dot(wt, wt), _dot(wt, wp), _dot(wp, wp)
    det = gtt * gpp - gtp**2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = det / (gtt + gpp) ** 2
    min_ratio = float(np.min(ratio)) if ratio.size else np.nan
    if check and not (min_ratio > DEGENERACY_TOL):
        bad = np.unravel_index(np.nanargmin(np.where(np.isfinite(ratio), ratio, -np.inf)), ratio.shape)
        raise DegenerateEmbeddingError(
            f"degenerate metric at node {tuple(int(i) for i in bad)}: det g / (tr g)^2 = {ratio[bad]:.3e}",
            node=tuple(int(i) for i in bad),
        )
    g = np.stack([np.stack([gtt, gtp]), np.stack([gtp, gpp])])
    ginv = np.stack([np.stack([gpp, -gtp]), np.stack([-gtp, gtt])]) / det
    sqrt_detg = np.sqrt(det)

    n = _cross(wt, wp)
    N = n / np.sqrt(_dot(n, n))
    h = -np.einsum("k...,ijk...->ij...", N, ddw)
    H = np.einsum("ij...,ij...->...", ginv, h)
    shape_op = np.einsum("ik...,kj...->ij...", ginv, h)
    h_norm2 = np.einsum("ij...,ji...->...", shape_op, shape_op)
    area_ratio = sqrt_detg / grid.sin_theta[:, None]

    area = float(sh.integrate(area_ratio, grid))
    volume = float(sh.integrate(_dot(val, N) * area_ratio, grid)) / 3.0
    flipped = False
    if volume < 0:
        N, h, H, volume, flipped = -N, -h, -H, -volume, True
    return GeometryCache(
        grid=grid,
        lmax=w.lmax,
        w=val,
        dw=dw,
        ddw=ddw,
        g=g,
        ginv=ginv,
        sqrt_detg=sqrt_detg,
        N=N,
        h=h,
        H=H,
        h_norm2=h_norm2,
        area_ratio=area_ratio,
        area=area,
        volume=volume,
        flipped=flipped,
        min_det_ratio=min_ratio,
    )


def surface_laplacian(w, f):
    return geometry_of(w).laplace_beltrami(f)


def rhs_force(w, kappa=KAPPA, geo=None):
    """Force per reference area: (dmu/dmu0) (-H + kappa/Vol) N at each node."""
    geo = geometry_of(w) if geo is None else geo
    if geo.volume <= 0:
        raise DegenerateEmbeddingError("enclosed volume is not positive")
    return geo.area_ratio * (-geo.H + kappa / geo.volume) * geo.N


def apply_psi_prime(w, eta, eta_t=None, eta_tt=None, b=0.0, kappa=KAPPA, geo=None):
    """Linearisation of ``w -> w_tt + b w_t - F(w)`` applied to ``eta`` at one time.

    ``eta``, ``eta_t`` and ``eta_tt`` are R^3 grid fields; missing time
    derivatives count as zero.  The spatial part is

        -A (Lap phi + |h|^2 phi - kappa/V^2 int phi dmu) N
        + A (grad H . eta) N
        - A Lam (g^ij eta_i . w_j) N
        + A Lam g^ij (N . eta_j) w_i

    with ``phi = eta . N``, ``A = dmu/dmu0`` and ``Lam = -H + kappa/V``.
    """
    geo = geometry_of(w) if geo is None else geo
    grid = geo.grid
    eta = np.asarray(eta, float)
    A, N = geo.area_ratio, geo.N
    lam = -geo.H + kappa / geo.volume
    band = grid.max_lmax

    phi = _dot(eta, N)
    lap_phi = geo.laplace_beltrami(phi, band)
    mean_term = kappa / geo.volume**2 * geo.integrate(phi)

    Hs = sh.analyze(geo.H, grid, band)
    _, Ht, Hp = sh.derivatives(Hs, grid)[:3]
    gradH = geo.gradient(Ht, Hp)

    e = sh.derivatives(sh.analyze(eta, grid, band), grid)
    deta = np.stack([e[1], e[2]])
    # g^ij eta_i . w_j  (relative area change)
    div_like = np.einsum("ij...,ik...,jk...->...", geo.ginv, deta, geo.dw)
    # g^ij (N . eta_j) w_i  (minus the normal variation)
    n_eta = _dot(N, deta.transpose(1, 0, 2, 3))
    tang = np.einsum("ij...,j...,ik...->k...", geo.ginv, n_eta, geo.dw)

    out = -A * (lap_phi + geo.h_norm2 * phi - mean_term) * N
    out = out + A * _dot(gradH, eta) * N
    out = out - A * lam * div_like * N
    out = out + A * lam * tang
    if eta_t is not None:
        out = out + b * np.asarray(eta_t, float)
    if eta_tt is not None:
        out = out + np.asarray(eta_tt, float)
    return out
