import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from membrane import harmonics as sh
from membrane.errors import DegenerateEmbeddingError
from membrane.geometry import (
    KAPPA,
    Embedding,
    apply_psi_prime,
    geometry_of,
    rhs_force,
    sphere_embedding,
)


def scalar(grid, lmax, seed, top=4, scale=1.0):
    rng = np.random.default_rng(seed)
    c = np.zeros(sh.ncoeffs(lmax))
    c[1 : sh.ncoeffs(top)] = rng.standard_normal(sh.ncoeffs(top) - 1)
    return scale * sh.synthesize(sh.SpectralField(lmax, c), grid)


def bumpy(grid, lmax, eps, seed=1):
    return Embedding(grid.position * (1 + eps * scalar(grid, lmax, seed)), grid, lmax)


def l2(grid, v):
    return np.sqrt(sh.integrate(np.sum(v**2, axis=0), grid))


@pytest.fixture(scope="module")
def grid16():
    return sh.SphGrid.for_lmax(16)


def test_unit_sphere(grid16):
    geo = geometry_of(sphere_embedding(grid16, 16))
    assert np.abs(geo.H - 2).max() < 1e-8
    assert abs(geo.volume - 4 * np.pi / 3) < 1e-8
    assert np.abs(np.sum(geo.N**2, axis=0) - 1).max() < 1e-12
    assert np.abs(geo.N - grid16.position).max() < 1e-8
    assert np.abs(geo.area_ratio - 1).max() < 1e-8
    assert not geo.flipped


@pytest.mark.parametrize("r", [0.5, 1.0, 1.3, 2.0])
def test_scaling_laws(grid16, r):
    geo = geometry_of(sphere_embedding(grid16, 16, radius=r))
    assert np.abs(geo.H * r / 2 - 1).max() < 1e-8
    assert abs(geo.volume / (4 * np.pi * r**3 / 3) - 1) < 1e-8
    assert np.abs(geo.area_ratio / r**2 - 1).max() < 1e-8


def test_cache_invariants():
    lmax = 12
    g = sh.SphGrid.for_lmax(lmax)
    geo = geometry_of(bumpy(g, lmax, 0.02))
    assert np.abs(np.sum(geo.N**2, axis=0) - 1).max() < 1e-12
    for i in range(2):
        assert np.abs(np.sum(geo.N * geo.dw[i], axis=0)).max() < 1e-10
    assert np.array_equal(geo.g[0, 1], geo.g[1, 0])
    assert np.abs(geo.h[0, 1] - geo.h[1, 0]).max() < 1e-12
    det = geo.g[0, 0] * geo.g[1, 1] - geo.g[0, 1] ** 2
    assert det.min() > 0 and geo.g[0, 0].min() > 0
    trace = np.einsum("ij...,ij...->...", geo.ginv, geo.h)
    assert np.abs(trace - geo.H).max() < 1e-10
    assert abs(sh.integrate(geo.area_ratio, g) - geo.area) <= 1e-10 * geo.area


def test_volume_against_refined_oracle():
    lmax = 16
    vols = []
    for g in (sh.SphGrid.for_lmax(lmax), sh.SphGrid(4 * (lmax + 1), 8 * lmax + 1)):
        y20 = sh.synthesize(sh.SpectralField.single(lmax, 2, 0), g)
        w = Embedding(g.position * (1 + 1e-3 * y20), g, lmax)
        vols.append(geometry_of(w).volume)
    assert abs(vols[0] - vols[1]) < 1e-9
    # second-order closed form: V = 4pi/3 + eps^2 int y20^2 + O(eps^3) = 4pi/3 + 1e-6
    assert abs(vols[0] - (4 * np.pi / 3 + 1e-6)) < 1e-8


def test_inward_orientation_flagged():
    lmax = 8
    g = sh.SphGrid.for_lmax(lmax)
    w = sphere_embedding(g, lmax)
    mirrored = Embedding(w.values * np.array([1, 1, -1.0])[:, None, None], g, lmax)
    geo = geometry_of(mirrored)
    assert geo.flipped
    assert abs(geo.volume - 4 * np.pi / 3) < 1e-10
    assert np.abs(geo.H - 2).max() < 1e-10


def test_degenerate_embedding():
    lmax = 6
    g = sh.SphGrid.for_lmax(lmax)
    flat = g.position.copy()
    flat[2] = 0.0
    with pytest.raises(DegenerateEmbeddingError) as err:
        geometry_of(Embedding(flat, g, lmax))
    assert err.value.node is not None
    nan = g.position.copy()
    nan[0, 2, 3] = np.nan
    with pytest.raises(DegenerateEmbeddingError):
        geometry_of(Embedding(nan, g, lmax))


def test_rigid_motion_invariance():
    lmax = 12
    g = sh.SphGrid.for_lmax(lmax)
    w = bumpy(g, lmax, 0.02)
    base = geometry_of(w)
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    moved = geometry_of(w.rotated(R).translated([0.2, -0.1, 0.05]))
    assert abs(moved.volume / base.volume - 1) < 1e-10
    assert abs(moved.area / base.area - 1) < 1e-10


def test_mean_curvature_normal_identity():
    lmax = 12
    g = sh.SphGrid(3 * (lmax + 1), 6 * lmax + 2)
    for w in (sphere_embedding(g, lmax), bumpy(g, lmax, 0.01)):
        geo = geometry_of(w)
        lap_n = np.stack([geo.laplace_beltrami(geo.N[k]) for k in range(3)])
        _, ht, hp = sh.derivatives(sh.analyze(geo.H, g, g.max_lmax), g)[:3]
        grad_h = geo.gradient(ht, hp)
        # H = +2 convention: Lap N + |h|^2 N = grad H
        assert l2(g, lap_n + geo.h_norm2 * geo.N - grad_h) < 1e-6
        # Lap w = -H N
        lap_w = np.stack([geo.laplace_beltrami(geo.w[k]) for k in range(3)])
        assert np.abs(lap_w + geo.H * geo.N).max() < 1e-8


def test_force_on_spheres(grid16):
    assert np.abs(rhs_force(sphere_embedding(grid16, 16), KAPPA)).max() < 1e-8
    for r in (0.8, 1.05, 2.0):
        f = rhs_force(sphere_embedding(grid16, 16, radius=r, center=(0.3, 0, -0.1)))
        assert np.abs(f - (-2 * r + 2 / r) * grid16.position).max() < 1e-8
    f2 = rhs_force(sphere_embedding(grid16, 16, radius=2.0))
    radial = np.sum(f2 * grid16.position, axis=0)
    assert np.abs(radial + 3).max() < 1e-8


def test_psi_prime_sphere_eigenmode():
    lmax = 16
    g = sh.SphGrid.for_lmax(lmax)
    w = sphere_embedding(g, lmax)
    y20 = sh.synthesize(sh.SpectralField.single(lmax, 2, 0), g)
    out = apply_psi_prime(w, y20 * g.position)
    normal = np.sum(out * g.position, axis=0)
    assert np.abs(normal - 4 * y20).max() < 1e-8
    assert np.abs(out - normal * g.position).max() < 1e-8


def test_psi_prime_translation(grid16):
    w = sphere_embedding(grid16, 16)
    eta = np.array([0.3, -1.0, 2.0])[:, None, None] * np.ones(grid16.shape)
    assert np.abs(apply_psi_prime(w, eta)).max() < 1e-8


def test_psi_prime_time_terms(grid16):
    w = sphere_embedding(grid16, 16)
    zero = np.zeros((3,) + grid16.shape)
    et = scalar(grid16, 16, 3) * grid16.position
    ett = scalar(grid16, 16, 4) * grid16.e_theta
    out = apply_psi_prime(w, zero, et, ett, b=0.7)
    assert np.allclose(out, 0.7 * et + ett, atol=1e-14)


@pytest.mark.parametrize("eps", [0.0, 0.01])
def test_psi_prime_finite_differences(eps):
    lmax = 12
    g = sh.SphGrid.for_lmax(lmax)
    w = bumpy(g, lmax, eps)
    eta = np.stack([scalar(g, lmax, s) for s in (3, 4, 5)])
    lin = apply_psi_prime(w, eta)
    base = rhs_force(w)
    errs = []
    for s in (1e-3, 1e-4):
        fd = (rhs_force(Embedding(w.values + s * eta, g, lmax)) - base) / s
        errs.append(l2(g, -fd - lin) / l2(g, lin))
    # first order in s
    assert errs[1] < 0.2 * errs[0]
    assert errs[1] < 1e-3


def test_force_linearisation_about_sphere():
    lmax = 12
    g = sh.SphGrid.for_lmax(lmax)
    w = sphere_embedding(g, lmax)
    eta = np.stack([scalar(g, lmax, s) for s in (7, 8, 9)])
    lin = apply_psi_prime(w, eta)
    s = 1e-6
    fd = (rhs_force(Embedding(w.values + s * eta, g, lmax)) - rhs_force(Embedding(w.values - s * eta, g, lmax))) / (2 * s)
    assert l2(g, -fd - lin) < 1e-6


def test_summary_row(grid16):
    row = geometry_of(sphere_embedding(grid16, 16)).summary()
    assert set(row) == {"area", "volume", "H_min", "H_max", "min_detg_ratio"}
    assert abs(row["area"] - 4 * np.pi) < 1e-10
