"""Least-squares fits used to measure convergence: spheres and exponential rates."""

from typing import NamedTuple

import numpy as np

from . import harmonics as sh
from .errors import DegenerateEmbeddingError, InsufficientDataError, NoConvergenceError, NonpositiveValueError


class SphereFit(NamedTuple):
    center: np.ndarray
    radius: float
    rms: float
    iterations: int
    grad_norm: float


class DecayFit(NamedTuple):
    rate: float
    intercept: float
    r2: float


def _points_and_weights(w, grid=None):
    if grid is None:
        values, grid = w.values, w.grid
    else:
        values = np.asarray(w, float)
    pts = values.reshape(3, -1).T
    return pts, grid.weights.ravel(), values, grid


def sphere_fit(w, grid=None, tol=1e-12, maxiter=50):
    """Weighted Gauss-Newton fit of a sphere to the nodes of an embedding.

    Minimises sum_i q_i (|w_i - a| - r)^2 with q_i the reference quadrature
    weights.  Starts from the area-weighted centroid and r = sqrt(area/4pi).

    Parameters
    ----------
    w : Embedding or array of shape (3, nlat, nlon)
    grid : SphGrid, required when ``w`` is a plain array

    Returns
    -------
    SphereFit
    """
    from .geometry import Embedding, geometry_of

    emb = w if isinstance(w, Embedding) else None
    pts, q, values, grid = _points_and_weights(w, None if emb is not None else grid)
    if emb is None:
        emb = Embedding(values, grid, grid.max_lmax)
    try:
        geo = geometry_of(emb)
        dmu = (geo.area_ratio).ravel() * q
        a = (pts * dmu[:, None]).sum(0) / dmu.sum()
        r = np.sqrt(geo.area / (4 * np.pi))
    except DegenerateEmbeddingError:
        a = (pts * q[:, None]).sum(0) / q.sum()
        r = float(np.sqrt((q * np.sum((pts - a) ** 2, axis=1)).sum() / q.sum()))

    grad_norm = np.inf
    for it in range(1, maxiter + 1):
        d = pts - a
        dist = np.sqrt(np.sum(d * d, axis=1))
        res = dist - r
        J = np.hstack([-d / dist[:, None], -np.ones((len(dist), 1))])
        JW = J * q[:, None]
        grad = JW.T @ res
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
        step = np.linalg.solve(JW.T @ J, -grad)
        a = a + step[:3]
        r = r + step[3]
        if np.linalg.norm(step) <= 1e-15 * max(1.0, abs(r)):
            d = pts - a
            dist = np.sqrt(np.sum(d * d, axis=1))
            res = dist - r
            grad_norm = float(np.linalg.norm((J * q[:, None]).T @ res))
            break
    else:
        raise NoConvergenceError(
            f"sphere fit did not converge in {maxiter} iterations (gradient {grad_norm:.3e})",
            last=(a, r),
            residual=grad_norm,
        )
    rms = float(np.sqrt((q * res**2).sum() / q.sum()))
    return SphereFit(a, float(r), rms, it, grad_norm)


def _peaks(t, v):
    inner = (v[1:-1] >= v[:-2]) & (v[1:-1] >= v[2:])
    idx = np.nonzero(inner)[0] + 1
    return t[idx], v[idx]


def decay_fit(t, values, window=(0.5, 1.0), envelope=False, floor=None, min_samples=10):
    """Fit values ~ exp(intercept - rate t) by least squares on log values.

    ``window`` is a pair of fractions of the time span.  ``envelope`` keeps
    only local maxima first (for oscillating signals); ``floor`` drops
    samples at or below a round-off plateau.

    Raises
    ------
    NonpositiveValueError
        If any value is <= 0 (before the floor is applied).
    InsufficientDataError
        If fewer than ``min_samples`` points remain in the window.
    """
    t = np.asarray(t, float)
    v = np.asarray(values, float)
    if t.shape != v.shape:
        raise ValueError("times and values differ in length")
    if floor is None and np.any(~(v > 0)):
        raise NonpositiveValueError("decay fit needs strictly positive values")
    lo, hi = window
    if not 0 <= lo < hi <= 1:
        raise ValueError("window must satisfy 0 <= lo < hi <= 1")
    if t.size == 0:
        raise InsufficientDataError("empty series")
    t0, t1 = t[0], t[-1]
    sel = (t >= t0 + lo * (t1 - t0) - 1e-12) & (t <= t0 + hi * (t1 - t0) + 1e-12)
    ts, vs = t[sel], v[sel]
    if envelope:
        ts, vs = _peaks(ts, vs)
    if floor is not None:
        keep = vs > floor
        ts, vs = ts[keep], vs[keep]
    if ts.size < min_samples:
        raise InsufficientDataError(f"only {ts.size} samples in the fit window (need {min_samples})")
    y = np.log(vs)
    slope, intercept = np.polyfit(ts, y, 1)
    fit = intercept + slope * ts
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.sum(y**2))) else 1.0 - ss_res / ss_tot
    return DecayFit(float(-slope), float(intercept), float(r2))


def graded_deviation(values, grid, lmax, n, reference=None):
    """Graded norm of (values - reference) over the three components."""
    diff = values if reference is None else values - reference
    return sh.sobolev_norm(sh.analyze(diff, grid, lmax), n)
