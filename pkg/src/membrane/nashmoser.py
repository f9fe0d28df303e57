"""Graded scales, dyadic smoothing and a smoothed Newton iteration.

The smoothing operators are the spectral cutoffs S_j (keep l(l+1) <= 2^j)
and R_j = S_{j+1} - S_j their dyadic blocks.  ``solve_by_iteration`` solves
the damped membrane Cauchy problem on [0, T] by Newton steps whose right
inverse is the flat linearisation at the round sphere.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import harmonics as sh
from .errors import DivergenceError, InsufficientDataError
from .geometry import KAPPA, Embedding, rhs_force
from .linop import L_id_multipliers
from .linsolve import Forcing, _hmax, _propagate

__all__ = [
    "ScaleSpec",
    "validate_exponents",
    "AxiomReport",
    "check_smoothing_axioms",
    "Trajectory",
    "residual",
    "flat_inverse",
    "IterationTrace",
    "IterationResult",
    "solve_by_iteration",
    "REFERENCE_TUPLES",
]

# exponent tuples (a0, mu, a1, lambda, rho, a2) behind the damped and the undamped estimates
REFERENCE_TUPLES = ((2, 4, 12, 41, 33, 55), (2, 2, 7, 24, 21, 43))


@dataclass(frozen=True)
class ScaleSpec:
    """Grading exponents of a tame scale.

    Only non-negativity is enforced here; use ``strict`` to also reject
    tuples that violate the exponent inequalities.
    """

    a0: float
    mu: float
    a1: float
    lam: float
    rho: float
    a2: float
    c: float = None

    def __post_init__(self):
        vals = [self.a0, self.mu, self.a1, self.lam, self.rho, self.a2]
        if self.c is not None:
            vals.append(self.c)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError("grading exponents must be finite and non-negative")

    @classmethod
    def strict(cls, *args, **kw):
        s = cls(*args, **kw)
        bad = validate_exponents(s)
        if bad:
            raise ValueError("invalid exponents: " + "; ".join(bad))
        return s


def validate_exponents(s):
    """List the violated inequalities (empty when the tuple is admissible).

    Checks a0 <= mu <= a1, a1 + lam/2 < rho < a2 + lam and 2 rho < a1 + a2.
    """
    if not isinstance(s, ScaleSpec):
        s = ScaleSpec(*s)
    out = []
    if not s.a0 <= s.mu:
        out.append(f"a0 <= mu fails ({s.a0:g} > {s.mu:g})")
    if not s.mu <= s.a1:
        out.append(f"mu <= a1 fails ({s.mu:g} > {s.a1:g})")
    if not s.a1 + s.lam / 2 < s.rho:
        out.append(f"a1 + lam/2 < rho fails ({s.a1 + s.lam / 2:g} >= {s.rho:g})")
    if not s.rho < s.a2 + s.lam:
        out.append(f"rho < a2 + lam fails ({s.rho:g} >= {s.a2 + s.lam:g})")
    if not 2 * s.rho < s.a1 + s.a2:
        out.append(f"2 rho < a1 + a2 fails ({2 * s.rho:g} >= {s.a1 + s.a2:g})")
    return out


# ---------------------------------------------------------------- smoothing


def _lam_weights(lmax, a):
    """Squared weights of the lambda-convention norm: 1 on l = 0, lambda^a above."""
    l = np.asarray(sh.degrees(lmax), float)
    lam = l * (l + 1)
    return np.where(l == 0, 1.0, lam**a)


def _norm(c, w):
    return np.sqrt(np.sum(w * c**2, axis=-1))


def _cut(lmax, j):
    l = np.asarray(sh.degrees(lmax), float)
    return (l * (l + 1) <= 2.0**j).astype(float)


@dataclass
class AxiomReport:
    """Measured best constants of the smoothing axioms.

    ``bounded``: max ||S_j u||_a / ||u||_a.
    ``smoothing``: max ||S_j u||_b / (2^{j(b-a)/2} ||u||_a), b > a.
    ``approximation``: max ||(1-S_j) u||_a 2^{j(b-a)/2} / ||u||_b, b > a.
    ``blocks``: max ||u||_a^2 / sum_{j>=0} ||R_j u||_a^2.
    ``telescoping``: worst relative error of
    sum_{j>=j0} ||R_j u||_0^2 = ||u||_0^2 - ||S_{j0} u||_0^2.
    """

    lmax: int
    a: float
    b: float
    samples: int
    jmax: int
    bounded: float
    smoothing: float
    approximation: float
    blocks: float
    telescoping: float

    def constants(self):
        return {
            "bounded": self.bounded,
            "smoothing": self.smoothing,
            "approximation": self.approximation,
            "blocks": self.blocks,
        }


def _top_index(lmax):
    # smallest j with S_j the identity on degree <= lmax
    return int(np.ceil(np.log2(max(lmax * (lmax + 1), 1))))


def check_smoothing_axioms(samples=200, lmax=16, pairs=((0.0, 2.0),), seed=0, fields=None, decay=1.0):
    """Measure the smoothing-operator constants over random scalar fields.

    Norms use the lambda = l(l+1) convention: ||u||_a^2 = |u_00|^2 +
    sum lambda^a |u_lm|^2.  Random fields have independent normal
    coefficients scaled by (1 + lambda)^(-decay/2) so the measured constants
    describe a fixed regularity class as lmax grows.

    Parameters
    ----------
    pairs : iterable of (a, b) with a < b
    fields : optional array (n, ncoeffs) used instead of random samples

    Returns
    -------
    list of AxiomReport, one per pair
    """
    if lmax < 1:
        raise ValueError("lmax must be >= 1")
    n = sh.ncoeffs(lmax)
    if fields is None:
        rng = np.random.default_rng(seed)
        l = np.asarray(sh.degrees(lmax), float)
        U = rng.standard_normal((samples, n)) * (1 + l * (l + 1)) ** (-decay / 2)
    else:
        U = np.atleast_2d(np.asarray(fields, float))
        if U.shape[-1] != n:
            raise ValueError(f"fields must have {n} coefficients")
    J = _top_index(lmax)
    js = np.arange(0, J + 1)
    cuts = np.array([_cut(lmax, j) for j in js])
    blocks = cuts[1:] - cuts[:-1]
    # telescoping at the L^2 level
    w0 = _lam_weights(lmax, 0.0)
    tot0 = _norm(U, w0) ** 2
    tele = 0.0
    for j0 in js:
        lhs = sum(_norm(U * blocks[j], w0) ** 2 for j in range(j0, J))
        rhs = tot0 - _norm(U * cuts[j0], w0) ** 2
        tele = max(tele, float(np.max(np.abs(lhs - rhs) / tot0)))

    reports = []
    for a, b in pairs:
        if not a < b:
            raise ValueError("pairs must satisfy a < b")
        wa, wb = _lam_weights(lmax, a), _lam_weights(lmax, b)
        na, nb = _norm(U, wa), _norm(U, wb)
        bounded = smoothing = approx = 0.0
        for j in js[1:]:
            S = U * cuts[j]
            bounded = max(bounded, float(np.max(_norm(S, wa) / na)))
            smoothing = max(smoothing, float(np.max(_norm(S, wb) / (2.0 ** (j * (b - a) / 2) * na))))
            approx = max(approx, float(np.max(_norm(U - S, wa) * 2.0 ** (j * (b - a) / 2) / nb)))
        block_sum = sum(_norm(U * blk, wa) ** 2 for blk in blocks)
        with np.errstate(divide="ignore"):
            ratio = np.where(block_sum > 0, na**2 / block_sum, np.inf)
        reports.append(
            AxiomReport(lmax, a, b, len(U), int(J), bounded, smoothing, approx, float(np.max(ratio)), tele)
        )
    return reports


# ---------------------------------------------------------------- residual


@dataclass(eq=False)
class Trajectory:
    """Uniformly sampled embedding w(t_k) (grid values) with optional velocities."""

    times: np.ndarray
    w: np.ndarray
    grid: sh.SphGrid
    lmax: int
    wdot: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.w = np.asarray(self.w, float)
        if self.w.shape != (len(self.times), 3) + self.grid.shape:
            raise ValueError("trajectory values must have shape (nt, 3, nlat, nlon)")

    @property
    def dt(self):
        d = np.diff(self.times)
        if len(d) == 0:
            raise InsufficientDataError("trajectory has a single sample")
        if np.ptp(d) > 1e-9 * d[0]:
            raise ValueError("trajectory samples must be uniform in time")
        return float(d[0])

    def deviation(self, k):
        return self.w[k] - self.grid.position


def _band_force(w, grid, lmax, kappa):
    F = rhs_force(Embedding(w, grid, lmax), kappa)
    return sh.synthesize(sh.analyze(F, grid, lmax), grid)


def residual(traj, b, kappa=KAPPA):
    """w_tt + b w_t - F(w) by centred differences at the interior samples.

    The force is band-limited to the trajectory's lmax, matching the
    discrete dynamics.  Returns (times, values) with values of shape
    (nt - 2, 3, nlat, nlon).

    Raises
    ------
    InsufficientDataError
        With fewer than three samples.
    """
    if len(traj.times) < 3:
        raise InsufficientDataError("residual needs at least three samples")
    h = traj.dt
    w = traj.w
    acc = (w[2:] - 2 * w[1:-1] + w[:-2]) / h**2
    vel = (w[2:] - w[:-2]) / (2 * h)
    F = np.stack([_band_force(w[k], traj.grid, traj.lmax, kappa) for k in range(1, len(w) - 1)])
    return traj.times[1:-1], acc + b * vel - F


def _extend(values):
    """Quadratic extrapolation of interior samples to both end points."""
    first = 3 * values[0] - 3 * values[1] + values[2]
    last = 3 * values[-1] - 3 * values[-2] + values[-3]
    return np.concatenate([first[None], values, last[None]])


@lru_cache(maxsize=8)
def _flat_modes(grid, lmax):
    """Eigen-decomposition of the flat operator on R^3 fields of degree <= lmax.

    The operator is eta -> P_lmax[(L_id (eta . x)) x], i.e. the normal
    linearisation at the round sphere Galerkin-projected onto the band, which
    keeps the top degrees consistent with the band-limited residual.
    Returns (lam, V) with lam >= 0 and orthonormal columns V in the flattened
    (component, coefficient) space.
    """
    n = sh.ncoeffs(lmax)
    x = grid.position
    band = min(lmax + 1, grid.max_lmax)
    E = np.eye(3 * n).reshape(3 * n, 3, n)
    vals = sh.synthesize(sh.SpectralField(lmax, E), grid)
    phi = sh.analyze(np.sum(vals * x, axis=1), grid, band)
    Lphi = sh.synthesize(sh.SpectralField(band, phi.coeffs * L_id_multipliers(band)), grid)
    M = sh.analyze(Lphi[:, None] * x, grid, lmax).coeffs.reshape(3 * n, 3 * n).T
    mu, V = np.linalg.eigh(0.5 * (M + M.T))
    return np.maximum(-mu, 0.0), V


def flat_inverse(f, times, d0, d1, b, grid, lmax):
    """Solve the linearisation at the round sphere on the band ``lmax``.

        eta'' + b eta' - A eta = f,  eta(0) = d0, eta'(0) = d1

    with A the band-projected normal operator (see ``_flat_modes``);
    tangential components only feel the damping.  ``f`` holds samples at
    ``times`` (or None).  Returns SpectralFields (eta, eta_t) with a leading
    time axis.
    """
    lam, V = _flat_modes(grid, lmax)
    n = sh.ncoeffs(lmax)
    a0 = sh.analyze(d0, grid, lmax).coeffs.reshape(-1) @ V
    v0 = sh.analyze(d1, grid, lmax).coeffs.reshape(-1) @ V
    forcing = Forcing()
    if f is not None:
        fc = sh.analyze(f, grid, lmax).coeffs.reshape(len(times), -1)
        forcing = Forcing(fc @ V, times)
    a, v = _propagate(lam, b, a0, v0, forcing, np.asarray(times, float), _hmax(lam, b))
    shape = (len(times), 3, n)
    return sh.SpectralField(lmax, (a @ V.T).reshape(shape)), sh.SpectralField(lmax, (v @ V.T).reshape(shape))


# ---------------------------------------------------------------- iteration


@dataclass
class IterationTrace:
    """Per-iterate records: residual norms, smoothing index, correction size."""

    indices: tuple
    rows: list = field(default_factory=list)

    columns = ("iterate", "res_a", "res_b", "res_c", "j", "correction", "accepted")

    def add(self, k, norms, j, corr, accepted):
        self.rows.append((int(k), *[float(v) for v in norms], None if j is None else int(j), float(corr), bool(accepted)))

    @property
    def residuals(self):
        return np.array([r[1 : 1 + len(self.indices)] for r in self.rows])

    @property
    def smoothing_indices(self):
        return [r[-3] for r in self.rows if r[-3] is not None]


@dataclass(eq=False)
class IterationResult:
    trajectory: Trajectory
    trace: IterationTrace
    converged: bool
    iterations: int


def _graded(values, grid, lmax, n):
    """sup over samples of the graded norm of R^3 fields stacked on axis 0."""
    c = sh.analyze(values, grid, lmax).coeffs
    l = np.asarray(sh.degrees(lmax), float)
    w = (1 + l * (l + 1)) ** n
    return float(np.max(np.sqrt(np.sum(w * c**2, axis=(-2, -1)))))


def _full_residual(traj, u0, u1, b, kappa, linear_model, forcing):
    t_in, r = residual(traj, b, kappa) if not linear_model else _linear_residual(traj, b)
    if forcing is not None:
        r = r - forcing[1:-1]
    r_all = _extend(r)
    mis0 = traj.w[0] - (traj.grid.position + u0)
    mis1 = traj.wdot[0] - u1
    return r_all, mis0, mis1


def _linear_residual(traj, b):
    """Residual of the flat linear model (the linearisation at the sphere)."""
    h = traj.dt
    u = traj.w - traj.grid.position
    acc = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    vel = (u[2:] - u[:-2]) / (2 * h)
    g, x = traj.grid, traj.grid.position
    band = min(traj.lmax + 1, g.max_lmax)
    phi = np.sum(u[1:-1] * x, axis=1)
    c = sh.analyze(phi, g, band)
    Lphi = sh.synthesize(sh.SpectralField(band, c.coeffs * L_id_multipliers(band)), g)
    return traj.times[1:-1], acc + b * vel - Lphi[:, None] * x


def _norms(r_all, mis0, mis1, grid, lmax, indices):
    return [
        _graded(r_all, grid, lmax, n) + _graded(mis0[None], grid, lmax, n) + _graded(mis1[None], grid, lmax, n)
        for n in indices
    ]


def solve_by_iteration(
    u0,
    u1,
    b,
    T,
    lmax,
    grid=None,
    dt=0.01,
    schedule=None,
    tol=None,
    max_iter=12,
    kappa=KAPPA,
    indices=(0.0, 2.0, 4.0),
    stop_index=1,
    forcing=None,
    linear_model=False,
    callback=None,
):
    """Smoothed Newton iteration for w'' + b w' = F(w), w(0) = i0 + u0, w'(0) = u1.

    Starting from the static sphere, iterate

        w_{k+1} = w_k + S_{j_k} eta_k

    where eta_k solves the flat linearised problem with forcing minus the
    current residual and Cauchy data equal to the current data mismatch.
    The residual norm is the sup in time of the graded norm of the
    centred-difference residual plus the graded norms of both data
    mismatches; ``indices[stop_index]`` is the stopping index.

    Parameters
    ----------
    u0, u1 : grid values (3, nlat, nlon) of the initial perturbation
    schedule : smoothing indices j_k; default j_k = k + 3
    tol : stopping threshold on the residual norm; default 1e-6 times the
        initial norm (the centred second difference has a round-off floor
        near 1e-16 |w| / dt^2)
    forcing : optional samples (nt, 3, nlat, nlon) added to the right side
    linear_model : iterate on the flat linear model instead of the full
        nonlinear residual (a consistency check: converges in one step up
        to the time-differencing error)

    Raises
    ------
    DivergenceError
        If the stopping norm grows on three consecutive iterates.
    DegenerateEmbeddingError
        If an iterate stops being an immersion.
    """
    grid = sh.SphGrid.for_lmax(lmax) if grid is None else grid
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    if b < 0:
        raise ValueError("damping must be non-negative")
    nt = int(round(T / dt))
    if nt < 3 or abs(nt * dt - T) > 1e-9 * T:
        raise ValueError("T must be a multiple of dt with at least three steps")
    times = dt * np.arange(nt + 1)
    if schedule is None:
        schedule = [k + 3 for k in range(max_iter)]
    schedule = list(schedule)
    if any(b2 < a2 for a2, b2 in zip(schedule, schedule[1:])):
        raise ValueError("smoothing schedule must be nondecreasing")

    def band(v):
        return sh.synthesize(sh.analyze(v, grid, lmax), grid)

    u0, u1 = band(np.asarray(u0, float)), band(np.asarray(u1, float))
    x = grid.position
    w = np.broadcast_to(x, (nt + 1,) + x.shape).copy()
    wdot = np.zeros_like(w)
    traj = Trajectory(times, w, grid, lmax, wdot)
    trace = IterationTrace(tuple(indices))

    r_all, mis0, mis1 = _full_residual(traj, u0, u1, b, kappa, linear_model, forcing)
    norms = _norms(r_all, mis0, mis1, grid, lmax, indices)
    trace.add(0, norms, None, 0.0, True)
    if callback is not None:
        callback(0, traj, norms)
    history = [norms[stop_index]]
    trivial = not (np.any(u0) or np.any(u1) or (forcing is not None and np.any(forcing)))
    if trivial:
        # the static sphere solves the problem exactly
        return IterationResult(traj, trace, True, 0)
    if tol is None:
        tol = 1e-6 * history[0]
    growth = 0
    k = 0
    while history[-1] > tol and k < min(max_iter, len(schedule)):
        j = schedule[k]
        eta, eta_t = flat_inverse(-r_all, times, -mis0, -mis1, b, grid, lmax)
        ce, cv = sh.smooth(eta, j), sh.smooth(eta_t, j)
        traj = Trajectory(times, traj.w + sh.synthesize(ce, grid), grid, lmax, traj.wdot + sh.synthesize(cv, grid))
        k += 1
        r_all, mis0, mis1 = _full_residual(traj, u0, u1, b, kappa, linear_model, forcing)
        norms = _norms(r_all, mis0, mis1, grid, lmax, indices)
        accepted = norms[stop_index] < history[-1]
        corr = float(np.max(np.sqrt(np.sum(ce.coeffs**2, axis=(-2, -1)))))
        trace.add(k, norms, j, corr, accepted)
        if callback is not None:
            callback(k, traj, norms)
        growth = 0 if accepted else growth + 1
        history.append(norms[stop_index])
        if growth >= 3:
            raise DivergenceError(
                f"residual grew on {growth} consecutive iterates (last {history[-1]:.3e})",
                trace=trace,
            )
    return IterationResult(traj, trace, history[-1] <= tol, k)
