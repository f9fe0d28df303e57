"""Nonlinear time integration of the damped membrane equation.

    w_tt + b w_t = (dmu(w)/dmu0) (-H(w) + kappa/Vol(w)) N(w)

is stepped with classical RK4 on grid values of (w, w_t); every
acceleration is projected onto degree <= lmax so the state stays band-limited.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import harmonics as sh
from .errors import DegenerateEmbeddingError, MembraneError, NoConvergenceError
from .fitting import SphereFit, decay_fit, sphere_fit  # noqa: F401  (re-exported)
from .geometry import KAPPA, VOL0, Embedding, geometry_of, rhs_force

__all__ = [
    "State",
    "RunConfig",
    "SolveReport",
    "BreatherTrace",
    "default_dt",
    "default_filter_j",
    "initial_state",
    "acceleration",
    "step",
    "energy",
    "simulate",
    "breather_ode",
    "lifespan_scan",
    "sphere_fit",
    "decay_fit",
]

TERMINATIONS = ("time-reached", "degenerate", "norm-threshold")


@dataclass(frozen=True, eq=False)
class State:
    """Membrane configuration (w, w_t) at time t on a fixed grid."""

    w: np.ndarray
    wdot: np.ndarray
    t: float
    grid: sh.SphGrid
    lmax: int

    def __post_init__(self):
        # one memory layout everywhere: transforms of C and F ordered arrays
        # differ in round-off, which would break bit-exact checkpoint resume
        object.__setattr__(self, "w", np.ascontiguousarray(self.w, dtype=float))
        object.__setattr__(self, "wdot", np.ascontiguousarray(self.wdot, dtype=float))

    @property
    def embedding(self):
        return Embedding(self.w, self.grid, self.lmax)

    def finite(self):
        return bool(np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.wdot)))


def default_dt(lmax):
    return 0.5 / np.sqrt(lmax * (lmax + 1))


def default_filter_j(lmax):
    """Largest smoothing index whose cutoff drops every degree above floor(2 lmax / 3).

    Dyadic cutoffs cannot always land exactly on that degree; the kept band
    is then a little narrower.
    """
    lc = (2 * lmax) // 3
    return int(np.floor(np.log2((lc + 1) * (lc + 2) - 1)))


def _project(values, grid, lmax, filter_j=None):
    c = sh.analyze(values, grid, lmax)
    if filter_j is not None:
        c = sh.smooth(c, filter_j)
    return sh.synthesize(c, grid)


def acceleration(w, wdot, grid, lmax, b, kappa=KAPPA):
    F = rhs_force(Embedding(w, grid, lmax), kappa)
    return _project(F, grid, lmax) - b * wdot


def step(s, dt, b=0.0, kappa=KAPPA, filter_j=None):
    """One classical RK4 step; an optional smoothing filter follows it.

    Raises
    ------
    DegenerateEmbeddingError
        With ``stage`` set to the RK sub-stage (1-4) that failed.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    g, L = s.grid, s.lmax

    def acc(w, v, stage):
        try:
            return acceleration(w, v, g, L, b, kappa)
        except DegenerateEmbeddingError as err:
            raise DegenerateEmbeddingError(
                f"RK4 stage {stage} at t={s.t:.6g}: {err}", node=err.node, stage=stage
            ) from err

    w, v = s.w, s.wdot
    k1w, k1v = v, acc(w, v, 1)
    k2w = v + 0.5 * dt * k1v
    k2v = acc(w + 0.5 * dt * k1w, k2w, 2)
    k3w = v + 0.5 * dt * k2v
    k3v = acc(w + 0.5 * dt * k2w, k3w, 3)
    k4w = v + dt * k3v
    k4v = acc(w + dt * k3w, k4w, 4)
    w_new = w + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
    v_new = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if filter_j is not None:
        w_new = _project(w_new, g, L, filter_j)
        v_new = _project(v_new, g, L, filter_j)
    return State(w_new, v_new, s.t + dt, g, L)


def energy(s, kappa=KAPPA, vol0=VOL0, geo=None):
    """E = 1/2 int |w_t|^2 dmu0 + Area(w) - kappa log(Vol(w)/vol0)."""
    geo = geometry_of(s.embedding) if geo is None else geo
    kinetic = 0.5 * sh.integrate(np.sum(s.wdot**2, axis=0), s.grid)
    return float(kinetic + geo.area - kappa * np.log(geo.volume / vol0))


@dataclass
class RunConfig:
    """Parameters of a nonlinear run.

    ``modes`` are (l, m, amplitude, channel) with channel ``normal`` or
    ``tangent``; ``velocity_modes`` use the same format for w_t.  With
    ``random_lmax`` > 0, a seeded random normal perturbation on degrees
    2..random_lmax with graded norm ``epsilon`` (index ``epsilon_index``) is
    added.
    """

    lmax: int = 16
    dt: float = None
    T: float = 10.0
    b: float = 0.0
    kappa: float = KAPPA
    r0: float = 1.0
    rdot0: float = 0.0
    modes: list = field(default_factory=list)
    velocity_modes: list = field(default_factory=list)
    epsilon: float = 0.0
    epsilon_index: float = 0.0
    random_lmax: int = 0
    seed: int = 0
    sample_every: int = 10
    norm_index: float = 4.0
    norms: tuple = (2.0, 4.0)
    threshold: float = None
    filter: bool = True
    grid_factor: float = 1.5

    def validate(self):
        if not (isinstance(self.lmax, (int, np.integer)) and self.lmax >= 2):
            raise ValueError("lmax must be an integer >= 2")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.b < 0:
            raise ValueError("b must be non-negative")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if self.sample_every < 1:
            raise ValueError("sample_every must be >= 1")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.random_lmax and not 2 <= self.random_lmax < self.lmax:
            raise ValueError("random_lmax must lie in [2, lmax)")
        if self.epsilon < 0 or self.epsilon_index < 0:
            raise ValueError("epsilon and epsilon_index must be non-negative")
        if self.grid_factor < 1:
            raise ValueError("grid_factor must be >= 1")
        for spec in list(self.modes) + list(self.velocity_modes):
            l, m, _, channel = spec
            if not (0 <= l <= self.lmax and -l <= m <= l):
                raise ValueError(f"mode ({l}, {m}) outside the band")
            if channel not in ("normal", "tangent"):
                raise ValueError(f"unknown channel {channel!r}")
        return self

    @property
    def step_size(self):
        return default_dt(self.lmax) if self.dt is None else self.dt

    @property
    def grid(self):
        return sh.SphGrid.for_lmax(self.lmax, factor=self.grid_factor)

    @property
    def filter_j(self):
        return default_filter_j(self.lmax) if self.filter else None


def _mode_field(grid, lmax, specs):
    """Sum of amplitude * Y_lm N (normal) or amplitude * grad Y_lm (tangent)."""
    out = np.zeros((3,) + grid.shape)
    for l, m, amp, channel in specs:
        Y = sh.SpectralField.single(lmax, int(l), int(m), float(amp))
        if channel == "normal":
            out += sh.synthesize(Y, grid) * grid.position
        else:
            dt_, dp_ = sh.differentiate(Y, grid)
            out += dt_ * grid.e_theta + dp_ / grid.sin_theta[:, None] * grid.e_phi
    return out


def _random_normal(grid, lmax, top, epsilon, seed, index=0.0):
    """Seeded normal perturbation phi N with sobolev_norm(phi N, index) = epsilon."""
    rng = np.random.default_rng(seed)
    l = np.asarray(sh.degrees(lmax))
    c = rng.standard_normal(sh.ncoeffs(lmax)) * ((l >= 2) & (l <= top))
    eta = sh.synthesize(sh.SpectralField(lmax, c), grid) * grid.position
    # phi x has degree <= top + 1, so the lmax band measures it exactly when top < lmax
    size = sh.sobolev_norm(sh.analyze(eta, grid, lmax), index)
    return eta * (epsilon / size)


def initial_state(cfg):
    cfg.validate()
    g, L = cfg.grid, cfg.lmax
    w = cfg.r0 * g.position + _mode_field(g, L, cfg.modes)
    v = cfg.rdot0 * g.position + _mode_field(g, L, cfg.velocity_modes)
    if cfg.random_lmax:
        w = w + _random_normal(g, L, cfg.random_lmax, cfg.epsilon, cfg.seed, cfg.epsilon_index)
    # band-limit the data so the first step starts from the discrete manifold
    return State(_project(w, g, L), _project(v, g, L), 0.0, g, L)


@dataclass
class SolveReport:
    columns: list
    rows: list
    termination: str = None
    message: str = ""
    final: State = None
    steps: int = 0

    @property
    def times(self):
        return np.array([r[0] for r in self.rows])

    def column(self, name):
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])


def report_columns(norms):
    cols = ["t", "energy", "area", "volume", "cx", "cy", "cz", "radius", "rms"]
    cols += [f"dev_H{n:g}" for n in norms]
    cols += [f"shape_H{n:g}" for n in norms]
    cols += [f"E_{n:g}" for n in norms]
    return cols


def diagnostics(s, cfg):
    """One report row for a state."""
    g, L = s.grid, s.lmax
    geo = geometry_of(s.embedding)
    E = energy(s, cfg.kappa, geo=geo)
    try:
        fit = sphere_fit(s.embedding)
    except NoConvergenceError as err:
        # far from round: report the last Gauss-Newton iterate
        a, r = err.last
        dist = np.linalg.norm(s.w - a[:, None, None], axis=0) - r
        rms = np.sqrt(sh.integrate(dist**2, g) / (4 * np.pi))
        fit = SphereFit(a, float(r), float(rms), -1, err.residual)
    dev = sh.analyze(s.w - g.position, g, L)
    # radial distance to the fitted sphere; blind to reparametrisation
    radial = np.linalg.norm(s.w - fit.center[:, None, None], axis=0) - fit.radius
    fitdev = sh.analyze(radial, g, L)
    vel = sh.analyze(s.wdot, g, L)
    row = [s.t, E, geo.area, geo.volume, *fit.center, fit.radius, fit.rms]
    row += [sh.sobolev_norm(dev, n) for n in cfg.norms]
    row += [sh.sobolev_norm(fitdev, n) for n in cfg.norms]
    row += [
        float(np.sqrt(sh.sobolev_norm(vel, max(n - 1, 0)) ** 2 + sh.sobolev_norm(dev, n) ** 2))
        for n in cfg.norms
    ]
    return [float(x) for x in row]


def simulate(cfg, state=None, on_sample=None, on_step=None):
    """Run the nonlinear evolution described by ``cfg``.

    Numerical failures end the run with a termination reason instead of an
    exception.  ``on_sample(row)`` sees every report row as it is produced
    and ``on_step(state, k)`` every accepted step (checkpointing hooks).
    """
    cfg.validate()
    s = initial_state(cfg) if state is None else state
    dt = cfg.step_size
    fj = cfg.filter_j
    cols = report_columns(cfg.norms)
    report = SolveReport(cols, [])

    def emit(st):
        row = diagnostics(st, cfg)
        report.rows.append(row)
        if on_sample is not None:
            on_sample(row)

    def over(st):
        if cfg.threshold is None:
            return False
        dev = sh.sobolev_norm(sh.analyze(st.w - st.grid.position, st.grid, st.lmax), cfg.norm_index)
        return dev > cfg.threshold

    n_steps = int(np.ceil((cfg.T - s.t) / dt - 1e-9))
    k0 = int(round(s.t / dt))
    try:
        crossed = over(s)
        if state is None:
            emit(s)
        k = k0
        while not crossed and k < k0 + n_steps:
            k += 1
            s = step(s, min(dt, cfg.T - s.t), cfg.b, cfg.kappa, fj)
            report.steps += 1
            if not s.finite():
                raise DegenerateEmbeddingError(f"non-finite state at t={s.t:.6g}")
            crossed = over(s)
            if k % cfg.sample_every == 0 or k == k0 + n_steps or crossed:
                emit(s)
            if on_step is not None:
                on_step(s, k)
        if crossed:
            report.termination = "norm-threshold"
            report.message = f"graded deviation exceeded {cfg.threshold:g} at t={s.t:.6g}"
        else:
            report.termination = "time-reached"
    except (DegenerateEmbeddingError, FloatingPointError, np.linalg.LinAlgError) as err:
        report.termination = "degenerate"
        report.message = f"{type(err).__name__}: {err}"
    report.final = s
    return report


@dataclass
class BreatherTrace:
    times: np.ndarray
    r: np.ndarray
    rdot: np.ndarray
    ode_energy: np.ndarray
    period: float
    period_from_fallback: bool


def _breather_rhs(r):
    return -2.0 * r + 2.0 / r


def breather_ode(r0, rdot0=0.0, dt=1e-3, T=10.0):
    """RK4 trace of r'' = -2r + 2/r with the conserved rdot^2/2 + r^2 - 2 log r."""
    if not r0 > 0:
        raise ValueError("r0 must be positive")
    n = int(np.ceil(T / dt - 1e-9))
    r = np.empty(n + 1)
    v = np.empty(n + 1)
    r[0], v[0] = r0, rdot0
    for k in range(n):
        x, y = r[k], v[k]
        k1r, k1v = y, _breather_rhs(x)
        k2r, k2v = y + 0.5 * dt * k1v, _breather_rhs(x + 0.5 * dt * k1r)
        k3r, k3v = y + 0.5 * dt * k2v, _breather_rhs(x + 0.5 * dt * k2r)
        k4r, k4v = y + dt * k3v, _breather_rhs(x + dt * k3r)
        r[k + 1] = x + dt / 6 * (k1r + 2 * k2r + 2 * k3r + k4r)
        v[k + 1] = y + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        if not r[k + 1] > 0:
            raise MembraneError(f"breather radius collapsed to {r[k + 1]:.3g} at t={(k + 1) * dt:.6g}")
    t = dt * np.arange(n + 1)
    E = 0.5 * v**2 + r**2 - 2 * np.log(r)
    up = np.nonzero((r[:-1] < 1.0) & (r[1:] >= 1.0))[0]
    crossings = t[up] + dt * (1.0 - r[up]) / (r[up + 1] - r[up])
    if len(crossings) >= 2:
        period, fallback = float(np.mean(np.diff(crossings))), False
    else:
        # small-oscillation frequency 2 from V''(1) = 4
        period, fallback = np.pi, True
    return BreatherTrace(t, r, v, E, period, fallback)


def lifespan_scan(epsilons, b=0.0, threshold=0.3, base=None, horizon=30.0):
    """Exit time of the graded deviation above ``threshold`` for each epsilon.

    Returns a dict with per-epsilon rows (epsilon, T_exit, termination,
    global flag) and the log-log slope of T_exit against epsilon (None when
    fewer than two runs exited).
    """
    base = RunConfig(T=horizon, b=b, random_lmax=4) if base is None else base
    rows = []
    for k, eps in enumerate(epsilons):
        cfg = replace(base, epsilon=float(eps), threshold=threshold, T=horizon, b=b, seed=base.seed)
        rep = simulate(cfg)
        t_exit = float(rep.final.t)
        rows.append(
            {
                "epsilon": float(eps),
                "T_exit": t_exit,
                "termination": rep.termination,
                "global": rep.termination == "time-reached",
                "message": rep.message,
            }
        )
    exited = [r for r in rows if not r["global"] and r["T_exit"] > 0]
    slope = None
    if len(exited) >= 2 and len({r["epsilon"] for r in exited}) >= 2:
        x = np.log([r["epsilon"] for r in exited])
        y = np.log([r["T_exit"] for r in exited])
        slope = float(np.polyfit(x, y, 1)[0])
    return {"rows": rows, "slope": slope}
