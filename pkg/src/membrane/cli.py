"""Command-line experiment harness.

Every run writes ``report.csv`` (and command-specific extras) plus exactly
one ``manifest.json`` into ``--out``.  Exit codes: 0 success, 2 invalid
configuration (only the manifest is written), 3 numerical failure (partial
outputs kept), 1 unexpected internal error.
"""

import argparse
import datetime
import json
import math
import os
import sys
import time
import traceback
from dataclasses import replace

import numpy as np

from . import __version__, io
from . import harmonics as sh
from .config import COMMANDS, load_config
from .dynamics import RunConfig, _mode_field, breather_ode, report_columns, simulate
from .errors import CheckpointError, ConfigError, DivergenceError, MembraneError
from .fitting import decay_fit
from .linop import L_id_multipliers, ZeroModeProjection, apply_L_id, rayleigh_extremes
from .linsolve import beta, evolve_linear, triple_split
from .nashmoser import check_smoothing_axioms, solve_by_iteration

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


class NumericalFailure(MembraneError):
    """A run ended early for numerical reasons; outputs so far are kept."""


class Context:
    """Output bookkeeping shared by the command handlers."""

    def __init__(self, out, command, cfg, resume=None):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.resume = resume
        self.outputs = []
        self.grid = None
        self.termination = None
        self.message = ""
        self.results = {}

    def path(self, name):
        p = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        if name not in self.outputs:
            self.outputs.append(name)
        return p

    def set_grid(self, lmax, grid):
        self.grid = {"lmax": int(lmax), "nlat": int(grid.nlat), "nlon": int(grid.nlon)}


def _run_config(cfg, **extra):
    keys = RunConfig.__dataclass_fields__
    params = {k: v for k, v in cfg.items() if k in keys}
    params.update(extra)
    rc = RunConfig(**params)
    rc.modes, rc.velocity_modes = list(rc.modes), list(rc.velocity_modes)
    try:
        return rc.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _safe_fit(t, v, **kw):
    v = np.asarray(v, float)
    if v.size == 0 or not np.any(v > 0):
        return None
    env = kw.pop("envelope", False)
    window = kw.pop("window", (0.5, 1.0))
    # fast decays reach the round-off floor early; retry on the first half
    for e, wdw in ((env, window), (False, window), (env, (0.0, 0.5)), (False, (0.0, 0.5))):
        try:
            return decay_fit(t, v, floor=1e-12 * float(v.max()), envelope=e, window=wdw, **kw).rate
        except (MembraneError, ValueError):
            continue
    return None


# ---------------------------------------------------------------- commands


def cmd_simulate(ctx, cfg):
    rc = _run_config(cfg)
    every = cfg["checkpoint_every"]
    ctx.set_grid(rc.lmax, rc.grid)
    columns = report_columns(rc.norms)
    state, append = None, False
    report_path = os.path.join(ctx.out, "report.csv")
    if ctx.resume is not None:
        try:
            state = io.read_checkpoint(ctx.resume)
        except CheckpointError as err:
            raise ConfigError(f"cannot resume: {err}") from err
        if state.lmax != rc.lmax or state.grid != rc.grid:
            raise ConfigError(
                f"checkpoint grid (lmax {state.lmax}, {state.grid.nlat}x{state.grid.nlon}) "
                f"does not match the configuration (lmax {rc.lmax}, {rc.grid.nlat}x{rc.grid.nlon})"
            )
        if not state.t < rc.T:
            raise ConfigError(f"checkpoint time {state.t:g} is not before T={rc.T:g}")
        append = _truncate_report(report_path, columns, state.t)

    csv_out = io.CsvStream(ctx.path("report.csv"), columns, append=append)
    nsteps = int(np.ceil((rc.T - (0.0 if state is None else state.t)) / rc.step_size - 1e-9))
    last = (0 if state is None else int(round(state.t / rc.step_size))) + nsteps

    def on_step(s, k):
        if every and (k % every == 0 or k == last):
            io.write_checkpoint(ctx.path(f"checkpoints/step_{k:08d}.memb"), s)

    try:
        rep = simulate(rc, state=state, on_sample=csv_out.write, on_step=on_step)
    finally:
        csv_out.close()
    ctx.termination, ctx.message = rep.termination, rep.message
    ctx.results = {"steps": rep.steps, "final_t": float(rep.final.t), "dt": rc.step_size, "filter_j": rc.filter_j}
    if rep.termination == "degenerate":
        raise NumericalFailure(rep.message)


def _truncate_report(path, columns, t_cut):
    """Drop rows after the checkpoint time; True when rows remain to append to."""
    if not os.path.exists(path):
        return False
    with open(path, newline="") as fh:
        lines = fh.read().splitlines(keepends=True)
    if not lines:
        return False
    if lines[0].rstrip("\r\n").split(",") != columns:
        raise ConfigError("existing report.csv has different columns; cannot resume into it")
    keep = [lines[0]]
    for line in lines[1:]:
        try:
            t = float(line.split(",", 1)[0])
        except ValueError:
            break  # torn final line from a killed run
        if not line.endswith("\n") or t > t_cut:
            break
        keep.append(line)
    io.atomic_write_bytes(path, "".join(keep).encode())
    return True


def _scalar_data(cfg, lmax):
    L = sh.degrees(lmax)
    c0, c1 = np.zeros(sh.ncoeffs(lmax)), np.zeros(sh.ncoeffs(lmax))
    for target, key in ((c0, "modes"), (c1, "velocity_modes")):
        for l, m, amp, channel in cfg[key]:
            if channel != "normal":
                raise ConfigError("the linear command evolves a scalar normal component; tangent modes are not allowed")
            target[sh.lm_index(l, m)] += amp
    top = cfg.get("random_lmax", 0)
    if top:
        if not 2 <= top <= lmax:
            raise ConfigError("random_lmax must lie in [2, lmax]")
        rng = np.random.default_rng(cfg["seed"])
        r = rng.standard_normal(c0.size) * ((L >= 2) & (L <= top))
        c0 += cfg["epsilon"] * r / np.linalg.norm(r)
    return sh.SpectralField(lmax, c0), sh.SpectralField(lmax, c1)


def cmd_linear(ctx, cfg):
    L, b = cfg["lmax"], cfg["b"]
    phi0, dphi0 = _scalar_data(cfg, L)
    times = np.linspace(0.0, cfg["T"], cfg["samples"])
    ctx.set_grid(L, sh.SphGrid.for_lmax(L))
    tr = evolve_linear(None, b, phi0, dphi0, None, times, lmax=L)
    norms = np.linalg.norm(tr.phi.coeffs, axis=-1)
    h2 = np.array([sh.sobolev_norm(tr.at(k), 2) for k in range(len(times))])
    dist = np.linalg.norm(tr.phi.coeffs - tr.limit.coeffs, axis=-1) if tr.has_limit else None
    rows = [[t, n, h, None if dist is None else dist[k]] for k, (t, n, h) in enumerate(zip(times, norms, h2))]
    io.write_csv(ctx.path("report.csv"), ["t", "norm_L2", "norm_H2", "dist_limit_L2"], rows)
    ctx.results = {
        "beta": beta(b),
        "has_limit": tr.has_limit,
        "fitted_rate": None if dist is None else _safe_fit(times, dist, window=tuple(cfg["window"]), envelope=b < 2),
    }
    ctx.termination = "time-reached"


def cmd_split(ctx, cfg):
    L, b = cfg["lmax"], cfg["b"]
    if not b > 0:
        raise ConfigError("the split needs b > 0")
    g = sh.SphGrid.for_lmax(L)
    ctx.set_grid(L, g)
    eta0 = _mode_field(g, L, cfg["modes"])
    deta0 = _mode_field(g, L, cfg["velocity_modes"])
    times = np.linspace(0.0, cfg["T"], cfg["samples"])
    sp = triple_split(None, b, eta0, deta0, None, times, lmax=L, grid=g)

    def l2(v):
        return math.sqrt(max(sh.integrate(np.sum(v**2, axis=0), g), 0.0))

    v_norm = [l2(v) for v in sp.v]
    rows = [[t, vn, l2(e)] for t, vn, e in zip(times, v_norm, sp.eta)]
    io.write_csv(ctx.path("report.csv"), ["t", "v_L2", "eta_L2"], rows)
    ctx.results = {
        "c": [float(x) for x in sp.c],
        "Y_L2": l2(np.asarray(sp.Y)),
        "beta": sp.beta_used,
        "v_fitted_rate": _safe_fit(times, v_norm, window=tuple(cfg["window"]), envelope=b < 2),
    }
    ctx.termination = "time-reached"


def cmd_breather(ctx, cfg):
    try:
        tr = breather_ode(cfg["r0"], cfg["rdot0"], cfg["dt"], cfg["T"])
    except MembraneError as err:
        raise NumericalFailure(str(err)) from err
    io.write_csv(ctx.path("report.csv"), ["t", "r", "rdot", "energy"], zip(tr.times, tr.r, tr.rdot, tr.ode_energy))
    E = tr.ode_energy
    ctx.results = {
        "period": tr.period,
        "period_from_fallback": tr.period_from_fallback,
        "energy_drift": float(np.max(np.abs(E - E[0]))),
    }
    ctx.termination = "time-reached"


def cmd_spectrum(ctx, cfg):
    L = cfg["lmax"]
    g = sh.SphGrid.for_lmax(L)
    ctx.set_grid(L, g)
    ev = L_id_multipliers(L)
    order = np.argsort(-ev, kind="stable")
    ls, ms = sh.degrees(L), sh.orders(L)
    rows = [[i, int(ls[k]), int(ms[k]), float(ev[k])] for i, k in enumerate(order)]
    io.write_csv(ctx.path("report.csv"), ["index", "l", "m", "eigenvalue"], rows)
    top = rayleigh_extremes(apply_L_id, L, deflate=ZeroModeProjection(g.position, g), tol=cfg["lanczos_tol"])
    values, counts = np.unique(ev, return_counts=True)
    ctx.results = {
        "deflated_top": top,
        "multiplicities": {f"{v:g}": int(c) for v, c in sorted(zip(values, counts), reverse=True)[:4]},
    }
    ctx.termination = "complete"


def cmd_smoothing_axioms(ctx, cfg):
    L = cfg["lmax"]
    ctx.set_grid(L, sh.SphGrid.for_lmax(L))
    reps = check_smoothing_axioms(cfg["samples"], L, cfg["pairs"], cfg["seed"], decay=cfg["decay"])
    cols = ["a", "b", "lmax", "samples", "jmax", "bounded", "smoothing", "approximation", "blocks", "telescoping"]
    io.write_csv(ctx.path("report.csv"), cols, [[getattr(r, c) for c in cols] for r in reps])
    ctx.results = {"worst_telescoping": max(r.telescoping for r in reps)}
    ctx.termination = "complete"


def cmd_nash_moser(ctx, cfg):
    L = cfg["lmax"]
    g = sh.SphGrid.for_lmax(L)
    nt = cfg["T"] / cfg["dt"]
    if abs(nt - round(nt)) > 1e-9 * nt or round(nt) < 3:
        raise ConfigError("T must be a multiple of dt with at least three steps")
    if len(cfg["indices"]) < 2:
        raise ConfigError("indices needs at least two entries (the second is the stopping index)")
    ctx.set_grid(L, g)
    u0 = _mode_field(g, L, cfg["modes"])
    u1 = _mode_field(g, L, cfg["velocity_modes"])
    cols = ["iterate"] + [f"res_H{n:g}" for n in cfg["indices"]] + ["j", "correction", "accepted"]
    try:
        res = solve_by_iteration(
            u0,
            u1,
            cfg["b"],
            cfg["T"],
            L,
            g,
            dt=cfg["dt"],
            schedule=cfg["schedule"],
            tol=cfg["tol"],
            max_iter=cfg["max_iter"],
            kappa=cfg["kappa"],
            indices=tuple(cfg["indices"]),
        )
    except DivergenceError as err:
        if err.trace is not None:
            io.write_csv(ctx.path("report.csv"), cols, err.trace.rows)
        ctx.termination = "diverged"
        raise NumericalFailure(str(err)) from err
    io.write_csv(ctx.path("report.csv"), cols, res.trace.rows)
    r = res.trace.residuals[:, 1]
    ctx.results = {
        "converged": res.converged,
        "iterations": res.iterations,
        "reduction": float(r[0] / r[-1]) if r[-1] > 0 else None,
    }
    ctx.termination = "converged" if res.converged else "max-iterations"


def cmd_lifespan_scan(ctx, cfg):
    base = _run_config(cfg, T=cfg["horizon"], epsilon=max(cfg["epsilons"]))
    ctx.set_grid(base.lmax, base.grid)
    cols = ["epsilon", "T_exit", "termination", "global", "lifespan_bound"]
    rows = []
    with io.CsvStream(ctx.path("report.csv"), cols) as out:
        # one worker run per epsilon, each with its own streamed report
        for k, eps in enumerate(cfg["epsilons"]):
            rc = replace(base, epsilon=float(eps), threshold=cfg["threshold"])
            with io.CsvStream(ctx.path(f"runs/run_{k:02d}.csv"), report_columns(rc.norms)) as run_out:
                rep = simulate(rc, on_sample=run_out.write)
            row = [float(eps), float(rep.final.t), rep.termination, rep.termination == "time-reached", eps ** (-1 / 6)]
            out.write(row)
            rows.append(row)
    exited = [r for r in rows if not r[3] and r[1] > 0]
    slope = None
    if len({r[0] for r in exited}) >= 2:
        slope = float(np.polyfit(np.log([r[0] for r in exited]), np.log([r[1] for r in exited]), 1)[0])
    ctx.results = {"slope": slope, "global_runs": sum(bool(r[3]) for r in rows)}
    ctx.termination = "complete"


HANDLERS = {
    "simulate": cmd_simulate,
    "linear": cmd_linear,
    "split": cmd_split,
    "breather": cmd_breather,
    "spectrum": cmd_spectrum,
    "smoothing-axioms": cmd_smoothing_axioms,
    "nash-moser": cmd_nash_moser,
    "lifespan-scan": cmd_lifespan_scan,
}


# ---------------------------------------------------------------- manifest


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _write_manifest(ctx, cfg, code, error, started, wall):
    outputs = {}
    for name in ctx.outputs:
        p = os.path.join(ctx.out, name)
        if os.path.exists(p):
            outputs[name] = io.file_digest(p)
    manifest = {
        "command": ctx.command,
        "version": __version__,
        "config": cfg,
        "resumed_from": ctx.resume,
        "grid": ctx.grid,
        "started_utc": started,
        "wall_clock_s": wall,
        "termination": ctx.termination,
        "message": ctx.message,
        "results": ctx.results,
        "outputs": outputs,
        "error": error,
        "exit_code": code,
    }
    text = json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n"
    io.atomic_write_bytes(os.path.join(ctx.out, "manifest.json"), text.encode())


def run(command, config=None, overrides=(), out=".", seed=None, resume=None):
    """Execute one subcommand and return its exit code."""
    os.makedirs(out, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    ctx = Context(out, command, None, resume)
    cfg, error, code = None, None, EXIT_OK
    try:
        if command not in HANDLERS:
            raise ConfigError(f"unknown command {command!r}")
        if resume is not None and command != "simulate":
            raise ConfigError("--resume is only supported by simulate")
        cfg = load_config(command, config, overrides, seed)
        ctx.cfg = cfg
        HANDLERS[command](ctx, cfg)
    except ConfigError as err:
        code, error = EXIT_CONFIG, {"type": "ConfigError", "message": str(err)}
        ctx.termination = "invalid-config"
        # a rejected configuration leaves nothing but the manifest
        for name in ctx.outputs:
            p = os.path.join(out, name)
            if os.path.exists(p) and resume is None:
                os.unlink(p)
        ctx.outputs = []
    except (MembraneError, FloatingPointError, np.linalg.LinAlgError) as err:
        code, error = EXIT_NUMERICAL, {"type": type(err).__name__, "message": str(err)}
        if ctx.termination in (None, "time-reached", "complete"):
            ctx.termination = "numerical-failure"
    except Exception as err:  # noqa: BLE001 - recorded, then reported as internal
        code = EXIT_INTERNAL
        error = {"type": type(err).__name__, "message": str(err), "traceback": traceback.format_exc()}
        ctx.termination = "internal-error"
    _write_manifest(ctx, cfg, code, error, started, round(time.perf_counter() - t0, 3))
    if error is not None:
        print(f"membrane {command}: {error['type']}: {error['message']}", file=sys.stderr)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="membrane", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} pipeline")
        s.add_argument("--config", metavar="PATH", help="INI file; section [%s] is read" % name)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
        s.add_argument("--out", metavar="DIR", default=".", help="output directory (default: current)")
        s.add_argument("--seed", type=int, help="random seed override")
        s.add_argument("--resume", metavar="CHECKPOINT", help="continue a simulate run from a .memb checkpoint")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.set, args.out, args.seed, args.resume)


if __name__ == "__main__":
    sys.exit(main())
