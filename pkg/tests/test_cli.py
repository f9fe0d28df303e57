import json
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from membrane import io
from membrane.cli import main, run
from membrane.config import defaults, load_config
from membrane.errors import ConfigError

SIM = ["lmax=8", "T=1.5", "modes=2 0 1e-2; 3 1 5e-3 tangent", "sample_every=3", "checkpoint_every=10"]


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


# ---------------------------------------------------------------- config


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[simulate]\nlmax = 8\nT = 2.5\nmodes = 2 0 1e-3 normal; 3 -1 2e-4 tangent\n[breather]\nr0 = 1.1\n")
    cfg = load_config("simulate", p, ["b=1", "dt=auto"], seed=7)
    assert cfg["lmax"] == 8 and cfg["T"] == 2.5 and cfg["b"] == 1.0 and cfg["seed"] == 7
    assert cfg["dt"] is None
    assert cfg["modes"] == ((2, 0, 1e-3, "normal"), (3, -1, 2e-4, "tangent"))
    assert load_config("breather", p)["r0"] == 1.1


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[simulate]\nlmaxx = 8\n", []),
        ("[simulte]\nlmax = 8\n", []),
        ("[simulate]\nlmax = 8.5\n", []),
        ("[simulate]\nfilter = maybe\n", []),
        ("", ["dt=-1"]),
        ("", ["T=0"]),
        ("", ["modes=2 3 1e-3"]),
        ("", ["modes=2 0 1e-3 sideways"]),
        ("", ["modes=20 0 1e-3"]),
        ("", ["norms="]),
        ("", ["lmax"]),
    ],
)
def test_config_rejections(tmp_path, text, overrides):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config("simulate", p, overrides)


def test_every_command_has_valid_defaults():
    for cmd in ("simulate", "linear", "split", "breather", "spectrum", "smoothing-axioms", "nash-moser", "lifespan-scan"):
        assert load_config(cmd) == defaults(cmd)


def test_seed_rejected_where_meaningless():
    with pytest.raises(ConfigError):
        load_config("breather", seed=3)


# ---------------------------------------------------------------- commands


def test_spectrum_csv(tmp_path):
    assert main(["spectrum", "--out", str(tmp_path), "--set", "lmax=16"]) == 0
    cols, rows = io.read_csv(tmp_path / "report.csv")
    assert cols == ["index", "l", "m", "eigenvalue"]
    assert len(rows) == 17**2
    ev = [r[3] for r in rows]
    assert ev == sorted(ev, reverse=True)
    assert ev[:3] == [0.0] * 3 and all(r[1] == 1 for r in rows[:3])
    assert ev[3:9] == [-4.0] * 6 and {r[1] for r in rows[3:9]} == {0, 2}
    assert ev[9:16] == [-10.0] * 7
    assert ev[-1] == 2 - 16 * 17
    m = manifest(tmp_path)
    assert m["exit_code"] == 0 and abs(m["results"]["deflated_top"] + 4) < 1e-6


def test_breather_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["breather", "--out", str(d), "--set", "r0=1.05", "--set", "T=4"]) == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    m = manifest(a)
    assert m["outputs"]["report.csv"] == io.file_digest(a / "report.csv")
    assert m["config"]["r0"] == 1.05 and m["version"]


def test_invalid_dt_writes_only_manifest(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--set", "dt=-1"]) == 2
    assert os.listdir(tmp_path) == ["manifest.json"]
    m = manifest(tmp_path)
    assert m["exit_code"] == 2 and "dt" in m["error"]["message"]
    assert m["outputs"] == {}


def test_library_validation_maps_to_exit_2(tmp_path):
    # passes the schema, fails the run-config check (random band must lie below lmax)
    assert run("simulate", overrides=["lmax=8", "random_lmax=8"], out=str(tmp_path)) == 2
    assert os.listdir(tmp_path) == ["manifest.json"]


def test_resume_only_for_simulate(tmp_path):
    assert main(["breather", "--out", str(tmp_path), "--resume", "x.memb"]) == 2


def test_linear_and_split_report_decay(tmp_path):
    assert main(["linear", "--out", str(tmp_path / "l"), "--set", "b=1"]) == 0
    assert manifest(tmp_path / "l")["results"]["fitted_rate"] >= 1 / 3 - 0.02
    assert main(["split", "--out", str(tmp_path / "s")]) == 0
    res = manifest(tmp_path / "s")["results"]
    assert res["v_fitted_rate"] >= 1 / 3 - 0.05
    assert len(res["c"]) == 3


def test_linear_rejects_tangent_modes(tmp_path):
    assert main(["linear", "--out", str(tmp_path), "--set", "modes=2 0 1 tangent"]) == 2


def test_smoothing_axioms_csv(tmp_path):
    assert main(["smoothing-axioms", "--out", str(tmp_path), "--set", "samples=20", "--set", "pairs=0 2; 1 3"]) == 0
    cols, rows = io.read_csv(tmp_path / "report.csv")
    assert len(rows) == 2 and cols[0:2] == ["a", "b"]
    assert all(r[cols.index("telescoping")] <= 1e-12 for r in rows)


def test_nash_moser_converges(tmp_path):
    args = ["nash-moser", "--out", str(tmp_path), "--set", "lmax=6", "--set", "T=1", "--set", "dt=0.05"]
    assert main(args) == 0
    cols, rows = io.read_csv(tmp_path / "report.csv")
    assert cols[:4] == ["iterate", "res_H0", "res_H2", "res_H4"]
    assert manifest(tmp_path)["results"]["converged"] is True


def test_nash_moser_divergence_exit_3(tmp_path):
    args = ["lmax=6", "T=1", "dt=0.05", "b=0", "modes=6 0 0.3", "schedule=0,0,0,0,0,0", "tol=0"]
    assert run("nash-moser", overrides=args, out=str(tmp_path)) == 3
    m = manifest(tmp_path)
    assert m["error"]["type"] == "NumericalFailure" and m["termination"] == "diverged"
    _, rows = io.read_csv(tmp_path / "report.csv")
    assert len(rows) >= 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_degenerate_simulate_exit_3_keeps_partial_outputs(tmp_path):
    args = ["lmax=8", "T=50", "dt=0.5", "random_lmax=4", "epsilon=1e-2", "filter=false", "sample_every=1"]
    assert run("simulate", overrides=args, out=str(tmp_path)) == 3
    m = manifest(tmp_path)
    assert m["termination"] == "degenerate" and m["exit_code"] == 3
    _, rows = io.read_csv(tmp_path / "report.csv")
    assert rows and rows[0][0] == 0.0
    assert m["outputs"]["report.csv"] == io.file_digest(tmp_path / "report.csv")


def test_lifespan_scan(tmp_path):
    args = ["lmax=8", "epsilons=0.2, 0.01", "threshold=0.05", "horizon=2"]
    assert run("lifespan-scan", overrides=args, out=str(tmp_path)) == 0
    cols, rows = io.read_csv(tmp_path / "report.csv")
    assert [r[0] for r in rows] == [0.2, 0.01]
    assert rows[0][cols.index("termination")] == "norm-threshold"
    assert sorted(os.listdir(tmp_path / "runs")) == ["run_00.csv", "run_01.csv"]
    assert set(manifest(tmp_path)["outputs"]) == {"report.csv", "runs/run_00.csv", "runs/run_01.csv"}


# ---------------------------------------------------------------- resume


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full = tmp_path / "full"
    assert run("simulate", overrides=SIM, out=str(full)) == 0
    ckpts = sorted(os.listdir(full / "checkpoints"))
    assert ckpts[0] == "step_00000010.memb"
    reference = (full / "report.csv").read_bytes()
    # resume with the complete CSV present (rows after the checkpoint are dropped)
    # and with a CSV cut at the checkpoint
    for name, cut in (("a", None), ("b", 5)):
        d = tmp_path / name
        d.mkdir()
        text = reference.decode().splitlines(keepends=True)
        (d / "report.csv").write_text("".join(text if cut is None else text[:cut]))
        ck = str(full / "checkpoints" / ckpts[0])
        assert run("simulate", overrides=SIM, out=str(d), resume=ck) == 0
        assert (d / "report.csv").read_bytes() == reference
        assert manifest(d)["resumed_from"] == ck


def test_resume_rejects_mismatched_grid(tmp_path):
    assert run("simulate", overrides=SIM, out=str(tmp_path / "a")) == 0
    ck = str(tmp_path / "a" / "checkpoints" / "step_00000010.memb")
    bad = [s for s in SIM if not s.startswith("lmax")] + ["lmax=10"]
    assert run("simulate", overrides=bad, out=str(tmp_path / "b"), resume=ck) == 2


def test_resume_rejects_corrupt_checkpoint(tmp_path):
    assert run("simulate", overrides=SIM, out=str(tmp_path / "a")) == 0
    ck = tmp_path / "a" / "checkpoints" / "step_00000010.memb"
    ck.write_bytes(ck.read_bytes()[:-3])
    m_code = run("simulate", overrides=SIM, out=str(tmp_path / "b"), resume=str(ck))
    assert m_code == 2
    assert "corrupt" in manifest(tmp_path / "b")["error"]["message"].lower() or "truncated" in manifest(tmp_path / "b")["error"]["message"]


def test_killed_run_leaves_loadable_prefix(tmp_path):
    out = tmp_path / "k"
    args = ["lmax=8", "T=200", "sample_every=5", "checkpoint_every=20", "random_lmax=4", "epsilon=1e-3"]
    cmd = [sys.executable, "-m", "membrane", "simulate", "--out", str(out)]
    for a in args:
        cmd += ["--set", a]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        deadline = time.time() + 60
        while time.time() < deadline:
            d = out / "checkpoints"
            if d.exists() and len([f for f in os.listdir(d) if f.endswith(".memb")]) >= 2:
                break
            time.sleep(0.05)
    finally:
        proc.kill()
        proc.wait()
    ckpts = sorted(f for f in os.listdir(out / "checkpoints") if f.endswith(".memb"))
    assert len(ckpts) >= 2
    state = io.read_checkpoint(out / "checkpoints" / ckpts[-1])
    cols, rows = io.read_csv(out / "report.csv")
    assert cols[0] == "t" and rows
    t = [r[0] for r in rows if isinstance(r[0], float)]
    assert t == sorted(t)
    # the run can continue from where it was killed (shortened horizon)
    short = [a for a in args if not a.startswith("T=")] + [f"T={state.t + 0.5}"]
    shutil.rmtree(out / "checkpoints")
    ck = tmp_path / "last.memb"
    io.write_checkpoint(ck, state)
    assert run("simulate", overrides=short, out=str(out), resume=str(ck)) == 0
    _, rows = io.read_csv(out / "report.csv")
    assert np.isclose(rows[-1][0], state.t + 0.5)


def test_shipped_example_config_parses():
    path = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "example.ini")
    for cmd in ("simulate", "linear", "split", "breather", "spectrum", "smoothing-axioms", "nash-moser", "lifespan-scan"):
        load_config(cmd, path)
