import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qfeedsim.cli import ConfigError, compare_exact, embed_check, main, parse_config
from qfeedsim.io import dumps_json, fmt, read_snapshots_json, write_snapshots_csv, write_snapshots_json
from qfeedsim.models import model_identity, model_qubit_counting, model_qubit_gaussian_feedback
from qfeedsim.resolved import init_resolved, max_entry_difference, propagate
from qfeedsim.signals import SignalLattice


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def cli(tmp_path, text, *extra, out="out"):
    cfg = write_config(tmp_path, text)
    code = main([cfg, "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


COUNTING = """
engine = "deterministic"
n_steps = 3
[model]
name = "qubit_counting"
"""


def read_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# qfeedsim snapshots csv v1")
    return list(csv.DictReader(lines[1:]))


# io

def test_fmt_round_trips_and_rejects_non_finite():
    for v in (0.1, 1 / 3, -2.5e-300, 1e16 + 1):
        assert float(fmt(v)) == v
    with pytest.raises(ValueError):
        fmt(float("nan"))
    assert fmt(-0.0) == "0"


def test_dumps_json_is_valid_json():
    doc = {"a": [1, 2.5, None], "b": {"c": True, "d": [[0.1]]}, "e": np.float64(1 / 3)}
    back = json.loads(dumps_json(doc))
    assert back == {"a": [1, 2.5, None], "b": {"c": True, "d": [[0.1]]}, "e": 1 / 3}


def test_json_snapshot_round_trip(tmp_path):
    spec = model_qubit_gaussian_feedback(n_steps=4, leak=0.1)
    snaps = []
    propagate(init_resolved(spec.rho0, spec.y0, spec.lattice), spec.instrument, 4, callback=snaps.append)
    write_snapshots_json(tmp_path / "s.json", snaps)
    back = read_snapshots_json(tmp_path / "s.json")
    assert len(back) == 5
    for a, b in zip(snaps, back):
        assert np.array_equal(a.keys, b.keys)
        assert max_entry_difference(a, b) == 0.0
        assert (a.step, a.leaked_mass, a.clip_count) == (b.step, b.leaked_mass, b.clip_count)


def test_csv_layout(tmp_path):
    spec = model_qubit_counting(n_steps=1)
    state = propagate(init_resolved(spec.rho0, spec.y0, spec.lattice), spec.instrument, 1)
    write_snapshots_csv(tmp_path / "s.csv", [state])
    rows = read_csv(tmp_path / "s.csv")
    assert list(rows[0]) == ["n", "idx_0", "y_0", "trace", "bloch_x", "bloch_y", "bloch_z"]
    # after a readout and a Hadamard the conditional states are |+> and |->
    got = [[float(r[k]) for k in ("y_0", "trace", "bloch_x", "bloch_z")] for r in rows]
    assert np.allclose(got, [[0, 0.5, 1, 0], [1, 0.5, -1, 0]], rtol=0, atol=1e-15)


def test_read_snapshots_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ValueError):
        read_snapshots_json(tmp_path / "x.json")


# config parsing

def test_parse_config_defaults_and_unknown_keys():
    cfg = parse_config({"n_steps": 2, "model": {"name": "identity"}})
    assert cfg["engine"] == "deterministic" and cfg["threads"] == 1
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config({"bogus": 1})
    with pytest.raises(ConfigError, match="'compare.sigmaa'"):
        parse_config({"compare": {"sigmaa": 3}})
    with pytest.raises(ConfigError, match="'model.params.lamda'"):
        parse_config({"model": {"name": "qubit_gaussian_feedback", "params": {"lamda": 1.0}}})
    with pytest.raises(ConfigError, match="'n_steps'"):
        parse_config({"n_steps": -1})
    with pytest.raises(ConfigError, match="'lattice.step'"):
        parse_config({"lattice": {"min": [0.0], "max": [1.0]}})


# deterministic engine

def test_cli_counting_binomial(tmp_path):
    code, out = cli(tmp_path, COUNTING)
    assert code == 0
    last = [r for r in read_csv(out / "snapshots.csv") if r["n"] == "3"]
    assert [r["y_0"] for r in last] == ["0", "1", "2", "3"]
    assert [float(r["trace"]) for r in last] == pytest.approx([0.125, 0.375, 0.375, 0.125], abs=1e-15)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and summary["conservation_error"] <= 1e-12
    assert summary["backend"] in ("compiled", "python")


def test_cli_zero_steps_writes_initial_snapshot(tmp_path):
    code, out = cli(tmp_path, COUNTING.replace("n_steps = 3", "n_steps = 0"))
    assert code == 0
    rows = read_csv(out / "snapshots.csv")
    assert len(rows) == 1 and rows[0]["n"] == "0" and rows[0]["trace"] == "1"


def test_cli_json_format(tmp_path):
    code, out = cli(tmp_path, COUNTING, "--format", "json")
    assert code == 0
    assert [s.step for s in read_snapshots_json(out / "snapshots.json")] == [0, 1, 2, 3]


def test_cli_invalid_key_exit_code(tmp_path, capsys):
    code, _ = cli(tmp_path, "mystery = 4\n" + COUNTING)
    assert code == 2
    assert "'mystery'" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    "n_steps = 3\n",
    "engine = 'warp'\nn_steps = 1\n[model]\nname = 'identity'\n",
    "n_steps = 'three'\n[model]\nname = 'identity'\n",
    "n_steps = 3\n[model]\nname = 'identity'\nparams = {dim = 0}\n",
    "not toml at all ===",
])
def test_cli_config_errors(tmp_path, text):
    assert cli(tmp_path, text)[0] == 2


def test_cli_missing_config_file(tmp_path):
    assert main([str(tmp_path / "missing.toml")]) == 2


def test_cli_threshold_failure(tmp_path):
    text = COUNTING + "\n[compare]\ntolerance = 0.0\n[lattice]\nmin = [0.0]\nmax = [1.0]\nstep = [1.0]\n"
    code, out = cli(tmp_path, text, "--engine", "compare")
    assert code == 1
    report = json.loads((out / "compare_report.json").read_text())
    assert not report["passed"]


# trajectories

TRAJ = """
engine = "trajectories"
n_steps = 3
n_traj = 20000
seed = 7
dump_trajectories = 3
[model]
name = "qubit_counting"
"""


def test_cli_trajectories_reproducible(tmp_path):
    code_a, a = cli(tmp_path, TRAJ, out="a")
    code_b, b = cli(tmp_path, TRAJ, "--threads", "4", out="b")
    assert code_a == code_b == 0
    for name in ("snapshots.csv", "trajectories.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_csv(a / "snapshots.csv")
    assert "std_err" in rows[0]
    truth = [1 / 8, 3 / 8, 3 / 8, 1 / 8]
    for r, t in zip(rows, truth):
        assert abs(float(r["trace"]) - t) <= 4 * float(r["std_err"])


def test_cli_trajectories_need_seed(tmp_path):
    assert cli(tmp_path, TRAJ.replace("seed = 7\n", ""))[0] == 2


def test_cli_single_trajectory(tmp_path):
    code, out = cli(tmp_path, TRAJ.replace("n_traj = 20000", "n_traj = 1"))
    assert code == 0
    rows = read_csv(out / "snapshots.csv")
    assert len(rows) == 1 and rows[0]["trace"] == "1"


# compare

def test_compare_identity_zero_difference():
    spec = model_identity(n_steps=3)
    assert compare_exact(spec, spec)["max_abs_diff"] == 0.0


def test_compare_counting_exact(tmp_path):
    code, out = cli(tmp_path, COUNTING.replace("n_steps = 3", "n_steps = 8"), "--engine", "compare")
    report = json.loads((out / "compare_report.json").read_text())
    assert code == 0 and report["max_abs_diff"] <= 1e-10
    assert report["det_clip_count"] == 0 and report["n_paths"] == 256


def test_compare_clipping_lattice_reports_difference():
    spec = model_qubit_counting(n_steps=6)
    narrow = spec.with_lattice(SignalLattice([0.0], [3.0], [1.0]))
    res = compare_exact(narrow, spec)
    assert res["max_abs_diff"] > 0.01
    assert res["det_clip_count"] > 0 and res["oracle_clip_count"] == 0


def test_compare_monte_carlo_mode(tmp_path):
    text = TRAJ.replace('engine = "trajectories"', 'engine = "compare"') + "\n[compare]\nmode = \"mc\"\n"
    code, out = cli(tmp_path, text)
    report = json.loads((out / "compare_report.json").read_text())
    assert code == 0 and report["total_variation"] <= 0.01 and report["fraction_within"] >= 0.95


# embed and kernel checks

def test_embed_check_depth_zero_exact():
    assert embed_check(0, 1000, seed=1)[0] == 0.0


def test_cli_embed_check(tmp_path):
    code, out = cli(tmp_path, "engine = \"embed-check\"\nseed = 3\n[embed]\ndepth = 3\nn_steps = 10000\n")
    summary = json.loads((out / "summary.json").read_text())
    assert code == 0 and summary["max_abs_diff"] <= 1e-12


def test_cli_kernel_check(tmp_path):
    code, out = cli(tmp_path, "engine = \"kernel-check\"\n")
    summary = json.loads((out / "summary.json").read_text())
    assert code == 0
    assert [r["delta_t"] for r in summary["table"]] == [0.04, 0.02, 0.01, 0.005]
    assert all(1.6 <= r["ratio"] <= 2.4 for r in summary["table"][1:])


def test_cli_kernel_check_rejects_coarse_steps(tmp_path):
    assert cli(tmp_path, "engine = \"kernel-check\"\n[kernel]\ndts = [0.8, 0.4]\n")[0] == 2


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, COUNTING)
    proc = subprocess.run([sys.executable, "-m", "qfeedsim", cfg, "--out", str(tmp_path / "m")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "snapshots.csv").exists()
