import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from pnsmc import config as cfgmod
from pnsmc.cli import main
from pnsmc.config import ConfigError

LIN = """\
model: linear_oscillator
seed: 7
simulate:
  duration: 1.0
smc:
  n_particles: 8
identify:
  state_particles: 2
"""


def write(path, text):
    path.write_text(text)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    conf = write(root / "lin.yaml", LIN)
    out = root / "out"
    for cmd in ("simulate", "identify", "evaluate"):
        assert main([cmd, "--config", str(conf), "--out", str(out), "--threads", "1"]) == 0
    return root, conf, out


def test_print_config_shows_defaults(capsys):
    assert main(["--print-config"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["model"] == "duffing"
    assert cfg["smc"]["ess_threshold"] == 0.5
    assert cfg["solver"]["sigma0_extra"] == 100.0
    assert cfg["seed"] is None


def test_print_config_bouc_wen(tmp_path, capsys):
    conf = write(tmp_path / "bw.yaml", "model: bouc_wen\n")
    assert main(["simulate", "--config", str(conf), "--print-config"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    sim = cfg["simulate"]
    assert sim["gen_rate_hz"] / sim["downsample"] == 4096.0
    assert sim["excitation"]["amplitude"] == 208.0
    assert cfg["model_constants"] == {"nu": 1.0}


@pytest.mark.parametrize("text,where", [
    ("model: duffing\nsmc:\n  particles: 3\n", "smc.particles"),
    ("model: duffing\nsmc:\n  n_particles: 1\n", "smc.n_particles"),
    ("model: duffing\nsolver:\n  q: 7\n", "solver.q"),
    ("model: pendulum\n", "model"),
    ("model: duffing\nx0: [1, 2, 3]\n", "x0"),
    ("- not a mapping\n", "mapping"),
    ("model: duffing\nprior:\n  m: {mean: 1, variance: 1}\n", "prior"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, where):
    conf = write(tmp_path / "c.yaml", text)
    assert main(["simulate", "--config", str(conf), "--seed", "1",
                 "--out", str(tmp_path)]) == 2
    assert where in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path, capsys):
    conf = write(tmp_path / "c.yaml", "model: linear_oscillator\n")
    assert main(["simulate", "--config", str(conf), "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path):
    assert main(["simulate", "--threads", "0"]) == 2
    assert main(["simulate", "--seed", "-4"]) == 2
    assert main(["fly"]) == 2
    assert main([]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_data_error_exit_3(tmp_path, capsys):
    write(tmp_path / "train.csv", "t,u\n0,1\n0.01,2\n")
    conf = write(tmp_path / "c.yaml", LIN + "data:\n  train: train.csv\nsolver:\n  R_y: 1.0e-4\n")
    assert main(["identify", "--config", str(conf), "--out", str(tmp_path / "o")]) == 3
    assert "missing column 'y'" in capsys.readouterr().err


def test_numerical_abort_exit_4(tmp_path, pipeline):
    _, _, out = pipeline
    prior = ("prior:\n  m: {mean: 1.0, variance: 1.0e-6}\n  c: {mean: 0.4, variance: 1.0e-6}\n"
             "  k: {mean: -100.0, variance: 1.0e-6}\n")
    conf = write(tmp_path / "c.yaml", LIN + prior + f"data:\n  train: {out / 'train.csv'}\n")
    assert main(["identify", "--config", str(conf), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "diagnostics.csv").exists()


def test_pipeline_outputs(pipeline):
    _, _, out = pipeline
    rows = read_csv(out / "train.csv")
    assert rows[0] == ["t", "u", "y"] and len(rows) == 101
    meta = json.loads((out / "train.meta.json").read_text())
    assert meta["theta_true"] == {"m": 1.0, "c": 0.4, "k": 100.0} and meta["rate_hz"] == 100.0
    post = np.array(read_csv(out / "posterior.csv")[1:], dtype=float)
    assert post.shape == (8, 4) and post[:, -1].sum() == pytest.approx(1.0)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_rejuvenations"] >= 0 and summary["final_ess"] > 0
    assert {"truth", "mean_normalized", "std_normalized"} <= set(summary["parameters"]["k"])
    rep = json.loads((out / "rmse_multisine.json").read_text())
    assert set(rep) == {"min", "max", "mean", "n_particles", "n_diverged", "unit"}
    assert rep["unit"] == "m"
    assert read_csv(out / "diagnostics.csv")[0][:3] == ["t_index", "ess", "threshold"]
    states = read_csv(out / "states.csv")
    assert states[0][:4] == ["particle", "t", "x_mean", "v_mean"] and len(states) == 1 + 2 * 100
    hist = read_csv(out / "posterior_hist.csv")
    assert len(hist) == 1 + 3 * 30
    run = json.loads((out / "run_identify.json").read_text())
    assert run["config_hash"] == summary["config_hash"] and run["wall_time_s"] > 0
    assert "Mean Particle" in (out / "rmse_table.txt").read_text()


def test_simulate_is_byte_identical(pipeline, tmp_path):
    _, conf, out = pipeline
    assert main(["simulate", "--config", str(conf), "--out", str(tmp_path)]) == 0
    for name in ("train.csv", "train_clean.csv", "test_multisine.csv", "train.meta.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_snapshot_replay_is_byte_identical(pipeline, tmp_path):
    _, _, out = pipeline
    snap = out / "config_identify.yaml"
    assert main(["identify", "--config", str(snap), "--out", str(tmp_path),
                 "--threads", "3"]) == 0
    for name in ("posterior.csv", "diagnostics.csv", "states.csv", "posterior_hist.csv",
                 "summary.json"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name
    snap = out / "config_evaluate.yaml"
    assert main(["evaluate", "--config", str(snap), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "rmse_multisine.json").read_bytes() == \
        (out / "rmse_multisine.json").read_bytes()


def test_evaluate_truth_on_clean_data(pipeline, tmp_path):
    _, _, out = pipeline
    write(tmp_path / "post.csv", "m,c,k,weight\n1.0,0.4,100.0,1.0\n")
    conf = write(tmp_path / "c.yaml", LIN + f"data:\n  test:\n    clean: {out / 'train_clean.csv'}\n"
                 "evaluate:\n  posterior: post.csv\n")
    assert main(["evaluate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "rmse_clean.json").read_text())
    assert rep["mean"] < 1e-8 and rep["n_particles"] == 1


def test_evaluate_rejects_mismatched_posterior(pipeline, tmp_path):
    _, _, out = pipeline
    write(tmp_path / "post.csv", "m,c,k,k3,weight\n1,1,1,1,1\n")
    conf = write(tmp_path / "c.yaml", LIN + "evaluate:\n  posterior: post.csv\n"
                 f"data:\n  test: {out / 'test_multisine.csv'}\n")
    assert main(["evaluate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 3


def test_zero_duration_gives_header_only(tmp_path):
    conf = write(tmp_path / "c.yaml",
                 "model: linear_oscillator\nseed: 1\nsimulate:\n  duration: 0.0\n  tests: {}\n")
    assert main(["simulate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "train.csv").read_text() == "t,u,y\n"


def test_config_hash_ignores_location_and_threads():
    a = cfgmod.defaults("duffing")
    b = dict(a, output_dir="/elsewhere", threads=12)
    assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
    c = cfgmod.merge(a, {"smc": {"n_particles": 10}})
    assert cfgmod.config_hash(a) != cfgmod.config_hash(c)


def test_merge_replaces_atomic_tables():
    base = cfgmod.defaults("duffing")
    out = cfgmod.merge(base, {"simulate": {"excitation": {"kind": "zero"}}})
    assert out["simulate"]["excitation"] == {"kind": "zero"}
    assert out["simulate"]["duration"] == base["simulate"]["duration"]
    with pytest.raises(ConfigError, match="simulate.bogus"):
        cfgmod.merge(base, {"simulate": {"bogus": 1}})


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pnsmc", "--print-config"], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "ess_threshold" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "pnsmc", "identify"], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 2


def test_exponent_without_sign_reads_as_float(tmp_path):
    from pnsmc.config import read_yaml

    p = tmp_path / "c.yaml"
    p.write_text("a: 4.0e6\nb: 1e-3\nc: 3\nd: x1e5\n")
    assert read_yaml(p) == {"a": 4.0e6, "b": 1e-3, "c": 3, "d": "x1e5"}
