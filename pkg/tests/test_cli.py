import subprocess
import sys

import pytest

from polrep.cli import main
from polrep.config import RunConfig

SMALL = {
    "[env]": {"horizon": "16"},
    "[data]": {"n_knobs": "10", "traj_per_knob": "8"},
    "[train]": {"rep_epochs": "2", "reg_epochs": "2", "rep_batch": "16", "reg_batch": "32",
                "context_length": "8", "hidden": "8"},
    "[eval]": {"n_queries": "2", "n_eval": "2", "ablation_runs": "1", "cf_trials": "5",
               "cf_grid": "16,32,64,128", "n_triplets": "100"},
    "[steer]": {"max_iters": "20", "n_neighbors": "16"},
}


def small_config(path):
    section, lines = None, []
    for line in RunConfig().to_text().splitlines():
        if line.startswith("["):
            section = line
        elif " = " in line:
            key = line.split(" = ")[0]
            if key in SMALL.get(section, {}):
                line = f"{key} = {SMALL[section][key]}"
        lines.append(line)
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return small_config(tmp_path / "small.ini")


def test_gen_data_is_byte_identical(tmp_path, cfg):
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.prep").read_bytes()
    assert a == (tmp_path / "b" / "dataset.prep").read_bytes()
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "c")]) == 0
    assert a != (tmp_path / "c" / "dataset.prep").read_bytes()


def test_full_pipeline(tmp_path, cfg):
    out = str(tmp_path / "run")
    data, ckpt = f"{out}/dataset.prep", f"{out}/model.pbnd"
    assert main(["gen-data", "--config", cfg, "--out", out]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", out]) == 0
    assert main(["probe", "--config", cfg, "--data", data, "--checkpoint", ckpt,
                 "--checkpoint", ckpt, "--out", out]) == 0
    probe = (tmp_path / "run" / "probe.csv").read_text().splitlines()
    assert probe[0] == "method,checkpoint,task,train_mse,test_mse" and len(probe) == 5
    assert main(["eval-imitation", "--config", cfg, "--data", data, "--checkpoint", ckpt, "--out", out]) == 0
    assert main(["steer", "--config", cfg, "--checkpoint", ckpt, "--out", out]) == 0
    assert main(["bench-steer", "--ablation", "--config", cfg, "--checkpoint", ckpt, "--out", out]) == 0
    assert main(["plot", "--svg", "--config", cfg, "--checkpoint", ckpt, "--out", out]) == 0
    for name in ("config.ini", "train_log.csv", "phase2_log.csv", "ordering.csv", "imitation.csv",
                 "trace.csv", "result.json", "bench_steer.csv", "path_gap.csv", "pca.csv", "pca_R1.svg"):
        assert (tmp_path / "run" / name).exists(), name


def test_cf_rate(tmp_path, cfg):
    assert main(["cf-rate", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "cf_rate.csv").read_text().splitlines()
    assert rows[0] == "N,cf_err,mc_err,trials" and rows[-1].startswith("slope,")
    assert len(rows) == 6


def test_usage_errors_exit_2(tmp_path, cfg, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert main(["steer", "--config", cfg, "--out", str(tmp_path / "t")]) == 2  # no checkpoint
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nnot_a_key = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "usage error" in capsys.readouterr().err


def test_runtime_failure_exit_1_without_partial_outputs(tmp_path, cfg, capsys):
    junk = tmp_path / "junk.prep"
    junk.write_bytes(b"nope")
    out = tmp_path / "o"
    assert main(["train", "--config", cfg, "--data", str(junk), "--out", str(out)]) == 1
    assert "polrep.dataio" in capsys.readouterr().err
    assert not out.exists() or not any(out.iterdir())


def test_entry_point_subprocess(tmp_path, cfg):
    proc = subprocess.run([sys.executable, "-m", "polrep.cli", "gen-data", "--config", cfg,
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "dataset.prep").exists()
