import subprocess
import sys

import pytest

from cafseg.cli import main

FAST = ["--channels", "4", "--epochs", "1", "--epochs-later", "1", "--batch-size", "8",
        "--lr-later", "3e-3", "--grad-clip", "5"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "1", "--num-images", "60", "--classes", "5", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.txt"
    cfg.write_text("epochs = 5\nfusion_mode = concat\n")
    argv = ["train", "--scenario", "4-1", "--setting", "disjoint", "--variant", "full",
            "--config", str(cfg), "--data", str(data_dir), "--out", str(out)] + FAST
    assert main(argv) == 0
    return out


def test_gen_data_layout(data_dir):
    assert len((data_dir / "train" / "index.txt").read_text().splitlines()) == 60
    assert len((data_dir / "val" / "index.txt").read_text().splitlines()) == 30


def test_train_writes_reports_and_flags_win(run_dir):
    assert (run_dir / "summary.csv").exists() and (run_dir / "step2.ckpt").exists()
    cfg = (run_dir / "config.txt").read_text()
    assert "epochs = 1\n" in cfg and "fusion_mode = concat\n" in cfg and "variant = full\n" in cfg


@pytest.mark.parametrize("mode", ["skip", "zeropad", "concat"])
def test_eval_modes(run_dir, data_dir, mode, capsys):
    assert main(["eval", "--checkpoint", str(run_dir / "step2.ckpt"), "--fusion-mode", mode,
                 "--data", str(data_dir)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith(f"step 2 mode {mode}: old=") and "all=" in line


def test_eval_step_one_concat_falls_back(run_dir, data_dir, capsys):
    assert main(["eval", "--checkpoint", str(run_dir / "step1.ckpt"), "--fusion-mode", "concat",
                 "--data", str(data_dir)]) == 0
    assert "new=nan" in capsys.readouterr().out


def test_report(run_dir, capsys):
    assert main(["report", "--runs", str(run_dir.parent)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["run", "step", "old", "new", "all"]
    assert any(str(run_dir) in line for line in out[1:])


def test_holdout_flag(data_dir, tmp_path, capsys):
    argv = ["train", "--variant", "ft", "--data", str(data_dir), "--out", str(tmp_path),
            "--holdout", "0.2"] + FAST
    assert main(argv) == 0
    assert "holdout = 0.2" in (tmp_path / "config.txt").read_text()


def test_caf_seed_env(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CAF_SEED", "7")
    assert main(["train", "--variant", "ft", "--data", str(data_dir), "--out", str(tmp_path),
                 "--seed", "3"] + FAST) == 0
    assert "seed = 7\n" in (tmp_path / "config.txt").read_text()


def test_errors_exit_two(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error:")
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", "x", "--data", "y", "--fusion-mode", "bogus"])


def test_gradcheck_command_exit_code():
    proc = subprocess.run([sys.executable, "-m", "cafseg.cli", "gradcheck", "--seeds", "1"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "L_SEG" in proc.stdout and "FAIL" not in proc.stdout
