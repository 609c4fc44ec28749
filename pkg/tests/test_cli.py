import os
import subprocess
import sys

import pytest

from agvm.cli import main

FAST_ARGS = ["--total_iterations=30", "--batch_size=16", "--n_samples=128",
             "--trunk_widths=16", "--levels=2", "--input_dim=8", "--head_width=8",
             "--warmup_iters=5", "--tau=10"]


def run_main(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestTrain:
    def test_writes_csv_and_summary(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("AGVM_SEED", raising=False)
        out_csv = tmp_path / "trace.csv"
        code, out, err = run_main(["train", "--out", str(out_csv)] + FAST_ARGS, capsys)
        assert code == 0, err
        assert out_csv.exists()
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "iter,module,phi,mu,eff_lr,loss,grad_norm_sq"
        assert len(lines) == 1 + (30 // 10 + 1) * 3
        assert "final_loss=" in out and "status=ok" in out

    def test_config_file_plus_override(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("AGVM_SEED", raising=False)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("total_iterations = 30\nbatch_size = 16\nn_samples = 128\n"
                       "trunk_widths = 16\nlevels = 2\ninput_dim = 8\nhead_width = 8\n"
                       "warmup_iters = 5\nseed = 3\n")
        code, out, _ = run_main(["train", "--config", str(cfg), "--seed=4"], capsys)
        assert code == 0

    def test_unknown_override_is_error(self, capsys):
        code, out, err = run_main(["train", "--no_such_key=1"] + FAST_ARGS, capsys)
        assert code == 1
        assert "unknown config key" in err

    def test_env_seed_changes_run(self, tmp_path, capsys, monkeypatch):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        monkeypatch.setenv("AGVM_SEED", "11")
        assert run_main(["train", "--out", str(out1)] + FAST_ARGS, capsys)[0] == 0
        monkeypatch.setenv("AGVM_SEED", "12")
        assert run_main(["train", "--out", str(out2)] + FAST_ARGS, capsys)[0] == 0
        assert out1.read_bytes() != out2.read_bytes()

    def test_same_env_seed_byte_identical(self, tmp_path, capsys, monkeypatch):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        monkeypatch.setenv("AGVM_SEED", "11")
        assert run_main(["train", "--out", str(out1)] + FAST_ARGS, capsys)[0] == 0
        assert run_main(["train", "--out", str(out2)] + FAST_ARGS, capsys)[0] == 0
        assert out1.read_bytes() == out2.read_bytes()


class TestOtherCommands:
    def test_variance_trace(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("AGVM_SEED", raising=False)
        out_csv = tmp_path / "var.csv"
        code, out, _ = run_main(["variance-trace", "--out", str(out_csv)] + FAST_ARGS,
                                capsys)
        assert code == 0
        assert out_csv.exists()

    def test_grad_check(self, capsys, monkeypatch):
        monkeypatch.delenv("AGVM_SEED", raising=False)
        code, out, _ = run_main(["grad-check", "--probes", "5"] + FAST_ARGS, capsys)
        assert code == 0
        line = [l for l in out.splitlines() if l.startswith("max_rel_err=")][0]
        assert float(line.split("=")[1]) < 1e-5

    def test_oracle_check(self, capsys):
        code, out, _ = run_main(["oracle-check", "--resamples", "100"], capsys)
        assert code == 0
        line = [l for l in out.splitlines() if l.startswith("max_rel_err=")][0]
        assert float(line.split("=")[1]) < 0.2

    def test_ablate(self, capsys, monkeypatch):
        monkeypatch.delenv("AGVM_SEED", raising=False)
        code, out, _ = run_main(["ablate"] + FAST_ARGS, capsys)
        assert code == 0
        for arm in ("[shared]", "[independent_heads]", "[no_pyramid]", "[mask_75]",
                    "[proposals_1]", "[proposals_8]"):
            assert arm in out


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        env = dict(os.environ)
        env.pop("AGVM_SEED", None)
        proc = subprocess.run(
            [sys.executable, "-m", "agvm", "train"] + FAST_ARGS,
            capture_output=True, text=True, env=env, cwd=str(tmp_path))
        assert proc.returncode == 0, proc.stderr
        assert "status=ok" in proc.stdout
