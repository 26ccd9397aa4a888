"""Command-line entry point, driven in-process through ``main``."""

import json

import numpy as np
import pytest

from ngil.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestCli:
    def test_mmd_singleton(self, tmp_path, capsys):
        (tmp_path / "x.csv").write_text("0\n")
        (tmp_path / "y.csv").write_text("1\n")
        code, out, _ = run(capsys, "mmd", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"))
        assert code == 0 and out.strip() == "1.474467"

    def test_mmd_header_and_bandwidths(self, tmp_path, capsys):
        (tmp_path / "x.csv").write_text("a,b\n0,0\n1,1\n")
        (tmp_path / "y.csv").write_text("a,b\n0,0\n1,1\n")
        code, out, _ = run(capsys, "mmd", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"), "--kernel-alphas", "1,0.5")
        assert code == 0 and float(out) == 0.0

    def test_metrics(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("0.9\n0.8,0.85\n")
        code, out, _ = run(capsys, "metrics", str(tmp_path / "m.csv"))
        assert code == 0 and out.strip() == "FAP=0.825 FAF=-0.05"

    def test_single_task_metrics(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("0.7\n")
        assert run(capsys, "metrics", str(tmp_path / "m.csv"))[1].strip() == "FAP=0.7 FAF=N.A."

    def test_errors_are_one_line_nonzero(self, tmp_path, capsys):
        code, _, err = run(capsys, "metrics", str(tmp_path / "missing.csv"))
        assert code == 1 and err.count("\n") == 1 and err.startswith("error: ")
        (tmp_path / "m.csv").write_text("0.5\n0.5\n")
        code, _, err = run(capsys, "metrics", str(tmp_path / "m.csv"))
        assert code == 1 and "BundleError" in err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--mode", "sideways"])
        assert exc.value.code == 2

    def test_help_per_subcommand(self, capsys):
        for cmd in ("gen-csbm", "run", "verify-prop1", "mmd", "grad-check", "metrics"):
            with pytest.raises(SystemExit) as exc:
                main([cmd, "--help"])
            assert exc.value.code == 0
            assert "usage" in capsys.readouterr().out

    def test_grad_check(self, capsys):
        code, out, _ = run(capsys, "grad-check", "--layers", "2", "--activation", "tanh")
        assert code == 0
        assert out.count("pass") == 2

    def test_verify_prop1(self, tmp_path, capsys):
        code, out, _ = run(capsys, "verify-prop1", "--trials", "1000", "--out", str(tmp_path / "p.txt"))
        assert code == 0
        fields = dict(line.split("=", 1) for line in out.strip().splitlines())
        assert fields["verdict"] == "true"
        assert (tmp_path / "p.txt").read_text() == out

    def test_gen_then_run(self, tmp_path, capsys):
        b = tmp_path / "bundle"
        code, out, _ = run(capsys, "gen-csbm", "--out", str(b), "--tasks", "2", "--batch-size", "30",
                           "--orientation", "alternating")
        assert code == 0 and "tasks=2" in out
        out_dir = tmp_path / "run"
        code, out, _ = run(capsys, "run", "--bundle", str(b), "--trainer", "replay+ssrm", "--alpha", "0.1",
                           "--beta", "0.5", "--epochs", "5", "--out", str(out_dir))
        assert code == 0
        assert "alpha=0.1 beta=0.5" in out and "status=ok" in out
        cfg = json.loads((out_dir / "config.json").read_text())
        assert cfg["alpha"] == 0.1 and cfg["beta"] == 0.5 and cfg["source"] == "bundle"

    def test_run_aliases_and_config_file(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"csbm_tasks": 2, "csbm_batch_size": 30, "epochs": 3}))
        code, out, _ = run(capsys, "run", "--config", str(tmp_path / "c.json"), "--weight-drift", "0.3",
                           "--weight-crosstask", "0.7", "--trainer", "bare+ssrm")
        assert code == 0 and "alpha=0.3 beta=0.7" in out

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"nonsense": 1}))
        code, _, err = run(capsys, "run", "--config", str(tmp_path / "c.json"))
        assert code == 1 and "nonsense" in err

    def test_gen_fixed_plan(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-csbm", "--out", str(tmp_path / "p"), "--plan", "8:2,2:8",
                           "--mu1=1,0", "--mu2=-1,0")
        assert code == 0 and "vertices=20" in out
        feats = np.loadtxt(tmp_path / "p" / "features.csv", delimiter=",")
        assert feats.shape == (20, 2)
