"""Command-line entry point and exit codes."""

import subprocess
import sys

import pytest

from fedgen import checks
from fedgen.checks import CheckResult
from fedgen.cli import EXIT_ERROR, EXIT_OK, EXIT_VERIFY, main
from fedgen.envgen import read_corpus

TINY = [
    "--preset", "desk",
    "--set", "run.learners=2",
    "--set", "run.rounds=3",
    "--set", "learner.n_env=2",
    "--set", "learner.n_init=1",
    "--set", "motion.layers=24,4,1",
    "--set", "motion.pairs=2",
    "--set", "sim.t_max=4.0",
]


class TestCommands:
    def test_gen_envs(self, tmp_path, capsys):
        assert main(["gen-envs", "--count", "4", "--seed", "3", "--out", str(tmp_path / "c")]) == EXIT_OK
        assert len(read_corpus(tmp_path / "c")) == 4
        assert "wrote 4" in capsys.readouterr().out

    def test_train_then_eval(self, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--out", str(run), "--seed", "5", *TINY]) == EXIT_OK
        assert "learner 1" in capsys.readouterr().out
        assert "seed = 5" in (run / "config.cfg").read_text()
        ckpt = run / "checkpoints" / "learner0_final.json"
        code = main(["eval", str(ckpt), "--M", "6", "--out", str(tmp_path / "ev"), *TINY])
        assert code == EXIT_OK
        assert "learner0_final" in capsys.readouterr().out
        assert (tmp_path / "ev" / "eval_episodes.csv").is_file()

    def test_eval_on_stored_corpus(self, tmp_path):
        main(["gen-envs", "--count", "5", "--out", str(tmp_path / "c"), "--purpose", "eval"])
        main(["train", "--out", str(tmp_path / "run"), *TINY])
        ckpt = tmp_path / "run" / "checkpoints" / "learner0_init.json"
        assert main(["eval", str(ckpt), "--M", "5", "--corpus", str(tmp_path / "c"), *TINY]) == EXIT_OK
        assert main(["eval", str(ckpt), "--M", "6", "--corpus", str(tmp_path / "c"), *TINY]) == EXIT_ERROR

    def test_synthetic_train(self, tmp_path, capsys):
        code = main(["train", "--preset", "synthetic", "--set", "run.rounds=20", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / "rounds.csv").is_file()

    def test_sweep(self, tmp_path, capsys):
        code = main(["sweep-learners", "--counts", "1", "--out", str(tmp_path), *TINY, "--set", "run.eval_size=4"])
        assert code == EXIT_OK
        assert "|V|=1 block 0" in capsys.readouterr().out
        assert (tmp_path / "sweep.csv").is_file()


class TestExitCodes:
    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{}")
        assert main(["eval", str(tmp_path / "bad.json"), "--M", "2", *TINY]) == EXIT_ERROR
        assert capsys.readouterr().err.startswith("error:")

    def test_bad_override(self, capsys):
        assert main(["train", "--set", "learner.nosuch=1"]) == EXIT_ERROR

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_verify_pass(self, capsys):
        assert main(["verify", "bounds"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines and all(line.startswith("PASS") for line in lines)

    def test_verify_failure(self, monkeypatch, capsys):
        monkeypatch.setattr(checks, "run_suite", lambda name, seed: [CheckResult("stub", False, "forced", failures=["x"])])
        assert main(["verify", "nes"]) == EXIT_VERIFY
        assert capsys.readouterr().out.startswith("FAIL stub: forced")

    def test_console_script_module(self):
        proc = subprocess.run([sys.executable, "-m", "fedgen.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "sweep-learners" in proc.stdout
