import hashlib
import json
import subprocess
import sys

import pytest

from ppfl import __version__
from ppfl.cli import main, read_config

FAST = ["--rounds", "2", "--local-steps", "1", "--batch-size", "8", "--hidden", "3"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--clients", "2", "--days", "6", "--seed", "1", "--out", str(out)]) == 0
    return out


def err_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("ppfl: error: ")
    return lines[0]


class TestGenData:
    def test_files_and_hashes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["gen-data", "--clients", "8", "--days", "30", "--seed", "1", "--out", str(d)]) == 0
        files = sorted(a.glob("*.csv"))
        assert len(files) == 8
        assert all(len(f.read_text().splitlines()) == 2881 for f in files)
        assert [digest(f) for f in files] == [digest(b / f.name) for f in files]
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["software_version"] == __version__ and manifest["data"][files[0].name] == digest(files[0])

    def test_nine_clients_rejected(self, tmp_path, capsys):
        assert main(["gen-data", "--clients", "9", "--out", str(tmp_path / "x")]) != 0
        assert "8" in err_line(capsys)
        assert not (tmp_path / "x").exists()

    def test_unwritable_directory(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["gen-data", "--clients", "1", "--out", str(blocker / "sub")]) != 0
        err_line(capsys)

    def test_env_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PPFL_OUT_DIR", str(tmp_path / "env"))
        assert main(["gen-data", "--clients", "1", "--days", "3"]) == 0
        assert (tmp_path / "env" / "client_001.csv").exists()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PPFL_OUT_DIR", str(tmp_path / "env"))
        assert main(["gen-data", "--clients", "1", "--days", "3", "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "client_001.csv").exists() and not (tmp_path / "env").exists()

    def test_no_out_dir(self, monkeypatch, capsys):
        monkeypatch.delenv("PPFL_OUT_DIR", raising=False)
        assert main(["gen-data", "--clients", "1"]) != 0
        assert "PPFL_OUT_DIR" in err_line(capsys)


class TestTrain:
    def test_ppfl_outputs(self, data_dir, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--mode", "ppfl", "--epsilon", "10", "--data", str(data_dir), "--out", str(out), *FAST]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "method,epsilon,mase,mape" and len(lines) == 2
        method, eps, mase, mape = lines[1].split(",")
        assert (method, float(eps)) == ("ppfl", 10.0) and float(mase) < float("inf") and float(mape) < float("inf")
        for name in ("report.csv", "ape.csv", "telemetry.csv", "validation.csv", "manifest.json"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["epsilon"] == 10.0 and manifest["config"]["rounds"] == 2

    def test_personalized_equals_ppfl_without_noise(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--mode", "personalized", "--data", str(data_dir), "--out", str(a), *FAST]) == 0
        assert main(["train", "--mode", "ppfl", "--epsilon", "off", "--data", str(data_dir), "--out", str(b), *FAST]) == 0
        assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
        row = lambda d: (d / "metrics.csv").read_text().splitlines()[1].split(",")[2:]
        assert row(a) == row(b)

    def test_reproducible_across_workers(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        base = ["train", "--mode", "ppfl", "--epsilon", "1", "--data", str(data_dir), *FAST]
        assert main([*base, "--out", str(a), "--workers", "1"]) == 0
        assert main([*base, "--out", str(b), "--workers", "2"]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()

    def test_epsilon_with_fl_rejected(self, data_dir, tmp_path, capsys):
        assert main(["train", "--mode", "fl", "--epsilon", "10", "--data", str(data_dir), "--out", str(tmp_path / "o")]) != 0
        assert "config" in err_line(capsys)
        assert not (tmp_path / "o").exists()

    def test_missing_config_writes_nothing(self, data_dir, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["train", "--config", str(tmp_path / "none.cfg"), "--data", str(data_dir), "--out", str(out)]) != 0
        err_line(capsys)
        assert not out.exists()

    def test_config_file_and_flag_precedence(self, data_dir, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("# desk run\nmode = fl\nrounds = 1\nlocal_steps = 1\nbatch_size = 8\nhidden = 5\n")
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--hidden", "3", "--data", str(data_dir), "--out", str(out)]) == 0
        resolved = json.loads((out / "manifest.json").read_text())["config"]
        assert (resolved["mode"], resolved["hidden"], resolved["rounds"]) == ("fl", 3, 1)

    def test_config_parsing_errors(self, tmp_path):
        from ppfl.cli import CliError
        bad = tmp_path / "bad.cfg"
        for text in ("nonsense\n", "colour = red\n", "rounds = many\n"):
            bad.write_text(text)
            with pytest.raises(CliError):
                read_config(bad)
        bad.write_text("epsilon = off\nshare_all = yes\npooled_batch_size = none\n")
        assert read_config(bad) == {"epsilon": None, "share_all": True, "pooled_batch_size": None}

    def test_missing_data(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) != 0
        assert "data" in err_line(capsys)


class TestSweep:
    def test_rows_and_single_epsilon_matches_train(self, data_dir, tmp_path):
        out = tmp_path / "sw"
        assert main(["sweep", "--epsilons", "0.1,100", "--data", str(data_dir), "--out", str(out), *FAST]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3 and [l.split(",")[1] for l in lines[1:]] == ["0.1", "100.0"]
        single = tmp_path / "tr"
        assert main(["train", "--mode", "ppfl", "--epsilon", "100", "--data", str(data_dir), "--out", str(single), *FAST]) == 0
        assert (single / "metrics.csv").read_text().splitlines()[1] == lines[2]

    def test_default_grid(self):
        from ppfl.cli import build_parser
        args = build_parser().parse_args(["sweep", "--data", "d"])
        assert args.epsilons == "0.1,1,10,100,1000,10000"

    @pytest.mark.parametrize("eps", ["0", "-1", "1,off"])
    def test_nonpositive_rejected(self, data_dir, tmp_path, capsys, eps):
        assert main(["sweep", "--epsilons", eps, "--data", str(data_dir), "--out", str(tmp_path / "o")]) != 0
        err_line(capsys)


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--mode", "ppfl", "--epsilon", "10", "--data", str(data_dir), "--out", str(out), *FAST]) == 0
    return out


class TestEval:
    def test_reproduces_training_report(self, trained, data_dir, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained / "checkpoints"), "--data", str(data_dir), "--out", str(out)]) == 0
        assert (out / "report.csv").read_bytes() == (trained / "report.csv").read_bytes()
        assert (out / "ape.csv").read_bytes() == (trained / "ape.csv").read_bytes()

    def test_last_n(self, trained, data_dir, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--checkpoint", str(trained / "checkpoints"), "--data", str(data_dir),
                     "--out", str(out), "--last-n", "10"]) == 0
        rows = [r.split(",") for r in (out / "ape.csv").read_text().splitlines()[1:]]
        assert len(rows) == 20
        full = (trained / "ape.csv").read_text().splitlines()[1:]
        n_test = sum(1 for r in full if r.startswith("client_001,"))
        assert [int(r[1]) for r in rows[:10]] == list(range(n_test - 10, n_test))

    def test_server_params(self, trained, data_dir, tmp_path):
        assert main(["eval", "--checkpoint", str(trained / "checkpoints"), "--data", str(data_dir),
                     "--out", str(tmp_path / "ev"), "--params", "server"]) == 0

    def test_truncated_checkpoint(self, trained, data_dir, tmp_path, capsys):
        raw = (trained / "checkpoints" / "client_000.ckpt").read_bytes()
        bad = tmp_path / "client_000.ckpt"
        bad.write_bytes(raw[: len(raw) // 2])
        assert main(["eval", "--checkpoint", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "o")]) != 0
        assert "checkpoint" in err_line(capsys)


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "ppfl.cli", "--version"], capture_output=True, text=True)
    assert ok.returncode == 0 and __version__ in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "ppfl.cli", "gen-data", "--clients", "9", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert bad.returncode == 1 and bad.stderr.count("\n") == 1
