import json
import os
import socket
import subprocess
import sys

import pytest

from esscale import __version__, cli

CFG = "[run]\nseed = 4\nupdates = 10\ncheckpoint_every = 4\n[env]\nname = sphere\ndim = 12\n" \
      "[noise]\nlength = 40000\n[es]\npop_pairs = 5\n"


@pytest.fixture(autouse=True)
def no_signal_handlers(monkeypatch):
    monkeypatch.setattr(cli.StopFlag, "install", lambda self: None)


@pytest.fixture
def cfg_file(tmp_path):
    f = tmp_path / "run.ini"
    f.write_text(CFG)
    return f


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_run_writes_ten_records(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(cfg_file), "--out", str(out)]) == 0
    recs = records(out / "progress.jsonl")
    assert [r["t"] for r in recs] == list(range(1, 11))


def test_run_is_deterministic_and_resumable(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", str(cfg_file), "--out", str(a)])
    cli.main(["run", "--config", str(cfg_file), "--out", str(b), "--updates", "6"])
    cli.main(["run", "--config", str(cfg_file), "--out", str(b), "--resume"])
    sums = lambda p: [r["theta_checksum"] for r in records(p / "progress.jsonl")]  # noqa: E731
    assert sums(a) == sums(b)
    cli.main(["run", "--config", str(cfg_file), "--out", str(b), "--seed", "5"])
    assert sums(a) != sums(b)


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[es]\nsigma = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG


def test_quorum_failure_exit_4(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text(CFG + f"[distrib]\nport = {free_port()}\nworkers = 2\ntimeout = 0.3\n")
    assert cli.main(["coord", "--config", str(f), "--out", str(tmp_path / "o")]) == cli.EXIT_QUORUM


def test_port_in_use_exit_3(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        f = tmp_path / "c.ini"
        f.write_text(CFG + f"[distrib]\nport = {s.getsockname()[1]}\n")
        assert cli.main(["coord", "--config", str(f), "--out", str(tmp_path / "o")]) == \
            cli.EXIT_PORT_IN_USE


def test_worker_address(monkeypatch):
    cfg = cli.defaults()
    monkeypatch.delenv("ES_COORD_ADDR", raising=False)
    assert cli.worker_address(cfg) == ("127.0.0.1", 7580)
    monkeypatch.setenv("ES_COORD_ADDR", "10.0.0.2:9000")
    assert cli.worker_address(cfg) == ("10.0.0.2", 9000)
    assert cli.worker_address(cfg, "h:1") == ("h", 1)
    with pytest.raises(cli.ConfigError):
        cli.worker_address(cfg, "nohost")


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert out.startswith(f"esscale {__version__} proto_version 1 kernels ")


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit):
        cli.main(["run", "--help"])
    assert "exit codes" in capsys.readouterr().out


def test_exp_dupfeat(tmp_path, capsys):
    assert cli.main(["exp", "dupfeat", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dupfeat.csv").exists()
    assert "divergence" in capsys.readouterr().out


def test_coord_and_workers_over_tcp(cfg_file, tmp_path):
    """Separate processes reproduce the single-process checksums."""
    port = free_port()
    f = tmp_path / "c.ini"
    f.write_text(CFG + f"[distrib]\nport = {port}\nworkers = 2\ntimeout = 20\n")
    env = dict(os.environ, ES_COORD_ADDR=f"127.0.0.1:{port}")
    run = [sys.executable, "-m", "esscale"]
    coord = subprocess.Popen(run + ["coord", "--config", str(f), "--out", str(tmp_path / "c")])
    workers = [subprocess.Popen(run + ["worker", "--config", str(f), "--retries", "20"], env=env)
               for _ in range(2)]
    assert coord.wait(60) == 0
    assert [w.wait(30) for w in workers] == [0, 0]
    cli.main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "s")])
    got = [r["theta_checksum"] for r in records(tmp_path / "c" / "progress.jsonl")]
    want = [r["theta_checksum"] for r in records(tmp_path / "s" / "progress.jsonl")]
    assert got == want
