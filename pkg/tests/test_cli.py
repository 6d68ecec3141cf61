import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import SMALL
from ehwsn import cli
from ehwsn import inference as inf
from ehwsn.dataio import save_window, SensorWindow


@pytest.fixture
def window_file(tmp_path):
    x = np.sin(np.linspace(0, 4 * np.pi, 60)) * 0.8 + np.random.default_rng(0).normal(0, 0.05, 60)
    p = tmp_path / "w.txt"
    save_window(p, SensorWindow(x))
    return p


@pytest.fixture
def small_config(tmp_path, small_scenario):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def _body_line(capsys):
    return [l for l in capsys.readouterr().out.splitlines() if l.startswith("body:")][-1]


@pytest.mark.parametrize("extra,size", [([], 42), (["--no-counts"], 36)])
def test_encode_cluster_size(tmp_path, window_file, capsys, extra, size):
    out = tmp_path / "b.bin"
    assert cli.main(["encode", "--codec", "cluster", "--input", str(window_file), "--out", str(out), "--k", "12", *extra]) == 0
    assert _body_line(capsys) == f"body: {size} bytes"
    assert out.stat().st_size == size
    meta = json.loads((tmp_path / "b.bin.json").read_text())
    assert meta["codec"] == "cluster" and meta["length"] == 60


def test_encode_sample_size(tmp_path, window_file, capsys):
    assert cli.main(["encode", "--codec", "sample", "--input", str(window_file), "--out", str(tmp_path / "s.bin")]) == 0
    assert _body_line(capsys) == "body: 44 bytes"


@pytest.mark.parametrize("codec", ["cluster", "sample"])
def test_decode_round_trip(tmp_path, window_file, capsys, codec):
    body, rec = tmp_path / "b.bin", tmp_path / "r.txt"
    rng = ["--range", "-1.5", "1.5"]
    assert cli.main(["encode", "--codec", codec, "--input", str(window_file), "--out", str(body), *rng]) == 0
    assert cli.main(["decode", "--input", str(body), "--out", str(rec), "--seed", "3"]) == 0
    x, y = np.loadtxt(window_file), np.loadtxt(rec)
    assert y.shape == x.shape
    assert np.mean(np.abs(x - y)) <= 0.15 * 3.0


def test_decode_missing_layout(tmp_path, capsys):
    (tmp_path / "b.bin").write_bytes(b"\x00" * 42)
    assert cli.main(["decode", "--input", str(tmp_path / "b.bin")]) == cli.EXIT_CONFIG


def test_decode_truncated_body(tmp_path, window_file, capsys):
    body = tmp_path / "b.bin"
    cli.main(["encode", "--codec", "cluster", "--input", str(window_file), "--out", str(body)])
    body.write_bytes(body.read_bytes()[:-5])
    assert cli.main(["decode", "--input", str(body)]) == cli.EXIT_DATA


@pytest.mark.parametrize(
    "argv,code",
    [
        ([], cli.EXIT_USAGE),
        (["frobnicate"], cli.EXIT_USAGE),
        (["encode", "--input", "x"], cli.EXIT_USAGE),
        (["quantize", "--model", "m", "--bits", "8", "--out", "o"], cli.EXIT_USAGE),
        (["encode", "--codec", "cluster", "--input", "/nonexistent/w.txt"], cli.EXIT_DATA),
        (["trace-gen", "--profile", "constant", "--param", "power_uw=-3", "--out", "/tmp/x.csv"], cli.EXIT_CONFIG),
        (["simulate", "--config", "/nonexistent.toml"], cli.EXIT_CONFIG),
        (["report", "/nonexistent.json"], cli.EXIT_DATA),
    ],
)
def test_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code


def test_encode_bad_range(window_file, capsys):
    assert cli.main(["encode", "--codec", "cluster", "--input", str(window_file), "--range", "1", "0"]) == cli.EXIT_CONFIG


def test_encode_non_numeric_window(tmp_path, capsys):
    p = tmp_path / "w.txt"
    p.write_text("1\nabc\n")
    assert cli.main(["encode", "--codec", "cluster", "--input", str(p)]) == cli.EXIT_DATA


def test_trace_gen(tmp_path, capsys):
    out = tmp_path / "t.csv"
    argv = ["trace-gen", "--profile", "square-wave", "--param", "high_uw=100", "--param", "period_s=0.5", "--duration", "2", "--out", str(out)]
    assert cli.main(argv) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "t_s,power_uw" and len(rows) == 2001
    assert np.mean(np.loadtxt(out, delimiter=",", skiprows=1)[:, 1]) == pytest.approx(50.0)


def test_train_and_quantize(tmp_path, small_config, capsys):
    out = tmp_path / "models"
    assert cli.main(["train", "--config", str(small_config), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["sensors"]) == 3
    files = manifest["sensors"][0]["files"]
    assert inf.load_model(out / files["node16"]).bits == 16
    assert inf.load_model(out / files["node12"]).bits == 12
    q = tmp_path / "q12.ehqm"
    assert cli.main(["quantize", "--model", str(out / files["host32"]), "--bits", "12", "--out", str(q)]) == 0
    assert inf.load_model(q).bits == 12
    assert cli.main(["quantize", "--model", str(q), "--bits", "16", "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG


def test_simulate_deterministic(tmp_path, small_config, capsys):
    a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "a.csv"
    assert cli.main(["simulate", "--config", str(small_config), "--out", str(a), "--csv", str(c)]) == 0
    assert cli.main(["simulate", "--config", str(small_config), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert set(d["metrics"]["strategy_histogram"]) == {"D0", "D1", "D2", "D3", "D4", "DROP"}
    assert c.read_text().startswith("window_id,node,decision")


def test_report_seeker_beats_err(tmp_path, small_config, capsys):
    paths = []
    for pol in ("seeker", "err3", "err12"):
        p = tmp_path / f"{pol}.json"
        assert cli.main(["simulate", "--config", str(small_config), "--policy", pol, "--name", pol, "--out", str(p)]) == 0
        paths.append(str(p))
    table = tmp_path / "table.csv"
    assert cli.main(["report", *paths, "--out", str(table)]) == 0
    rows = {r["name"]: r for r in cli.report_rows(paths)}
    assert rows["seeker"]["completion_fraction"] >= rows["err3"]["completion_fraction"]
    assert rows["seeker"]["completion_fraction"] >= rows["err12"]["completion_fraction"]
    assert table.read_text().splitlines()[0].startswith("name,policy")


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ehwsn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "quantize", "encode", "decode", "trace-gen", "simulate", "report"):
        assert cmd in out.stdout
    bad = subprocess.run([sys.executable, "-m", "ehwsn", "simulate", "--bogus"], capture_output=True, text=True)
    assert bad.returncode == 1
