import json
import subprocess
import sys

import pytest

from gridtopo.cli import main
from gridtopo.grid import Feeder, seven_bus_feeder


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_simulate_writes_bundle(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--seed", "3", "--n-buses", "5", "--T", "12", "--out", str(tmp_path))
    assert code == 0
    for name in ("feeder.json", "injections.json", "measurements.csv"):
        assert (tmp_path / name).exists()
    assert Feeder.load(tmp_path / "feeder.json").n_buses == 5
    assert json.loads(out)["T"] == 12
    code, _, _ = _run(capsys, "simulate", "--seed", "3", "--kind", "probing", "--n-buses", "5", "--out", str(tmp_path / "p"))
    assert code == 0 and (tmp_path / "p" / "measurements.csv").exists()


def test_identify_and_detect(tmp_path, capsys):
    code, out, _ = _run(capsys, "identify", "ls", "--seed", "1", "--n-buses", "5", "--T", "20", "--out", str(tmp_path))
    rec = json.loads(out)
    assert code == 0 and rec["status"] == "ok" and rec["f1"] == 1.0
    assert json.loads((tmp_path / "result.json").read_text()) == rec
    code, out, _ = _run(capsys, "detect", "miqp-detect", "--seed", "1", "--n-buses", "5", "--T", "10")
    assert code == 0 and json.loads(out)["f1"] == 1.0
    code, out, _ = _run(capsys, "identify", "lasso", "--seed", "1", "--n-buses", "4", "--T", "10", "--param", "lam=1e-7")
    assert code == 0


def test_config_file_and_feeder_override(tmp_path, capsys):
    seven_bus_feeder(r=0.01, x=0.02).save(tmp_path / "f.json")
    (tmp_path / "c.json").write_text(json.dumps({"method": "kron-rg", "observed": [2, 3, 5, 6, 7], "measurement": {"T": 30}}))
    code, out, _ = _run(capsys, "identify", "kron-rg", "--seed", "2", "--config", str(tmp_path / "c.json"), "--feeder", str(tmp_path / "f.json"))
    assert code == 0 and json.loads(out)["f1"] == 1.0


def test_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["identify", "ls", "--n-buses", "4"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert _run(capsys, "identify", "no-such", "--seed", "1")[0] == 2
    assert _run(capsys, "detect", "ls", "--seed", "1")[0] == 2
    assert _run(capsys, "identify", "ls", "--seed", "1", "--param", "oops")[0] == 2
    assert _run(capsys, "identify", "ls", "--seed", "1", "--config", "/nonexistent.json")[0] == 2
    code, _, err = _run(capsys, "identify", "ls", "--seed", "1", "--n-buses", "6", "--observed", "leaves", "--T", "20")
    assert code == 3 and "estimator failed" in err


def test_sweep_prints_csv(tmp_path, capsys):
    code, out, _ = _run(
        capsys, "sweep", "--seed", "4", "--n-buses", "5", "--T", "30", "--seeds", "2", "--noise-grid", "0,0.001", "--threads", "2", "--out", str(tmp_path)
    )
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].startswith("T,noise_sd") and len(lines) == 3
    assert (tmp_path / "report.json").exists() and (tmp_path / "sweep.csv").read_text() == out
    assert _run(capsys, "sweep", "--seed", "4", "--seeds", "0")[0] == 2


def test_evaluate(tmp_path, capsys):
    f = seven_bus_feeder()
    f.save(tmp_path / "truth.json")
    (tmp_path / "est.json").write_text(json.dumps({"edges": [list(e) for e in sorted(f.edges)]}))
    code, out, _ = _run(capsys, "evaluate", "--estimate", str(tmp_path / "est.json"), "--truth", str(tmp_path / "truth.json"))
    assert code == 0 and json.loads(out)["f1"] == 1.0
    (tmp_path / "kron.json").write_text(json.dumps([[0, -1], [-1, 3], [-1, -2], [-2, 5], [-2, 7]]))
    code, out, _ = _run(
        capsys, "evaluate", "--estimate", str(tmp_path / "kron.json"), "--truth", str(tmp_path / "truth.json"), "--mode", "kron-collapsed", "--observed", "leaves"
    )
    assert code == 0 and json.loads(out)["f1"] == 1.0
    assert _run(capsys, "evaluate", "--estimate", str(tmp_path / "missing.json"), "--truth", str(tmp_path / "truth.json"))[0] == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gridtopo.cli", "identify", "ls", "--seed", "1", "--n-buses", "3", "--T", "6"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["status"] == "ok"
    res = subprocess.run([sys.executable, "-m", "gridtopo.cli", "identify", "ls"], capture_output=True, text=True)
    assert res.returncode == 2
