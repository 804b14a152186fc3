import csv
import io
import json
import subprocess
import sys
import time

import pytest
import yaml

from conftest import small_config
from ocsmoe.cli import expand, main, parse_sweep
from ocsmoe.fabric import ConfigError


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_smoke_preset_is_fast(capsys):
    t0 = time.perf_counter()
    assert main(["run", "--preset", "smoke"]) == 0
    assert time.perf_counter() - t0 < 5
    rows = _rows(capsys.readouterr().out)
    assert len(rows) == 1
    assert float(rows[0]["iteration_time_s"]) > 0


def test_bandwidth_sweep_gets_faster(capsys):
    assert main(["run", "--preset", "smoke", "--sweep", "bandwidth=100,200,400,800"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert [r["bandwidth"] for r in rows] == ["100", "200", "400", "800"]
    times = [float(r["iteration_time_s"]) for r in rows]
    assert times == sorted(times, reverse=True)
    costs = [float(r["cost_total"]) for r in rows]
    assert costs == sorted(costs)


def test_delay_sweep_is_flat_then_degrades(capsys):
    assert main(["run", "--preset", "fig24"]) == 0
    rows = _rows(capsys.readouterr().out)
    t = [float(r["iteration_time_s"]) for r in rows]
    assert len(t) == 5
    assert max(t[:3]) <= min(t[:3]) * (1 + 1e-3)
    assert t[2] < t[3] < t[4]


def test_out_dir_artifacts_and_replay(tmp_path, capsys):
    out, again = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--preset", "smoke", "--sweep", "fabric=fattree,mixnet", "--out-dir", str(out),
                 "--events"]) == 0
    capsys.readouterr()
    names = {p.name for p in out.iterdir()}
    assert {"results.csv", "reports.json", "costs.csv", "manifest.json"} <= names
    assert sum(n.endswith(".events.jsonl") for n in names) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["sweep"] == [["fabric", ["fattree", "mixnet"]]]
    assert len(manifest["runs"]) == 2
    reports = json.loads((out / "reports.json").read_text())
    assert set(reports) == {r["run_id"] for r in _rows((out / "results.csv").read_text())}
    assert main(["replay", str(out / "manifest.json"), "--out-dir", str(again)]) == 0
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    assert (again / "reports.json").read_bytes() == (out / "reports.json").read_bytes()


def test_config_file_and_overrides(tmp_path, capsys):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(small_config()))
    assert main(["run", "--config", str(path), "--fabric", "fattree", "--seed", "3", "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["fabric"] == "fattree" and rows[0]["seed"] == 3 and rows[0]["policy"] == "static"
    assert main(["run", "--config", str(path), "--policy", "predict", "--set", "model.num_layers=2"]) == 0
    assert _rows(capsys.readouterr().out)[0]["policy"] == "predict"


@pytest.mark.parametrize("argv", [
    ["run"],
    ["run", "--preset", "smoke", "--set", "nonsense"],
    ["run", "--preset", "smoke", "--set", "model.top_k=0"],
    ["run", "--preset", "smoke", "--sweep", "bandwidth"],
    ["run", "--preset", "smoke", "--fabric", "token-ring"],
])
def test_bad_input_exits_2(argv, capsys):
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_config_file_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"cluster": {"num_servers": 2}, "engine": {}}))
    assert main(["run", "--config", str(path)]) == 2


def test_presets_and_cost_subcommands(capsys):
    assert main(["presets"]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert {"smoke", "desk16", "fig15", "fig24"} <= set(names)
    assert main(["cost", "--servers", "1", "--bandwidth", "100", "--fabrics", "fattree,mixnet"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert [float(r["total"]) for r in rows] == [12928.0, 9756.0]
    assert main(["cost", "--servers", "4", "--bandwidth", "100", "--fabrics", "mixnet", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)[0]["servers"] == 4


def test_sweep_expansion():
    axes = parse_sweep(["bandwidth=100,200", "seed=1,2,3"])
    assert axes == [("bandwidth", ["100", "200"]), ("seed", ["1", "2", "3"])]
    points = expand(small_config(), axes)
    assert len(points) == 6 and len({rid for rid, _ in points}) == 6
    with pytest.raises(ConfigError):
        parse_sweep(["oops"])


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "ocsmoe.cli", "run", "--preset", "smoke", "--set", "seed=-"],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "config error" in out.stderr
    out = subprocess.run([sys.executable, "-m", "ocsmoe.cli", "presets"], capture_output=True, text=True)
    assert out.returncode == 0 and "smoke" in out.stdout


def test_yaml_exponent_without_dot_is_a_number(tmp_path, capsys):
    # YAML 1.1 reads 100e9 as a string
    path = tmp_path / "exp.yaml"
    text = yaml.safe_dump(small_config()).replace("nic_bandwidth: 100000000000.0", "nic_bandwidth: 100e9")
    assert "100e9" in text
    path.write_text(text)
    assert main(["run", "--config", str(path)]) == 0
    assert _rows(capsys.readouterr().out)[0]["bandwidth"] == "100"
    path.write_text(text.replace("100e9", "fast"))
    assert main(["run", "--config", str(path)]) == 2
    assert "nic_bandwidth" in capsys.readouterr().err
