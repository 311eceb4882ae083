import csv
import json
import shutil
import subprocess
import sys

import pytest

from moonshot.analysis import CSV_COLUMNS
from moonshot.cli import main, parse_seeds


def test_parse_seeds():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,1,2") == [3, 1, 2]
    assert len(parse_seeds("1..100")) == 100


def test_run_writes_one_row_per_seed(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--protocol", "simple", "--seeds", "1..100", "--duration", "5",
                 "--no-traces", "--out-dir", str(out)])
    assert code == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert {r["seed"] for r in rows} == {str(s) for s in range(1, 101)}


def test_run_with_scenario_file_and_checks(tmp_path):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"protocol": "commit", "n": 4, "f_actual": 1, "schedule": "B",
                                "duration": 30, "seeds": [1, 2]}))
    out = tmp_path / "o"
    assert main(["run", str(scen), "--check", "--out-dir", str(out)]) == 0
    assert (out / "trace-commit-1.jsonl").exists() and (out / "trace-commit-2.jsonl").exists()
    report = json.loads((out / "checks.json").read_text())
    assert len(report) == 2
    assert main(["check", str(out / "trace-commit-1.jsonl")]) == 0


def test_injected_fault_makes_check_fail(tmp_path, capsys):
    scen = tmp_path / "bad.json"
    scen.write_text(json.dumps({"protocol": "pipelined", "duration": 20,
                                "inject_fault": "conflicting_commit"}))
    out = tmp_path / "o"
    assert main(["run", str(scen), "--check", "--out-dir", str(out)]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["check", str(out / "trace-pipelined-0.jsonl"), "--only", "safety"]) == 1


def test_report_summarizes(tmp_path, capsys):
    out = tmp_path / "o"
    for proto in ("simple", "pipelined"):
        main(["run", "--protocol", proto, "--seeds", "1..3", "--duration", "10", "--no-traces",
              "--out-dir", str(out / proto)])
    capsys.readouterr()
    assert main(["report", str(out / "simple" / "results.csv"),
                 str(out / "pipelined" / "results.csv")]) == 0
    text = capsys.readouterr().out
    assert "simple" in text and "pipelined" in text and "latency_mean" in text


@pytest.mark.parametrize("body", [
    "",
    "a,b,c\n1,2,3\n",
    ",".join(CSV_COLUMNS) + "\n1,2\n",
    ",".join(CSV_COLUMNS) + "\n" + ",".join(["x"] * len(CSV_COLUMNS)) + "\n",
])
def test_report_rejects_malformed_csv(tmp_path, body, capsys):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    assert main(["report", str(p)]) == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run", "--n", "3", "--f", "1"],
    ["run", "--n", "4", "--f-actual", "2"],
    ["run", "--delay-model", "uniform:5"],
    ["run", "--seeds", "9..1"],
    ["check", "/nonexistent/trace.jsonl"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert main(argv + (["--out-dir", str(tmp_path)] if argv[0] == "run" else [])) == 2


def test_bad_scenario_schema(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"protocol": "simple", "n": "four"}))
    assert main(["run", str(p), "--out-dir", str(tmp_path)]) == 2
    p.write_text("{not json")
    assert main(["run", str(p), "--out-dir", str(tmp_path)]) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        main(["run", "--protocol", "hotstuff"])
    assert e.value.code == 2


def test_console_entry_point(tmp_path):
    exe = shutil.which("moonshot")
    cmd = [exe] if exe else [sys.executable, "-m", "moonshot.cli"]
    r = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout
