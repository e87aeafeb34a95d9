import csv
import io
import json
import subprocess
import sys

import pytest

from anonsim.cli import COLUMNS, ExperimentConfig, UsageError, main, run_experiment


def _lines(path):
    return path.read_text().splitlines()


def test_jsonl_report_has_records_then_aggregate(report_dir, capsys):
    assert main(["consensus", "--n", "3", "--trials", "3", "--seed", "4"]) == 0
    path = report_dir / "consensus-n3-round-robin-seed4.jsonl"
    lines = [json.loads(x) for x in _lines(path)]
    assert len(lines) == 4
    assert [r["trial"] for r in lines[:3]] == [0, 1, 2]
    assert set(lines[0]) == set(COLUMNS)
    agg = lines[3]
    assert agg["aggregate"] and agg["trials"] == 3 and agg["violation_count"] == 0
    flat = [x for r in lines[:3] for x in r["iterations"]]
    assert agg["mean_iterations"] == pytest.approx(sum(flat) / len(flat))
    assert str(path) in capsys.readouterr().out


def test_csv_report_header_and_aggregate_row(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["naming", "--n", "5", "--trials", "2", "--format", "csv", "--output", str(out),
                 "--adversary", "all"]) == 0
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert rows[0] == list(COLUMNS)
    assert len(rows) == 4 and rows[-1][0] == "aggregate"
    inv = [int(x) for r in rows[1:3] for x in r[3].split()]
    assert float(rows[-1][3]) == pytest.approx(sum(inv) / len(inv))


def test_reruns_are_byte_identical(tmp_path):
    out = tmp_path / "r.jsonl"
    runs = []
    for _ in range(2):
        main(["coin", "--n", "2", "--trials", "4", "--seed", "9", "--adversary", "all",
              "--output", str(out)])
        runs.append(out.read_bytes())
    assert runs[0] == runs[1]


def test_reference_and_compiled_engines_write_the_same_report(tmp_path):
    for engine in ("reference", "compiled"):
        main(["consensus", "--n", "3", "--trials", "3", "--seed", "2", "--crashes", "cycle",
              "--engine", engine, "--output", str(tmp_path / f"{engine}.jsonl")])
    ref, comp = (_lines(tmp_path / f"{e}.jsonl") for e in ("reference", "compiled"))
    assert ref[:-1] == comp[:-1]


def test_violation_exits_one(report_dir):
    code = main(["check", "--target", "select-winner", "--variant", "plain", "--n", "2",
                 "--depth", "40"])
    assert code == 1
    rec = json.loads(_lines(report_dir / "check-n2-round-robin-seed0.jsonl")[0])
    assert rec["outcome"] == "violation" and "at-most-one-winner" in rec["violations"]


def test_state_budget_overflow_exits_one(report_dir):
    assert main(["check", "--target", "consensus", "--coin", "walk", "--K", "1", "--depth", "40",
                 "--max-states", "100"]) == 1


@pytest.mark.parametrize("argv", [
    ["consensus", "--n", "0"],
    ["consensus", "--adversary", "nobody"],
    ["consensus", "--n", "2", "--inputs", "012"],
    ["naming", "--crashes", "k:5", "--n", "3"],
    ["check", "--n", "4"],
])
def test_bad_configurations_exit_two(argv, report_dir, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["consensus", "--bogus"])
    assert exc.value.code == 2


def test_config_validation_directly():
    with pytest.raises(UsageError):
        ExperimentConfig(command="coin", n=2, delta=1.5).validate()


def test_impossibility_command_reports_collisions(report_dir, capsys):
    assert main(["impossibility"]) == 0
    recs = [json.loads(x) for x in _lines(report_dir / "impossibility-n2-round-robin-seed0.jsonl")]
    assert all(r["violations"] == [] for r in recs[:-1])
    assert any(r["outcome"].endswith(":collision") for r in recs[:-1])
    assert "collision witnessed" in capsys.readouterr().out


def test_run_experiment_returns_records():
    stats = run_experiment(ExperimentConfig(command="naming", n=4, trials=2, mode="simple"))
    assert stats.exit_code == 0
    assert all(r["outcome"] == "named" for r in stats.records)
    assert len(stats.records) == 2


def test_console_entry_point_runs(tmp_path):
    out = tmp_path / "x.jsonl"
    proc = subprocess.run([sys.executable, "-m", "anonsim", "coin", "--n", "2", "--output", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(_lines(out)) == 2
