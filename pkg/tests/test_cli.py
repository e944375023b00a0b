import csv
import json

import pytest

from cfl import cli

SMALL = {
    "version": 1,
    "protocol": {"name": "majority", "params": {"n": 12, "r": 5}},
    "trials": 200,
    "pilot_trials": 100,
    "sample_budget": 1000,
    "max_honest": 1,
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _rows(out):
    with open(out / "summary.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("cmd", ["simulate", "lapexp", "martingale-check", "verify-lemmas", "nugget"])
def test_subcommands_write_outputs(tmp_path, cmd):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "out"
    code = cli.main([cmd, "--config", cfg, "--out", str(out)])
    assert code == cli.EXIT_OK
    rows = _rows(out)
    assert rows and list(rows[0]) == list(cli.SUMMARY_COLUMNS)
    lines = (out / "results.jsonl").read_text().splitlines()
    assert all(json.loads(line) for line in lines)


def test_attack_is_reproducible_and_reportable(tmp_path):
    cfg = _write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["attack", "--config", cfg, "--out", str(a), "--seed", "3"])
    cli.main(["attack", "--config", cfg, "--out", str(b), "--seed", "3"])
    assert (a / "results.jsonl").read_bytes() == (b / "results.jsonl").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    rec = json.loads((a / "results.jsonl").read_text().splitlines()[0])
    assert "wall_time" not in rec and {"trial", "seed_path", "out", "kind"} <= set(rec)
    assert json.loads((a / "attack.json").read_text())["trials"] == 200
    # a truncated final line (interrupted run) is skipped by the report
    with open(a / "results.jsonl", "a") as fh:
        fh.write('{"trial": 99')
    assert cli.main(["report", "--out", str(a)]) == cli.EXIT_OK
    assert int(_rows(a)[0]["trials"]) == 200


def test_threads_do_not_change_results(tmp_path, monkeypatch):
    cfg = _write(tmp_path, SMALL)
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "one")])
    monkeypatch.setenv("CFL_THREADS", "4")
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "four")])
    assert (tmp_path / "one" / "results.jsonl").read_bytes() == (tmp_path / "four" / "results.jsonl").read_bytes()


def test_wall_time_only_when_enabled(tmp_path):
    cfg = _write(tmp_path, dict(SMALL, record_wall_time=True))
    cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
    rec = json.loads((tmp_path / "o" / "results.jsonl").read_text().splitlines()[0])
    assert rec["wall_time"] >= 0


@pytest.mark.parametrize("bad", [
    {"version": 2},
    {"version": 1, "unknown": 1},
    {"version": 1, "trials": -1},
    {"version": 1, "protocol": {"name": "majority", "params": {"n": 5, "r": 4}}},
    {"version": 1, "protocol": {"name": "nope"}},
])
def test_config_errors_exit_2(tmp_path, bad):
    cfg = _write(tmp_path, bad)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_unreadable_config_and_missing_report_input(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    (tmp_path / "junk.json").write_text("{not json")
    assert cli.main(["simulate", "--config", str(tmp_path / "junk.json")]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == cli.EXIT_IO


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CFL_THREADS", "many")
    assert cli.main(["simulate", "--config", _write(tmp_path, SMALL)]) == cli.EXIT_CONFIG


def test_zero_trials_is_inconclusive(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["attack", "--config", _write(tmp_path, SMALL), "--trials", "0", "--out", str(out)]) == 0
    assert _rows(out)[0]["status"] == "inconclusive"


def test_estimate_bias():
    row = cli.estimate_bias([1] * 70 + [0] * 30, target=1, pass_z=3)
    assert row.estimate == pytest.approx(0.2) and row.ci_low < 0.2 < row.ci_high and row.status == "pass"
    row = cli.estimate_bias([1] * 70 + [0] * 30, target=0, pass_z=3)
    assert row.estimate == pytest.approx(-0.2) and row.status == "fail"
    assert cli.estimate_bias([], 1).status == "inconclusive"
