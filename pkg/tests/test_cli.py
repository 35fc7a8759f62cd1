import json
import subprocess
import sys
import time

import pytest

from aimcsim.cli import main

TOY = ["--workload", "builtin:toy", "--preset", "naive"]


def test_map_writes_plan(tmp_path, capsys):
    assert main(["map", *TOY, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "plan_naive.json").exists()
    assert "clusters" in capsys.readouterr().out


def test_simulate_smoke_run_is_fast(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "aimcsim.cli", "simulate", *TOY,
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert time.perf_counter() - t0 < 10
    for name in ("report.json", "clusters.csv", "links.csv", "figure_data.csv",
                 "firings.csv", "plan.json"):
        assert (tmp_path / name).exists(), name
    assert "TOPS" in proc.stdout


def test_repeat_runs_agree(tmp_path, capsys):
    assert main(["simulate", *TOY, "--repeat", "2", "--out", str(tmp_path)]) == 0
    assert "2 runs identical" in capsys.readouterr().out


def test_trace_and_report(tmp_path, capsys):
    assert main(["simulate", *TOY, "--trace", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trace.csv").read_text().startswith("time_ps,")
    capsys.readouterr()
    assert main(["report", str(tmp_path / "report.json")]) == 0
    out = capsys.readouterr().out
    line = next(x for x in out.splitlines() if x.startswith("conservation:"))
    assert all(f"{k}=ok" in line for k in ("tiles", "mvms", "noc_bytes", "footprint"))


def test_saved_plan_is_reusable(tmp_path):
    assert main(["map", *TOY, "--out", str(tmp_path)]) == 0
    plan = tmp_path / "plan_naive.json"
    assert main(["simulate", "--workload", "builtin:toy", "--plan", str(plan),
                 "--out", str(tmp_path / "b")]) == 0


def test_env_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("AIMCSIM_OUT", str(tmp_path / "envout"))
    assert main(["map", *TOY]) == 0
    assert (tmp_path / "envout" / "plan_naive.json").exists()


def test_validate_ok(capsys):
    assert main(["validate", *TOY]) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_bad_arch_exits_2(tmp_path, capsys):
    bad = tmp_path / "arch.json"
    bad.write_text(json.dumps({"noc": {"quadrant_factors": [1, 8, 4, 4, 3]}}))
    assert main(["validate", *TOY, "--arch", str(bad)]) == 2
    assert "quadrant_factors" in capsys.readouterr().out
    assert main(["simulate", *TOY, "--arch", str(bad), "--out", str(tmp_path)]) == 2


def test_mapping_error_exits_2(tmp_path, capsys):
    assert main(["map", "--preset", "final", "--budget", "100", "--out", str(tmp_path)]) == 2
    assert "budget is 100" in capsys.readouterr().err


def test_unknown_workload_exits_2(capsys):
    assert main(["validate", "--workload", "builtin:vgg"]) == 2
    assert main(["map", "--workload", "builtin:resnet18:12x"]) == 2


def test_deadlock_exits_1(tmp_path, monkeypatch, capsys):
    from aimcsim import cli
    from aimcsim.cluster import DeadlockError

    def stuck(*a, **k):
        raise DeadlockError("deadlock: wait cycle cluster0 -> cluster1 -> cluster0", [0, 1, 0])

    monkeypatch.setattr(cli, "run_batch", stuck)
    assert main(["simulate", *TOY, "--out", str(tmp_path)]) == 1
    assert "wait cycle" in capsys.readouterr().err


def test_nondeterminism_exits_1(tmp_path, monkeypatch, capsys):
    from aimcsim import cli

    real = cli.run_batch
    calls = iter(range(10))

    def drifting(*a, **k):
        rep = real(*a, **k)
        rep.events += next(calls)
        return rep

    monkeypatch.setattr(cli, "run_batch", drifting)
    assert main(["simulate", *TOY, "--repeat", "2", "--out", str(tmp_path)]) == 1


def test_report_missing_file(tmp_path):
    with pytest.raises(SystemExit):
        main(["report"])
    assert main(["report", str(tmp_path / "nope.json")]) == 2
