import subprocess
import sys

import pytest

from rmalib import cli, harness
from rmalib.simnet import SimNIC


def run(argv, capsys):
    code = cli.run(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_bench_put_to_file(tmp_path, capsys):
    path = tmp_path / "out.csv"
    code, out, _ = run(["bench-put", "--kind", "memhandle", "--sizes", "8,64,4096", "--seed", "7",
                        "--iters", "50", "--warmup", "2", "-o", str(path)], capsys)
    assert code == 0 and out == ""
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(harness.CSV_HEADER)
    assert [line.split(",")[2] for line in lines[1:]] == ["8", "64", "4096"]


def test_help_lists_subcommands(capsys):
    code, out, _ = run(["--help"], capsys)
    assert code == 0
    for name in ("bench-put", "bench-progress", "bench-mt-flush", "bench-ordering",
                 "demo-memhandle", "demo-chain", "run-scenario"):
        assert name in out


@pytest.mark.parametrize("argv", [
    [],
    ["bench-flood"],
    ["bench-put", "--bogus"],
    ["bench-put", "--kind", "shared"],
    ["bench-put", "--sizes", "eight", "--iters", "5"],
    ["bench-mt-flush", "--contexts", "a,b", "--iters", "5"],
    ["run-scenario", "/nonexistent/file.conf"],
])
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 1 and err


def test_corrupted_fence_exits_2(monkeypatch, capsys):
    monkeypatch.setattr(SimNIC, "_raise_floor", lambda self, ep: False)
    code, _, err = run(["bench-ordering", "--mode", "ordered_no_flush", "--iters", "200"], capsys)
    assert code == 2 and "correctness" in err


def test_bench_ordering_all_modes(capsys):
    code, out, _ = run(["bench-ordering", "--iters", "20", "--warmup", "1"], capsys)
    rows = out.splitlines()[1:]
    assert code == 0 and [r.split(",")[1] for r in rows] == list(harness.ORDERING_MODES)


def test_bench_mt_flush_both_scopes(capsys):
    code, out, _ = run(["bench-mt-flush", "--contexts", "1,4", "--iters", "5", "--warmup", "1"], capsys)
    rows = [r.split(",") for r in out.splitlines()[1:]]
    assert code == 0 and [(r[3], r[4]) for r in rows] == [
        ("1", "process"), ("4", "process"), ("1", "thread"), ("4", "thread")]


def test_bench_progress(capsys):
    code, out, _ = run(["bench-progress", "--mode", "rdma", "--n-ops", "100", "--busy-time", "0.001"], capsys)
    assert code == 0 and out.splitlines()[1].startswith("progress_rdma,rdma,1,")


def test_seed_precedence(monkeypatch, capsys):
    argv = ["bench-ordering", "--mode", "unordered_unlock_only", "--iters", "30"]
    outputs = {}
    for env, flag in [(None, None), ("42", None), ("5", None), ("5", "42"), (None, "5")]:
        if env is None:
            monkeypatch.delenv(cli.SEED_ENV, raising=False)
        else:
            monkeypatch.setenv(cli.SEED_ENV, env)
        code, out, _ = run(argv + (["--seed", flag] if flag else []), capsys)
        assert code == 0
        outputs[env, flag] = out
    assert outputs[None, None] == outputs["42", None] == outputs["5", "42"]
    assert outputs["5", None] == outputs[None, "5"]


def test_bad_seed_env_is_usage_error(monkeypatch, capsys):
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    code, _, err = run(["bench-put", "--iters", "5"], capsys)
    assert code == 1 and cli.SEED_ENV in err


def test_same_argv_same_output(capsys):
    argv = ["bench-put", "--kind", "dynamic_rkey", "--sizes", "8,1k", "--iters", "40", "--seed", "3"]
    first = run(argv, capsys)
    assert first == run(argv, capsys)


def test_params_file(tmp_path, capsys):
    params = tmp_path / "lat.conf"
    params.write_text("t_rtt = 4.0\n")
    code, out, _ = run(["bench-put", "--iters", "10", "--warmup", "1", "--params", str(params)], capsys)
    assert code == 0 and out.splitlines()[1].split(",")[6] == "4.200320"
    params.write_text("t_rtt = -1\n")
    assert run(["bench-put", "--params", str(params)], capsys)[0] == 1


def test_run_scenario(tmp_path, capsys):
    path = tmp_path / "s.conf"
    path.write_text("name = quick\nbench = mt_flush\ncontexts = 3\nscope = thread\nsizes = 1\n"
                    "iterations = 10\nwarmup = 1\n")
    code, out, _ = run(["run-scenario", str(path)], capsys)
    assert code == 0 and out.splitlines()[1].startswith("quick,allocated,1,3,thread,")
    path.write_text("name = quick\niterations = 0\n")
    assert run(["run-scenario", str(path)], capsys)[0] == 1


def test_demo_memhandle_steps(capsys):
    code, out, _ = run(["demo-memhandle"], capsys)
    assert code == 0
    steps = ["exposes 64 bytes", "sends the handle", "builds memory-handle window", "issues put",
             "flushes", "sets the completion flag", "releases the handle", "stale-rkey"]
    positions = [out.index(s) for s in steps]
    assert positions == sorted(positions)


def test_demo_chain(capsys):
    code, out, _ = run(["demo-chain"], capsys)
    assert code == 0 and "all 20 signals arrived after their data" in out
    hits = 0
    for seed in range(10):
        code, out, _ = run(["demo-chain", "--unordered", "--seed", str(seed)], capsys)
        assert code == 0
        hits += "overtook" in out
    assert hits > 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "rmalib", "demo-chain", "--seed", "1"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0 and "signals arrived" in proc.stdout
