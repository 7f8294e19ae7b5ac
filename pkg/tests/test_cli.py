from __future__ import annotations

import csv
import io
import json

import pytest

from fedsim import cli
from fedsim.data import load_dataset
from fedsim.remote import RegistryServer


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_run_defaults_quick_start(tmp_path, capsys, monkeypatch):
    # bare `fedsim run`: documented defaults, no config file, exit 0
    monkeypatch.setenv("FEDSIM_TRACK_DIR", str(tmp_path / "runs"))
    code, out, _ = run_cli(capsys, "run")
    assert code == 0
    payload = json.loads(out.strip())
    assert payload["rounds"] == 10
    assert "task_id" in payload and "final_accuracy" in payload


def test_run_flag_overrides(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FEDSIM_TRACK_DIR", str(tmp_path / "runs"))
    code, out, _ = run_cli(
        capsys, "run", "--rounds", "2", "--clients-per-round", "2",
    )
    assert code == 0
    payload = json.loads(out.strip())
    assert payload["rounds"] == 2


def test_run_with_config_file(tmp_path, capsys):
    cfg = {
        "rounds": 2,
        "clients_per_round": 2,
        "partition": {"num_clients": 6},
        "synthetic": {"total_samples": 300},
        "tracking_dir": str(tmp_path / "runs"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code, out, _ = run_cli(capsys, "run", "--config", str(cfg_path))
    assert code == 0
    assert json.loads(out.strip())["rounds"] == 2


def test_flags_override_config_file(tmp_path, capsys):
    cfg = {
        "rounds": 9,
        "clients_per_round": 2,
        "partition": {"num_clients": 6},
        "synthetic": {"total_samples": 300},
        "tracking_dir": str(tmp_path / "runs"),
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    code, out, _ = run_cli(capsys, "run", "--config", str(cfg_path), "--rounds", "1")
    assert code == 0
    assert json.loads(out.strip())["rounds"] == 1


def test_invalid_config_exits_one(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--rounds", "0")
    assert code == 1
    assert "rounds" in err


def test_track_unknown_task_exits_two(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "track", "--task", "nope", "--level", "round",
        "--tracking-dir", str(tmp_path),
    )
    assert code == 2
    assert "nope" in err


def test_run_then_track_round_records(tmp_path, capsys):
    runs = tmp_path / "runs"
    code, out, _ = run_cli(
        capsys, "run", "--rounds", "3", "--clients-per-round", "2",
        "--tracking-dir", str(runs),
    )
    assert code == 0
    task_id = json.loads(out.strip())["task_id"]
    code, out, _ = run_cli(
        capsys, "track", "--task", task_id, "--level", "round",
        "--tracking-dir", str(runs),
    )
    assert code == 0
    lines = [json.loads(line) for line in out.strip().splitlines()]
    assert [r["round_index"] for r in lines] == [0, 1, 2]
    code, out, _ = run_cli(
        capsys, "track", "--task", task_id, "--level", "client", "--round", "1",
        "--tracking-dir", str(runs),
    )
    assert code == 0
    client_lines = [json.loads(line) for line in out.strip().splitlines()]
    assert len(client_lines) == 2
    assert all(rec["round_index"] == 1 for rec in client_lines)


def test_partition_emits_loadable_dataset(tmp_path, capsys):
    out_dir = tmp_path / "ds"
    code, out, _ = run_cli(
        capsys, "partition", "--out", str(out_dir), "--scheme", "dirichlet",
        "--num-clients", "5", "--alpha", "0.5", "--samples", "300", "--seed", "4",
    )
    assert code == 0
    summary = json.loads(out.strip())
    assert summary["num_clients"] == 5
    fd = load_dataset(out_dir)
    assert len(fd.clients) == 5
    assert fd.total_samples() == 300


def test_sched_bench_csv(capsys):
    code, out, _ = run_cli(
        capsys, "sched-bench", "--clients", "8", "--workers", "2", "--seeds", "10",
    )
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    strategies = {(r["strategy"], r["workers"]) for r in rows}
    assert ("greedyada", "2") in strategies
    assert ("random", "2") in strategies
    assert ("slowest", "2") in strategies
    assert ("standalone", "1") in strategies
    by_name = {(r["strategy"], r["workers"]): float(r["makespan"]) for r in rows}
    assert by_name[("greedyada", "2")] <= by_name[("slowest", "2")]
    for row in rows:
        assert float(row["speedup"]) > 0


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--banana", "1"])
    assert exc.value.code == 2


def test_repeated_invocations_reproduce_metrics(tmp_path, capsys):
    # same seed, two separate invocations: identical accuracy/loss traces
    def run_once(tag: str) -> list[dict]:
        runs = tmp_path / tag
        code, out, _ = run_cli(
            capsys, "run", "--seed", "7", "--rounds", "3",
            "--clients-per-round", "2", "--tracking-dir", str(runs),
        )
        assert code == 0
        task_id = json.loads(out.strip())["task_id"]
        code, out, _ = run_cli(
            capsys, "track", "--task", task_id, "--level", "round",
            "--tracking-dir", str(runs),
        )
        assert code == 0
        return [json.loads(line) for line in out.strip().splitlines()]

    first = run_once("a")
    second = run_once("b")
    keys = ("round_index", "accuracy", "loss", "selected", "upload_bytes", "download_bytes")
    trimmed_first = [{k: rec[k] for k in keys} for rec in first]
    trimmed_second = [{k: rec[k] for k in keys} for rec in second]
    assert trimmed_first == trimmed_second


def test_remote_cli_round_trip(tmp_path, capsys):
    # full loop: partition -> registry -> clients -> server, all via CLI entry
    # points driven in-process
    data_dir = tmp_path / "ds"
    code, _, _ = run_cli(
        capsys, "partition", "--out", str(data_dir), "--num-clients", "2",
        "--samples", "200", "--seed", "11",
    )
    assert code == 0

    registry = RegistryServer(("127.0.0.1", 0))
    registry.start()
    reg = f"127.0.0.1:{registry.address[1]}"
    services = []
    try:
        import fedsim

        for cid in ("c00", "c01"):
            handle = fedsim.init({"mode": "remote", "dataset": str(data_dir)})
            services.append(
                fedsim.start_client(
                    handle,
                    fedsim.ClientArgs(
                        listen_addr="127.0.0.1:0", registry_addr=reg,
                        client_id=cid, shard_path=str(data_dir),
                    ),
                )
            )
        code, out, _ = run_cli(
            capsys, "server", "--registry", reg, "--rounds", "1",
            "--clients-per-round", "2", "--dataset", str(data_dir),
            "--tracking-dir", str(tmp_path / "runs"), "--stop-clients",
        )
        assert code == 0
        assert json.loads(out.strip())["rounds"] == 1
        for service in services:
            assert service.wait(timeout=5.0)
    finally:
        registry.stop()
        for service in services:
            service.stop()
