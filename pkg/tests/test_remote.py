from __future__ import annotations

import socket
import threading
import time

import numpy as np
import pytest

from fedsim import api, flow, protocol, tracking
from fedsim.config import Config, PartitionSpec, SyntheticSpec
from fedsim.data import partition, save_dataset, synthetic_pool
from fedsim.errors import QuorumLostError, RegistryUnreachableError
from fedsim.models import ModelSpec, TrainSpec, evaluate, init_params
from fedsim.remote import (
    RegistryClient,
    RegistryServer,
    RemoteEnvironment,
    format_addr,
    parse_addr,
    serve_client,
    wait_for_clients,
)


@pytest.fixture()
def registry():
    server = RegistryServer(("127.0.0.1", 0))
    server.start()
    yield server
    server.stop()


@pytest.fixture()
def dataset_dir(tmp_path):
    pool = synthetic_pool(SyntheticSpec(total_samples=200), seed=11)
    fd = partition(pool, PartitionSpec(scheme="iid", num_clients=2, seed=3))
    path = tmp_path / "data"
    save_dataset(fd, path)
    return path, fd


def _client(registry, dataset_dir, cid, **kwargs):
    path, _ = dataset_dir
    return serve_client(
        ("127.0.0.1", 0), registry.address, cid, str(path), **kwargs
    )


# --- registry semantics ---

def test_register_then_list(registry):
    client = RegistryClient(registry.address)
    client.register("c1", "127.0.0.1:9001", ttl_s=30)
    assert client.list_clients() == {"c1": "127.0.0.1:9001"}


def test_expired_entries_are_excluded(registry):
    client = RegistryClient(registry.address)
    client.register("c1", "127.0.0.1:9001", ttl_s=1)
    assert "c1" in client.list_clients()
    time.sleep(1.2)
    assert client.list_clients() == {}


def test_heartbeat_renews():
    server = RegistryServer(("127.0.0.1", 0), default_ttl_s=1)
    server.start()
    try:
        client = RegistryClient(server.address)
        client.register("c1", "127.0.0.1:9001", ttl_s=1)
        for _ in range(3):
            time.sleep(0.5)
            client.heartbeat("c1")
        assert "c1" in client.list_clients()
    finally:
        server.stop()


def test_reregister_upserts_latest_address(registry):
    client = RegistryClient(registry.address)
    client.register("c1", "127.0.0.1:9001", ttl_s=30)
    client.register("c1", "127.0.0.1:9500", ttl_s=30)
    assert client.list_clients() == {"c1": "127.0.0.1:9500"}


def test_deregister_via_zero_ttl(registry):
    client = RegistryClient(registry.address)
    client.register("c1", "127.0.0.1:9001", ttl_s=30)
    client.deregister("c1", "127.0.0.1:9001")
    assert client.list_clients() == {}


def test_heartbeat_for_unknown_client_errors(registry):
    with socket.create_connection(registry.address, timeout=5) as sock:
        protocol.write_frame(sock, protocol.Heartbeat("ghost"))
        reply = protocol.read_frame(sock)
    assert isinstance(reply, protocol.Error)


def test_unknown_message_type_gets_error_reply(registry):
    frame = protocol.HEADER.pack(protocol.MAGIC, protocol.VERSION, 13, 0)
    with socket.create_connection(registry.address, timeout=5) as sock:
        sock.sendall(frame)
        reply = protocol.read_frame(sock)
    assert isinstance(reply, protocol.Error)
    assert reply.code == protocol.ERR_PROTOCOL


def test_registry_unreachable_after_bounded_retries(tmp_path, dataset_dir):
    path, _ = dataset_dir
    dead = ("127.0.0.1", 1)  # nothing listens there
    t0 = time.perf_counter()
    with pytest.raises(RegistryUnreachableError):
        serve_client(
            ("127.0.0.1", 0), dead, "c00", str(path),
            registry_attempts=2, registry_delay_s=0.05,
        )
    assert time.perf_counter() - t0 < 5.0


def test_wait_for_clients_times_out(registry):
    client = RegistryClient(registry.address)
    with pytest.raises(QuorumLostError):
        wait_for_clients(client, required=1, deadline_s=0.4, poll_interval_s=0.1)


# --- client service ---

def test_client_registers_and_serves_test_requests(registry, dataset_dir):
    path, fd = dataset_dir
    service = _client(registry, dataset_dir, "c00")
    try:
        listing = RegistryClient(registry.address).list_clients()
        assert "c00" in listing

        model = ModelSpec(kind="logreg", feature_dim=2, num_classes=2)
        params = init_params(model, seed=5)
        encoded = flow.encode_update(flow.compress(params, flow.CompressionSpec()))
        with socket.create_connection(parse_addr(listing["c00"]), timeout=5) as sock:
            protocol.write_frame(sock, protocol.TestRequest("t", 0, encoded))
            reply = protocol.read_frame(sock)
        assert isinstance(reply, protocol.TestResult)
        expected_loss, expected_acc = evaluate(model, params, fd.clients["c00"].test)
        assert reply.accuracy == pytest.approx(expected_acc)
        assert reply.loss == pytest.approx(expected_loss)
        assert reply.num_samples == len(fd.clients["c00"].test)
    finally:
        service.stop()


def test_concurrent_train_request_gets_busy_error(registry, dataset_dir):
    release = threading.Event()

    def slow_train(params, shard, model, spec):
        release.wait(5.0)
        return flow.default_train(params, shard, model, spec)

    service = _client(registry, dataset_dir, "c00", stage_overrides={"train": slow_train})
    try:
        model = ModelSpec(kind="logreg", feature_dim=2, num_classes=2)
        params = init_params(model, seed=5)
        hyper = protocol.dumps_json(
            {
                "model": model.to_dict(),
                "train": TrainSpec(1, 32, 0.1, 0.9, 7).to_dict(),
                "compression": {"kind": "identity", "ratio": 1.0},
            }
        )
        request = protocol.TrainRequest(
            "t", 0, hyper, flow.encode_update(flow.compress(params, flow.CompressionSpec()))
        )
        replies = {}

        def call(tag):
            with socket.create_connection(service.address, timeout=10) as sock:
                protocol.write_frame(sock, request)
                replies[tag] = protocol.read_frame(sock)

        first = threading.Thread(target=call, args=("first",))
        first.start()
        time.sleep(0.2)  # let the first request take the busy lock
        call("second")
        release.set()
        first.join(timeout=10)
        assert isinstance(replies["second"], protocol.Error)
        assert replies["second"].code == protocol.ERR_BUSY
        assert isinstance(replies["first"], protocol.TrainResult)
    finally:
        service.stop()


def test_stop_deregisters_and_exits(registry, dataset_dir):
    service = _client(registry, dataset_dir, "c00")
    listing = RegistryClient(registry.address).list_clients()
    with socket.create_connection(parse_addr(listing["c00"]), timeout=5) as sock:
        protocol.write_frame(sock, protocol.Stop())
        assert isinstance(protocol.read_frame(sock), protocol.Ack)
    assert service.wait(timeout=5.0)
    deadline = time.monotonic() + 5.0
    while time.monotonic() < deadline:
        if RegistryClient(registry.address).list_clients() == {}:
            break
        time.sleep(0.05)
    assert RegistryClient(registry.address).list_clients() == {}


def test_unknown_client_id_rejected(registry, dataset_dir):
    path, _ = dataset_dir
    from fedsim.errors import FedsimError

    with pytest.raises(FedsimError):
        serve_client(("127.0.0.1", 0), registry.address, "c9", str(path))


# --- server drive ---

def _remote_config(tmp_path, data_dir, rounds=2):
    return Config.from_dict(
        {
            "seed": 42,
            "rounds": rounds,
            "clients_per_round": 2,
            "dataset": str(data_dir),
            "mode": "remote",
            "tracking_dir": str(tmp_path / "remote_runs"),
        }
    )


def test_loopback_matches_standalone(registry, dataset_dir, tmp_path):
    path, _ = dataset_dir
    standalone_cfg = Config.from_dict(
        {
            "seed": 42,
            "rounds": 2,
            "clients_per_round": 2,
            "dataset": str(path),
            "tracking_dir": str(tmp_path / "standalone_runs"),
        }
    )
    local_report = api.run(api.init(standalone_cfg))

    services = [_client(registry, dataset_dir, cid) for cid in ("c00", "c01")]
    try:
        handle = api.init(_remote_config(tmp_path, path))
        remote_report = api.start_server(
            handle,
            api.ServerArgs(registry_addr=format_addr(registry.address), poll_deadline_s=10),
        )
    finally:
        for service in services:
            service.stop()

    assert np.array_equal(local_report.params.values, remote_report.params.values)
    local_store = tracking.MetricsStore(tmp_path / "standalone_runs")
    remote_store = tracking.MetricsStore(tmp_path / "remote_runs")
    for level in ("task", "round", "client"):
        assert len(local_store.query(local_report.task_id, level)) == len(
            remote_store.query(remote_report.task_id, level)
        )


def test_dead_client_dropped_with_quorum_one(registry, dataset_dir, tmp_path):
    path, _ = dataset_dir
    alive = _client(registry, dataset_dir, "c00")
    dead = _client(registry, dataset_dir, "c01")
    # kill the socket without deregistering: still listed, but unreachable
    dead.shutdown()
    dead.server_close()
    try:
        handle = api.init(_remote_config(tmp_path, path, rounds=1))
        report = api.start_server(
            handle,
            api.ServerArgs(
                registry_addr=format_addr(registry.address),
                min_clients=1,
                client_timeout_s=5.0,
                poll_deadline_s=10,
            ),
        )
        store = tracking.MetricsStore(tmp_path / "remote_runs")
        clients = store.query(report.task_id, "client")
        assert len(clients) == 1
        assert clients[0]["client_id"] == "c00"
    finally:
        alive.stop()


def test_all_clients_dead_loses_quorum(registry, dataset_dir, tmp_path):
    path, _ = dataset_dir
    for cid in ("c00", "c01"):
        service = _client(registry, dataset_dir, cid)
        service.shutdown()
        service.server_close()
    handle = api.init(_remote_config(tmp_path, path, rounds=1))
    with pytest.raises(QuorumLostError):
        api.start_server(
            handle,
            api.ServerArgs(
                registry_addr=format_addr(registry.address),
                min_clients=1,
                client_timeout_s=3.0,
                poll_deadline_s=10,
            ),
        )


def test_remote_environment_evaluate_weighted_mean(registry, dataset_dir):
    path, fd = dataset_dir
    services = [_client(registry, dataset_dir, cid) for cid in ("c00", "c01")]
    try:
        listing = RegistryClient(registry.address).list_clients()
        model = ModelSpec(kind="logreg", feature_dim=2, num_classes=2)
        env = RemoteEnvironment(listing, model, flow.CompressionSpec(), client_timeout_s=5.0)
        params = init_params(model, seed=5)
        got = env.evaluate_global(params)
        union = fd.clients["c00"].test + fd.clients["c01"].test
        want_loss, want_acc = evaluate(model, params, union)
        assert got is not None
        assert got[0] == pytest.approx(want_loss)
        assert got[1] == pytest.approx(want_acc)
    finally:
        for service in services:
            service.stop()
