"""Remote training services: registry discovery, client service, server driver.

Topology: clients register themselves (id + listen address + TTL) with a
registry and renew via heartbeats; the training server polls the registry,
then drives rounds by fanning TRAIN_REQUEST frames out to the listed clients
and collecting TRAIN_RESULTs behind a per-round completion barrier. A client
deregisters by re-registering with ttl_s=0.

Clients execute requests through the same client stage pipeline used by
standalone runs, so a loopback remote run reproduces the standalone final
model bit for bit.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import socket
import socketserver
import sys
import threading
import time
from dataclasses import dataclass

from . import flow, protocol
from .data import ClientShard, load_dataset
from .errors import (
    BusyError,
    FedsimError,
    ProtocolError,
    QuorumLostError,
    RegistryUnreachableError,
    TruncatedFrameError,
    WorkerFailureError,
)
from .models import ModelSpec, TrainSpec

log = logging.getLogger(__name__)

DEFAULT_TTL_S = 30
CONNECT_TIMEOUT_S = 5.0


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def _request(addr: tuple[str, int], msg: protocol.Message, timeout: float) -> protocol.Message:
    """One request/response exchange on a fresh connection."""
    with socket.create_connection(addr, timeout=timeout) as sock:
        sock.settimeout(timeout)
        protocol.write_frame(sock, msg)
        return protocol.read_frame(sock)


# --- registry ---

def _read_or_reject(sock: socket.socket) -> protocol.Message | None:
    """Read one frame; on a malformed frame send an ERROR reply and give up.

    Returns None when the connection should be dropped (clean EOF, dead
    socket, or a frame bad enough that stream framing cannot be trusted).
    """
    try:
        return protocol.read_frame(sock)
    except TruncatedFrameError:
        return None  # peer closed or died mid-frame; nothing to reply to
    except ProtocolError as exc:
        try:
            protocol.write_frame(sock, protocol.Error(protocol.ERR_PROTOCOL, str(exc)))
        except OSError:
            pass
        return None


class _RegistryHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: RegistryServer = self.server  # type: ignore[assignment]
        while True:
            msg = _read_or_reject(self.request)
            if msg is None:
                return
            try:
                reply = server.dispatch(msg)
                protocol.write_frame(self.request, reply)
                if isinstance(msg, protocol.Stop):
                    threading.Thread(target=server.stop, daemon=True).start()
                    return
            except OSError:
                return


class _QuietServer(socketserver.ThreadingTCPServer):
    """ThreadingTCPServer that logs handler crashes instead of printing them."""

    allow_reuse_address = True
    daemon_threads = True

    def handle_error(self, request, client_address) -> None:
        exc = sys.exc_info()[1]
        if isinstance(exc, (ConnectionError, TruncatedFrameError)):
            return  # peers vanishing mid-conversation is routine
        log.warning("error handling request from %s: %s", client_address, exc)


class RegistryServer(_QuietServer):
    """Service-discovery table: client_id -> (address, expiry)."""

    def __init__(self, addr: tuple[str, int], default_ttl_s: int = DEFAULT_TTL_S) -> None:
        super().__init__(addr, _RegistryHandler)
        self.default_ttl_s = default_ttl_s
        self._table: dict[str, tuple[str, float]] = {}
        self._table_lock = threading.Lock()

    @property
    def address(self) -> tuple[str, int]:
        return self.socket.getsockname()

    def dispatch(self, msg: protocol.Message) -> protocol.Message:
        if isinstance(msg, protocol.Register):
            ttl = msg.ttl_s if msg.ttl_s > 0 else 0
            with self._table_lock:
                if ttl == 0:
                    self._table.pop(msg.client_id, None)
                else:
                    self._table[msg.client_id] = (msg.listen_addr, time.monotonic() + ttl)
            return protocol.Ack()
        if isinstance(msg, protocol.Heartbeat):
            with self._table_lock:
                entry = self._table.get(msg.client_id)
                if entry is None:
                    return protocol.Error(protocol.ERR_PROTOCOL, "unknown client; re-register")
                addr, _ = entry
                self._table[msg.client_id] = (addr, time.monotonic() + self.default_ttl_s)
            return protocol.Ack()
        if isinstance(msg, protocol.ListClients):
            now = time.monotonic()
            with self._table_lock:
                expired = [cid for cid, (_, exp) in self._table.items() if exp <= now]
                for cid in expired:
                    del self._table[cid]
                entries = tuple(
                    (cid, addr) for cid, (addr, _) in sorted(self._table.items())
                )
            return protocol.ClientList(entries=entries)
        if isinstance(msg, protocol.Stop):
            return protocol.Ack()
        return protocol.Error(protocol.ERR_PROTOCOL, f"unexpected message: {type(msg).__name__}")

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class RegistryClient:
    """Thin per-call connection helper for talking to a registry."""

    def __init__(self, addr: tuple[str, int], timeout: float = CONNECT_TIMEOUT_S) -> None:
        self.addr = addr
        self.timeout = timeout

    def _call(self, msg: protocol.Message) -> protocol.Message:
        try:
            return _request(self.addr, msg, self.timeout)
        except (OSError, ProtocolError) as exc:
            raise RegistryUnreachableError(f"registry at {format_addr(self.addr)}: {exc}") from exc

    def register(self, client_id: str, listen_addr: str, ttl_s: int = DEFAULT_TTL_S) -> None:
        reply = self._call(protocol.Register(client_id, listen_addr, ttl_s))
        if isinstance(reply, protocol.Error):
            raise RegistryUnreachableError(f"registry rejected register: {reply.detail}")

    def deregister(self, client_id: str, listen_addr: str) -> None:
        self._call(protocol.Register(client_id, listen_addr, 0))

    def heartbeat(self, client_id: str) -> None:
        self._call(protocol.Heartbeat(client_id))

    def list_clients(self) -> dict[str, str]:
        reply = self._call(protocol.ListClients())
        if not isinstance(reply, protocol.ClientList):
            raise ProtocolError(f"expected CLIENT_LIST, got {type(reply).__name__}")
        return dict(reply.entries)

    def stop(self) -> None:
        self._call(protocol.Stop())


def register_with_retries(
    registry: RegistryClient,
    client_id: str,
    listen_addr: str,
    ttl_s: int,
    attempts: int = 5,
    delay_s: float = 0.5,
) -> None:
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            registry.register(client_id, listen_addr, ttl_s)
            return
        except RegistryUnreachableError as exc:
            last = exc
            if attempt < attempts - 1:
                time.sleep(delay_s)
    raise RegistryUnreachableError(
        f"gave up registering {client_id} after {attempts} attempts: {last}"
    )


# --- client service ---

class _ClientHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        service: ClientService = self.server  # type: ignore[assignment]
        while True:
            msg = _read_or_reject(self.request)
            if msg is None:
                return
            try:
                reply = service.dispatch(msg)
                protocol.write_frame(self.request, reply)
                if isinstance(msg, protocol.Stop):
                    threading.Thread(target=service.stop, daemon=True).start()
                    return
            except OSError:
                return


class ClientService(_QuietServer):
    """Serves TRAIN/TEST requests over one client's data shard."""

    def __init__(
        self,
        listen: tuple[str, int],
        registry_addr: tuple[str, int],
        client_id: str,
        shard: ClientShard,
        stage_overrides: dict | None = None,
        ttl_s: int = DEFAULT_TTL_S,
        registry_attempts: int = 5,
        registry_delay_s: float = 0.5,
    ) -> None:
        super().__init__(listen, _ClientHandler)
        self.client_id = client_id
        self.shard = shard
        self.stage_overrides = stage_overrides
        self.ttl_s = ttl_s
        self.registry = RegistryClient(registry_addr)
        self.registry_attempts = registry_attempts
        self.registry_delay_s = registry_delay_s
        self._busy = threading.Lock()
        self._stopped = threading.Event()
        self._heartbeat_thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.socket.getsockname()

    def start(self) -> threading.Thread:
        """Register, start heartbeats, and serve in a background thread."""
        try:
            register_with_retries(
                self.registry,
                self.client_id,
                format_addr(self.address),
                self.ttl_s,
                attempts=self.registry_attempts,
                delay_s=self.registry_delay_s,
            )
        except RegistryUnreachableError:
            self.server_close()  # free the listen socket before giving up
            raise
        self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, daemon=True)
        self._heartbeat_thread.start()
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        log.info("client %s serving on %s", self.client_id, format_addr(self.address))
        return thread

    def _heartbeat_loop(self) -> None:
        interval = max(self.ttl_s / 3.0, 0.1)
        while not self._stopped.wait(interval):
            try:
                self.registry.heartbeat(self.client_id)
            except RegistryUnreachableError as exc:
                log.warning("client %s heartbeat failed: %s", self.client_id, exc)

    def dispatch(self, msg: protocol.Message) -> protocol.Message:
        if isinstance(msg, protocol.TrainRequest):
            if not self._busy.acquire(blocking=False):
                return protocol.Error(protocol.ERR_BUSY, "training already in progress")
            try:
                return self._handle_train(msg)
            finally:
                self._busy.release()
        if isinstance(msg, protocol.TestRequest):
            return self._handle_test(msg)
        if isinstance(msg, protocol.Stop):
            return protocol.Ack()
        return protocol.Error(protocol.ERR_PROTOCOL, f"unexpected message: {type(msg).__name__}")

    def _handle_train(self, msg: protocol.TrainRequest) -> protocol.Message:
        try:
            hyper = _parse_hyperparams(msg.hyperparams)
            payload = flow.decode_update(msg.update)
            stages = flow.build_client_stages(hyper.compression, self.stage_overrides)
            update, num_samples, loss = flow.run_client_pipeline(
                stages, payload, self.shard.train, hyper.model, hyper.train
            )
        except ProtocolError as exc:
            return protocol.Error(protocol.ERR_PROTOCOL, str(exc))
        except (FedsimError, ValueError, KeyError) as exc:
            return protocol.Error(protocol.ERR_INTERNAL, f"{type(exc).__name__}: {exc}")
        return protocol.TrainResult(
            client_id=self.client_id,
            round_index=msg.round_index,
            num_samples=num_samples,
            train_loss=loss,
            update=flow.encode_update(update),
        )

    def _handle_test(self, msg: protocol.TestRequest) -> protocol.Message:
        try:
            hyper_model = _model_from_params(msg.params)
            if not self.shard.test:
                return protocol.TestResult(loss=0.0, accuracy=0.0, num_samples=0)
            stages = flow.build_client_stages(flow.CompressionSpec(), self.stage_overrides)
            params = flow.decompress(flow.decode_update(msg.params))
            loss, accuracy, n = stages.test(params, self.shard.test, hyper_model)
        except ProtocolError as exc:
            return protocol.Error(protocol.ERR_PROTOCOL, str(exc))
        except (FedsimError, ValueError, KeyError) as exc:
            return protocol.Error(protocol.ERR_INTERNAL, f"{type(exc).__name__}: {exc}")
        return protocol.TestResult(loss=loss, accuracy=accuracy, num_samples=n)

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the service is stopped (by STOP frame or stop())."""
        return self._stopped.wait(timeout)

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        try:
            self.registry.deregister(self.client_id, format_addr(self.address))
        except RegistryUnreachableError:
            pass
        self.shutdown()
        self.server_close()


@dataclass(frozen=True)
class _Hyperparams:
    model: ModelSpec
    train: TrainSpec
    compression: flow.CompressionSpec


def _parse_hyperparams(text: str) -> _Hyperparams:
    try:
        raw = json.loads(text)
        return _Hyperparams(
            model=ModelSpec.from_dict(raw["model"]),
            train=TrainSpec.from_dict(raw["train"]),
            compression=flow.CompressionSpec(
                kind=raw["compression"]["kind"], ratio=raw["compression"]["ratio"]
            ),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad hyperparams payload: {exc}") from exc


def _model_from_params(update_bytes: bytes) -> ModelSpec:
    """Recover the model spec from a parameter layout."""
    pv = flow.decompress(flow.decode_update(update_bytes))
    names = [name for name, _ in pv.layout]
    shapes = dict(pv.layout)
    if names == ["W", "b"]:
        c, d = shapes["W"]
        return ModelSpec(kind="logreg", feature_dim=d, num_classes=c)
    if names == ["W1", "b1", "W2", "b2"]:
        h, d = shapes["W1"]
        c, _ = shapes["W2"]
        return ModelSpec(kind="mlp", feature_dim=d, num_classes=c, hidden_dim=h)
    raise ProtocolError(f"unrecognized parameter layout: {names}")


def serve_client(
    listen: tuple[str, int],
    registry_addr: tuple[str, int],
    client_id: str,
    dataset_path: str,
    stage_overrides: dict | None = None,
    ttl_s: int = DEFAULT_TTL_S,
    registry_attempts: int = 5,
    registry_delay_s: float = 0.5,
) -> ClientService:
    """Load one client's shard from a dataset directory and start serving."""
    dataset = load_dataset(dataset_path)
    if client_id not in dataset.clients:
        raise FedsimError(
            f"client {client_id!r} not present in dataset at {dataset_path} "
            f"(has: {sorted(dataset.clients)})"
        )
    service = ClientService(
        listen,
        registry_addr,
        client_id,
        dataset.clients[client_id],
        stage_overrides=stage_overrides,
        ttl_s=ttl_s,
        registry_attempts=registry_attempts,
        registry_delay_s=registry_delay_s,
    )
    service.start()
    return service


# --- remote execution environment (server side) ---

class RemoteEnvironment:
    """Executes the client half of each round over the wire protocol."""

    simulated_clock = False

    def __init__(
        self,
        clients: dict[str, str],
        model: ModelSpec,
        compression: flow.CompressionSpec,
        client_timeout_s: float = 300.0,
        min_clients: int = 1,
    ) -> None:
        self.clients = dict(clients)
        self.model = model
        self.compression = compression
        self.client_timeout_s = client_timeout_s
        self.min_clients = min_clients
        self.task_id = "unassigned"

    def client_ids(self) -> list[str]:
        return sorted(self.clients)

    def _hyperparams_json(self, spec: TrainSpec) -> str:
        return protocol.dumps_json(
            {
                "model": self.model.to_dict(),
                "train": spec.to_dict(),
                "compression": {"kind": self.compression.kind, "ratio": self.compression.ratio},
            }
        )

    def _train_one(self, round_index: int, item: flow.TrainWorkItem) -> flow.TrainWorkResult:
        addr = parse_addr(self.clients[item.client_id])
        request = protocol.TrainRequest(
            task_id=self.task_id,
            round_index=round_index,
            hyperparams=self._hyperparams_json(item.train_spec),
            update=flow.encode_update(item.payload),
        )
        t0 = time.perf_counter()
        reply = _request(addr, request, self.client_timeout_s)
        elapsed = time.perf_counter() - t0
        if isinstance(reply, protocol.Error):
            if reply.code == protocol.ERR_BUSY:
                raise BusyError(f"client {item.client_id} is busy: {reply.detail}")
            raise WorkerFailureError(
                f"client {item.client_id} error {reply.code}: {reply.detail}"
            )
        if not isinstance(reply, protocol.TrainResult):
            raise ProtocolError(f"expected TRAIN_RESULT, got {type(reply).__name__}")
        return flow.TrainWorkResult(
            client_id=item.client_id,
            update=flow.decode_update(reply.update),
            num_samples=reply.num_samples,
            train_loss=reply.train_loss,
            wall_seconds=elapsed,
            upload_bytes=len(reply.update),
        )

    def execute(
        self, round_index: int, items: list[flow.TrainWorkItem]
    ) -> list[flow.TrainWorkResult]:
        results: list[flow.TrainWorkResult] = []
        with concurrent.futures.ThreadPoolExecutor(max_workers=max(len(items), 1)) as pool:
            futures = {
                pool.submit(self._train_one, round_index, item): item.client_id
                for item in items
            }
            for future in concurrent.futures.as_completed(futures):
                cid = futures[future]
                try:
                    results.append(future.result())
                except (FedsimError, OSError) as exc:
                    log.warning("dropping client %s from round %d: %s", cid, round_index, exc)
        if len(results) < self.min_clients:
            raise QuorumLostError(
                f"round {round_index}: {len(results)} of {len(items)} clients completed, "
                f"need at least {self.min_clients}"
            )
        return results

    def evaluate_global(self, params) -> tuple[float, float] | None:
        encoded = flow.encode_update(
            flow.CompressedUpdate(
                codec="identity", layout=params.layout, dense_len=len(params), values=params.values
            )
        )
        total_n = 0
        loss_sum = 0.0
        acc_sum = 0.0
        for cid in self.client_ids():
            addr = parse_addr(self.clients[cid])
            try:
                reply = _request(
                    addr,
                    protocol.TestRequest(task_id=self.task_id, round_index=0, params=encoded),
                    self.client_timeout_s,
                )
            except (OSError, ProtocolError) as exc:
                log.warning("skipping test on client %s: %s", cid, exc)
                continue
            if isinstance(reply, protocol.TestResult) and reply.num_samples > 0:
                total_n += reply.num_samples
                loss_sum += reply.loss * reply.num_samples
                acc_sum += reply.accuracy * reply.num_samples
        if total_n == 0:
            return None
        return loss_sum / total_n, acc_sum / total_n


def wait_for_clients(
    registry: RegistryClient,
    required: int,
    deadline_s: float = 60.0,
    poll_interval_s: float = 0.25,
) -> dict[str, str]:
    """Poll the registry until ``required`` clients are listed."""
    deadline = time.monotonic() + deadline_s
    last_error: Exception | None = None
    listing: dict[str, str] = {}
    while time.monotonic() < deadline:
        try:
            listing = registry.list_clients()
            last_error = None
            if len(listing) >= required:
                return listing
        except RegistryUnreachableError as exc:
            last_error = exc
        time.sleep(poll_interval_s)
    if last_error is not None:
        raise RegistryUnreachableError(f"registry never became reachable: {last_error}")
    raise QuorumLostError(
        f"only {len(listing)} of {required} required clients registered before the deadline"
    )


def stop_client(addr_text: str, timeout: float = CONNECT_TIMEOUT_S) -> None:
    try:
        _request(parse_addr(addr_text), protocol.Stop(), timeout)
    except (OSError, ProtocolError) as exc:
        log.warning("stop request to %s failed: %s", addr_text, exc)
