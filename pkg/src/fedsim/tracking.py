"""Three-level metrics tracking: task -> round -> client.

Each task owns a directory ``<root>/<task_id>/`` holding ``task.json`` plus
append-only ``rounds.jsonl`` and ``clients.jsonl`` (one JSON object per
line). Records are flushed as they are written so a crashed run keeps every
completed round. Parent integrity is enforced on write: a round needs its
task, a client record needs its round.

The remote sink is a small socket service that accepts METRICS frames and
feeds them into the same store, so remote runs produce byte-compatible
tracking directories.
"""

from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

from . import protocol
from .errors import OrphanRecordError, ProtocolError, StorageError, TaskNotFoundError

log = logging.getLogger(__name__)

LEVELS = ("task", "round", "client")


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class TaskMetrics:
    task_id: str
    config: dict
    start_ms: int
    end_ms: int | None = None
    t_total: float | None = None
    t_round: float | None = None
    final_accuracy: float | None = None
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundMetrics:
    task_id: str
    round_index: int
    selected: list[str]
    wall_time: float
    sim_time: float
    upload_bytes: int
    download_bytes: int
    accuracy: float | None = None
    loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClientMetrics:
    task_id: str
    round_index: int
    client_id: str
    train_loss: float
    num_samples: int
    sim_time: float
    upload_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsStore:
    """Append-only local store, one directory per task."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._known_rounds: dict[str, set[int]] = {}

    def _task_dir(self, task_id: str) -> Path:
        return self.root / task_id

    def _require_task(self, task_id: str) -> Path:
        d = self._task_dir(task_id)
        if not (d / "task.json").exists():
            raise TaskNotFoundError(f"unknown task: {task_id}")
        return d

    def create_task(self, task_id: str, config: dict, start_ms: int | None = None) -> TaskMetrics:
        d = self._task_dir(task_id)
        try:
            d.mkdir(parents=True, exist_ok=True)
            task = TaskMetrics(task_id=task_id, config=config,
                               start_ms=now_ms() if start_ms is None else start_ms)
            (d / "task.json").write_text(
                json.dumps(task.to_dict(), sort_keys=True) + "\n", encoding="utf-8"
            )
        except OSError as exc:
            raise StorageError(f"cannot create task directory: {exc}") from exc
        return task

    def finalize_task(
        self,
        task_id: str,
        t_total: float,
        rounds: int,
        final_accuracy: float | None,
        end_ms: int | None = None,
    ) -> TaskMetrics:
        d = self._require_task(task_id)
        task = TaskMetrics(**json.loads((d / "task.json").read_text(encoding="utf-8")))
        task.end_ms = now_ms() if end_ms is None else end_ms
        task.t_total = t_total
        task.t_round = t_total / rounds
        task.final_accuracy = final_accuracy
        task.status = "finished"
        (d / "task.json").write_text(
            json.dumps(task.to_dict(), sort_keys=True) + "\n", encoding="utf-8"
        )
        return task

    def _append(self, path: Path, record: dict) -> None:
        try:
            with self._lock, open(path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
                f.flush()
        except OSError as exc:
            raise StorageError(f"cannot append to {path}: {exc}") from exc

    def _rounds_of(self, task_id: str) -> set[int]:
        cached = self._known_rounds.get(task_id)
        if cached is None:
            cached = {
                rec["round_index"]
                for rec in self._read_jsonl(self._task_dir(task_id) / "rounds.jsonl")
            }
            self._known_rounds[task_id] = cached
        return cached

    def record_round(self, metrics: RoundMetrics) -> None:
        d = self._require_task(metrics.task_id)
        if metrics.round_index in self._rounds_of(metrics.task_id):
            raise ValueError(
                f"round {metrics.round_index} already recorded for task {metrics.task_id}"
            )
        self._append(d / "rounds.jsonl", metrics.to_dict())
        self._rounds_of(metrics.task_id).add(metrics.round_index)

    def record_client(self, metrics: ClientMetrics) -> None:
        d = self._require_task(metrics.task_id)
        if metrics.round_index not in self._rounds_of(metrics.task_id):
            raise OrphanRecordError(
                f"client record for round {metrics.round_index} precedes its round record"
            )
        self._append(d / "clients.jsonl", metrics.to_dict())

    @staticmethod
    def _read_jsonl(path: Path) -> list[dict]:
        if not path.exists():
            return []
        out = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out

    def query(
        self, task_id: str, level: str, predicate: Callable[[dict], bool] | None = None
    ) -> list[dict]:
        """Records of one level in insertion order, optionally filtered."""
        if level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        d = self._require_task(task_id)
        if level == "task":
            records = [json.loads((d / "task.json").read_text(encoding="utf-8"))]
        elif level == "round":
            records = self._read_jsonl(d / "rounds.jsonl")
        else:
            records = self._read_jsonl(d / "clients.jsonl")
        if predicate is not None:
            records = [r for r in records if predicate(r)]
        return records

    def task_ids(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if (p / "task.json").exists()
        )


# --- remote sink ---

def _record_from_metrics_message(store: MetricsStore, msg: protocol.Metrics) -> None:
    try:
        body = json.loads(msg.body)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"metrics body is not valid JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise ProtocolError("metrics body must be a JSON object")
    try:
        if msg.level == protocol.METRICS_TASK:
            if body.get("status") == "finished":
                store.finalize_task(
                    body["task_id"],
                    t_total=body["t_total"],
                    rounds=body["rounds"],
                    final_accuracy=body.get("final_accuracy"),
                    end_ms=body.get("end_ms"),
                )
            else:
                store.create_task(body["task_id"], body.get("config", {}), body.get("start_ms"))
        elif msg.level == protocol.METRICS_ROUND:
            store.record_round(RoundMetrics(**body))
        else:
            store.record_client(ClientMetrics(**body))
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"metrics body has wrong fields: {exc}") from exc


class _SinkHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        store: MetricsStore = self.server.store  # type: ignore[attr-defined]
        while True:
            try:
                msg = protocol.read_frame(self.request)
            except ProtocolError as exc:
                try:  # reply to malformed frames when the socket still works
                    protocol.write_frame(
                        self.request, protocol.Error(protocol.ERR_PROTOCOL, str(exc))
                    )
                except OSError:
                    pass
                return
            try:
                if isinstance(msg, protocol.Metrics):
                    _record_from_metrics_message(store, msg)
                    protocol.write_frame(self.request, protocol.Ack())
                elif isinstance(msg, protocol.Stop):
                    protocol.write_frame(self.request, protocol.Ack())
                    return
                else:
                    protocol.write_frame(
                        self.request,
                        protocol.Error(protocol.ERR_PROTOCOL, "metrics sink expects METRICS"),
                    )
            except (ProtocolError, OrphanRecordError, TaskNotFoundError) as exc:
                try:
                    protocol.write_frame(
                        self.request, protocol.Error(protocol.ERR_PROTOCOL, str(exc))
                    )
                except OSError:
                    return


class MetricsSink(socketserver.ThreadingTCPServer):
    """Socket service that records METRICS frames into a local store."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr: tuple[str, int], store: MetricsStore) -> None:
        super().__init__(addr, _SinkHandler)
        self.store = store

    def handle_error(self, request, client_address) -> None:
        exc = sys.exc_info()[1]
        if isinstance(exc, ConnectionError):
            return
        log.warning("metrics sink error from %s: %s", client_address, exc)

    @property
    def address(self) -> tuple[str, int]:
        return self.socket.getsockname()

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
