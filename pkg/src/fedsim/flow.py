"""The staged training flow: selection through aggregation, round by round.

Every round walks a fixed stage sequence. Server side: selection,
compression, distribution; client side: download, decompression, train (or
test), compression, encryption, upload; server side again: decompression,
aggregation. Each named stage is an override point; replacing one leaves
the rest untouched.

The round loop is transport-agnostic: an Environment supplies the client
ids, executes the client half of the pipeline (in-process for standalone
and distributed runs, over the wire protocol for remote runs), and
evaluates the global model. Client-to-worker allocation and adaptive
profiling run between rounds against the simulated clock.
"""

from __future__ import annotations

import logging
import math
import random
import struct
import time
import uuid
from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import hetero, models, scheduler, tracking
from .config import Config, derive_seed
from .data import FederatedDataset, Sample
from .errors import LayoutMismatchError, ProtocolError
from .models import Layout, ModelSpec, ParamVector, TrainSpec

log = logging.getLogger(__name__)

SERVER_STAGES = ("selection", "compression", "distribution", "decompression", "aggregation")
CLIENT_STAGES = ("download", "decompression", "train", "test", "compression", "encryption", "upload")

CODEC_IDENTITY = 0
CODEC_TOPK = 1


@dataclass(frozen=True)
class CompressionSpec:
    kind: str = "identity"
    ratio: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "topk"):
            raise ValueError(f"unknown compression kind: {self.kind!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError("compression ratio must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class CompressedUpdate:
    """A parameter vector in transit, possibly sparsified."""

    codec: str
    layout: Layout
    dense_len: int
    values: np.ndarray
    indices: np.ndarray | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompressedUpdate):
            return NotImplemented
        if (self.codec, self.layout, self.dense_len) != (other.codec, other.layout, other.dense_len):
            return False
        if (self.indices is None) != (other.indices is None):
            return False
        if self.indices is not None and not np.array_equal(self.indices, other.indices):
            return False
        return np.array_equal(self.values, other.values)


def compress(pv: ParamVector, spec: CompressionSpec) -> CompressedUpdate:
    """Identity wrap or top-k magnitude sparsification (ties: lower index)."""
    if spec.kind == "identity":
        return CompressedUpdate(
            codec="identity", layout=pv.layout, dense_len=len(pv), values=pv.values
        )
    n = len(pv)
    k = math.ceil(spec.ratio * n)
    order = np.lexsort((np.arange(n), -np.abs(pv.values.astype(np.float64))))
    kept = np.sort(order[:k]).astype(np.uint32)
    return CompressedUpdate(
        codec="topk",
        layout=pv.layout,
        dense_len=n,
        values=pv.values[kept],
        indices=kept,
    )


def decompress(cu: CompressedUpdate) -> ParamVector:
    if cu.codec == "identity":
        return ParamVector(cu.values, cu.layout)
    dense = np.zeros(cu.dense_len, dtype=np.float32)
    dense[cu.indices] = cu.values
    return ParamVector(dense, cu.layout)


def encode_update(cu: CompressedUpdate) -> bytes:
    if cu.codec == "identity":
        return bytes([CODEC_IDENTITY]) + models.encode_params(ParamVector(cu.values, cu.layout))
    out = bytearray([CODEC_TOPK])
    out += models.encode_layout(cu.layout)
    out += struct.pack("<II", cu.dense_len, len(cu.values))
    out += cu.indices.astype("<u4").tobytes()
    out += cu.values.astype("<f4").tobytes()
    return bytes(out)


def decode_update(data: bytes) -> CompressedUpdate:
    if not data:
        raise ProtocolError("empty update encoding")
    codec = data[0]
    if codec == CODEC_IDENTITY:
        pv = models.decode_params(data[1:])
        return CompressedUpdate(
            codec="identity", layout=pv.layout, dense_len=len(pv), values=pv.values
        )
    if codec != CODEC_TOPK:
        raise ProtocolError(f"unknown update codec: {codec}")
    reader = models.ByteReader(data, offset=1)
    layout = models.decode_layout(reader)
    try:
        dense_len, k = struct.unpack("<II", reader.take(8))
        indices = np.frombuffer(reader.take(4 * k), dtype="<u4").copy()
        values = np.frombuffer(reader.take(4 * k), dtype="<f4").copy()
    except struct.error as exc:
        raise ProtocolError(f"bad top-k encoding: {exc}") from exc
    if reader.offset != len(data):
        raise ProtocolError("trailing bytes after top-k encoding")
    if len(indices) and (indices >= dense_len).any():
        raise ProtocolError("top-k index out of range")
    return CompressedUpdate(
        codec="topk", layout=layout, dense_len=dense_len, values=values, indices=indices
    )


def encoded_size(cu: CompressedUpdate) -> int:
    return len(encode_update(cu))


def select_clients(ids: Sequence[str], k: int, rng: random.Random) -> list[str]:
    """Uniform sample of k ids without replacement, driven by the given rng."""
    if not 1 <= k <= len(ids):
        raise ValueError(f"k={k} must be in [1, {len(ids)}]")
    return rng.sample(list(ids), k)


def aggregate(updates: list[tuple[ParamVector, float]]) -> ParamVector:
    """Sample-count-weighted mean, accumulated in f64, rounded to f32."""
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    layout = updates[0][0].layout
    total = np.zeros(len(updates[0][0]), dtype=np.float64)
    weight_sum = 0.0
    for pv, weight in updates:
        if pv.layout != layout:
            raise LayoutMismatchError("updates with different layouts cannot be aggregated")
        if weight <= 0:
            raise ValueError(f"update weight must be > 0, got {weight}")
        total += pv.values.astype(np.float64) * weight
        weight_sum += weight
    return ParamVector((total / weight_sum).astype(np.float32), layout)


def encrypt_identity(cu: CompressedUpdate) -> CompressedUpdate:
    return cu


def _passthrough(cu: CompressedUpdate) -> CompressedUpdate:
    return cu


@dataclass
class ServerStages:
    selection: Callable[[Sequence[str], int, random.Random], list[str]]
    compression: Callable[[ParamVector], CompressedUpdate]
    distribution: Callable[[CompressedUpdate, str], CompressedUpdate]
    decompression: Callable[[CompressedUpdate], ParamVector]
    aggregation: Callable[[list[tuple[ParamVector, float]]], ParamVector]


@dataclass
class ClientStages:
    download: Callable[[CompressedUpdate], CompressedUpdate]
    decompression: Callable[[CompressedUpdate], ParamVector]
    train: Callable[[ParamVector, list[Sample], ModelSpec, TrainSpec], tuple[ParamVector, float, int]]
    test: Callable[[ParamVector, list[Sample], ModelSpec], tuple[float, float, int]]
    compression: Callable[[ParamVector], CompressedUpdate]
    encryption: Callable[[CompressedUpdate], CompressedUpdate]
    upload: Callable[[CompressedUpdate], CompressedUpdate]


def default_train(
    params: ParamVector, shard: list[Sample], model: ModelSpec, spec: TrainSpec
) -> tuple[ParamVector, float, int]:
    return models.train_local(model, params, shard, spec)


def default_test(
    params: ParamVector, samples: list[Sample], model: ModelSpec
) -> tuple[float, float, int]:
    loss, accuracy = models.evaluate(model, params, samples)
    return loss, accuracy, len(samples)


def _apply_overrides(stages, names: tuple[str, ...], overrides: dict | None):
    if not overrides:
        return stages
    unknown = set(overrides) - set(names)
    if unknown:
        raise ValueError(f"unknown stage names: {sorted(unknown)} (valid: {list(names)})")
    return replace(stages, **overrides)


def build_server_stages(
    compression: CompressionSpec, overrides: dict | None = None
) -> ServerStages:
    defaults = ServerStages(
        selection=select_clients,
        compression=lambda pv: compress(pv, compression),
        distribution=lambda cu, client_id: cu,
        decompression=decompress,
        aggregation=aggregate,
    )
    return _apply_overrides(defaults, SERVER_STAGES, overrides)


def build_client_stages(
    compression: CompressionSpec, overrides: dict | None = None
) -> ClientStages:
    defaults = ClientStages(
        download=_passthrough,
        decompression=decompress,
        train=default_train,
        test=default_test,
        compression=lambda pv: compress(pv, compression),
        encryption=encrypt_identity,
        upload=_passthrough,
    )
    return _apply_overrides(defaults, CLIENT_STAGES, overrides)


@dataclass
class TrainWorkItem:
    client_id: str
    payload: CompressedUpdate
    train_spec: TrainSpec


@dataclass
class TrainWorkResult:
    client_id: str
    update: CompressedUpdate
    num_samples: int
    train_loss: float
    wall_seconds: float
    upload_bytes: int


def run_client_pipeline(
    stages: ClientStages,
    payload: CompressedUpdate,
    shard: list[Sample],
    model: ModelSpec,
    spec: TrainSpec,
) -> tuple[CompressedUpdate, int, float]:
    """Client half of a training round: download through upload."""
    received = stages.download(payload)
    params = stages.decompression(received)
    new_params, loss, num_samples = stages.train(params, shard, model, spec)
    update = stages.compression(new_params)
    update = stages.encryption(update)
    update = stages.upload(update)
    return update, num_samples, loss


class Environment(Protocol):
    """Client-execution backend the round loop drives."""

    simulated_clock: bool

    def client_ids(self) -> list[str]: ...

    def execute(self, round_index: int, items: list[TrainWorkItem]) -> list[TrainWorkResult]: ...

    def evaluate_global(self, params: ParamVector) -> tuple[float, float] | None: ...


class LocalEnvironment:
    """Runs the client pipeline in-process over a FederatedDataset."""

    simulated_clock = True

    def __init__(
        self, dataset: FederatedDataset, model: ModelSpec, stages: ClientStages
    ) -> None:
        self.dataset = dataset
        self.model = model
        self.stages = stages

    def client_ids(self) -> list[str]:
        return sorted(self.dataset.clients)

    def execute(self, round_index: int, items: list[TrainWorkItem]) -> list[TrainWorkResult]:
        results = []
        for item in items:
            shard = self.dataset.clients[item.client_id].train
            t0 = time.perf_counter()
            update, num_samples, loss = run_client_pipeline(
                self.stages, item.payload, shard, self.model, item.train_spec
            )
            results.append(
                TrainWorkResult(
                    client_id=item.client_id,
                    update=update,
                    num_samples=num_samples,
                    train_loss=loss,
                    wall_seconds=time.perf_counter() - t0,
                    upload_bytes=encoded_size(update),
                )
            )
        return results

    def evaluate_global(self, params: ParamVector) -> tuple[float, float] | None:
        test = self.dataset.global_test()
        if not test:
            return None
        return models.evaluate(self.model, params, test)


@dataclass
class RoundOutcome:
    round_index: int
    params: ParamVector
    selected: list[str]
    completed: list[str]
    sim_time: float
    wall_time: float
    accuracy: float | None
    loss: float | None


@dataclass
class TaskReport:
    task_id: str
    rounds: int
    final_accuracy: float | None
    final_loss: float | None
    accuracy_curve: list[tuple[int, float]]
    t_total: float
    t_round: float
    sim_total: float
    params: ParamVector
    tracking_dir: str

    def summary(self) -> dict:
        return {
            "task_id": self.task_id,
            "rounds": self.rounds,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "t_total": self.t_total,
            "t_round": self.t_round,
            "sim_total": self.sim_total,
            "tracking_dir": self.tracking_dir,
        }


class TaskRunner:
    """Drives R rounds of the staged flow against one environment."""

    def __init__(
        self,
        config: Config,
        model: ModelSpec,
        env: Environment,
        server_stages: ServerStages,
        store: tracking.MetricsStore,
        task_id: str | None = None,
    ) -> None:
        self.config = config
        self.model = model
        self.env = env
        self.server_stages = server_stages
        self.store = store
        self.task_id = task_id or str(uuid.uuid4())
        self.params = models.init_params(model, derive_seed(config.seed, "init"))
        self.select_rng = random.Random(derive_seed(config.seed, "select"))
        self.delay_rng = random.Random(derive_seed(config.seed, "delay"))
        ids = env.client_ids()
        if not ids:
            raise ValueError("environment has no clients")
        self.all_clients = ids
        self.k = config.resolve_clients_per_round(len(ids))
        self.profiles = hetero.assign_profiles(ids, config.hetero, config.hetero_seed())
        self.sched_state = scheduler.SchedulerState(
            default_time=config.scheduler_default_time,
            momentum=config.scheduler_momentum,
            profiles=self.profiles,
        )
        self.workers = config.workers if config.mode == "distributed" else 1
        self.sim_total = 0.0
        self.accuracy_curve: list[tuple[int, float]] = []
        self.last_eval: tuple[float, float] | None = None

    def _train_spec(self, round_index: int, client_id: str) -> TrainSpec:
        cfg = self.config
        return TrainSpec(
            epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            seed=derive_seed(cfg.seed, "train", round_index, client_id),
        )

    def _allocate(self, selected: list[str], round_index: int) -> scheduler.Allocation:
        profiles = [self.profiles[cid] for cid in selected]
        if self.config.scheduler == "greedyada":
            return scheduler.greedy_allocate(profiles, self.workers, self.sched_state)
        if self.config.scheduler == "random":
            rng = random.Random(derive_seed(self.config.seed, "alloc", round_index))
            return scheduler.baseline_allocate(profiles, self.workers, "random", rng)
        return scheduler.baseline_allocate(profiles, self.workers, "slowest")

    def run_round(self, round_index: int) -> RoundOutcome:
        cfg = self.config
        wall_start = time.perf_counter()
        selected = self.server_stages.selection(self.all_clients, self.k, self.select_rng)
        allocation = self._allocate(selected, round_index)

        payload = self.server_stages.compression(self.params)
        download_bytes = 0
        items = []
        for cid in sorted(selected):
            sent = self.server_stages.distribution(payload, cid)
            download_bytes += encoded_size(sent)
            items.append(TrainWorkItem(cid, sent, self._train_spec(round_index, cid)))

        results = self.env.execute(round_index, items)
        results.sort(key=lambda r: r.client_id)

        updates = [
            (self.server_stages.decompression(res.update), float(res.num_samples))
            for res in results
        ]
        new_params = self.server_stages.aggregation(updates)

        measured: dict[str, float] = {}
        for res in results:
            if self.env.simulated_clock:
                base = hetero.base_compute_time(res.num_samples, cfg.local_epochs, cfg.hetero)
                measured[res.client_id] = hetero.simulated_round_time(
                    base, self.profiles[res.client_id], cfg.hetero, self.delay_rng
                )
            else:
                measured[res.client_id] = res.wall_seconds
        wall_time = time.perf_counter() - wall_start
        if self.env.simulated_clock:
            sim_time = max(
                (sum(measured.get(cid, 0.0) for cid in group) for group in allocation.groups),
                default=0.0,
            )
        else:
            sim_time = wall_time
        scheduler.adaptive_profile(allocation, measured, self.sched_state)
        self.sim_total += sim_time

        evaluation = None
        if (round_index + 1) % cfg.eval_interval == 0 or round_index == cfg.rounds - 1:
            evaluation = self.env.evaluate_global(new_params)
            if evaluation is not None:
                self.last_eval = evaluation
                self.accuracy_curve.append((round_index, evaluation[1]))

        upload_bytes = sum(res.upload_bytes for res in results)
        self.store.record_round(
            tracking.RoundMetrics(
                task_id=self.task_id,
                round_index=round_index,
                selected=sorted(selected),
                wall_time=wall_time,
                sim_time=sim_time,
                upload_bytes=upload_bytes,
                download_bytes=download_bytes,
                accuracy=None if evaluation is None else evaluation[1],
                loss=None if evaluation is None else evaluation[0],
            )
        )
        for res in results:
            self.store.record_client(
                tracking.ClientMetrics(
                    task_id=self.task_id,
                    round_index=round_index,
                    client_id=res.client_id,
                    train_loss=res.train_loss,
                    num_samples=res.num_samples,
                    sim_time=measured[res.client_id],
                    upload_bytes=res.upload_bytes,
                )
            )

        self.params = new_params
        log.info(
            "round %d: %d/%d clients, sim %.4fs%s",
            round_index,
            len(results),
            len(selected),
            sim_time,
            "" if evaluation is None else f", accuracy {evaluation[1]:.4f}",
        )
        return RoundOutcome(
            round_index=round_index,
            params=new_params,
            selected=sorted(selected),
            completed=[res.client_id for res in results],
            sim_time=sim_time,
            wall_time=wall_time,
            accuracy=None if evaluation is None else evaluation[1],
            loss=None if evaluation is None else evaluation[0],
        )

    def run(self) -> TaskReport:
        cfg = self.config
        self.store.create_task(self.task_id, cfg.to_dict())
        t0 = time.perf_counter()
        for round_index in range(cfg.rounds):
            self.run_round(round_index)
        t_total = time.perf_counter() - t0
        final_accuracy = None if self.last_eval is None else self.last_eval[1]
        final_loss = None if self.last_eval is None else self.last_eval[0]
        self.store.finalize_task(self.task_id, t_total, cfg.rounds, final_accuracy)
        return TaskReport(
            task_id=self.task_id,
            rounds=cfg.rounds,
            final_accuracy=final_accuracy,
            final_loss=final_loss,
            accuracy_curve=list(self.accuracy_curve),
            t_total=t_total,
            t_round=t_total / cfg.rounds,
            sim_total=self.sim_total,
            params=self.params,
            tracking_dir=str(self.store.root),
        )
