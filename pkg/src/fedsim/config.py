"""Run configuration: typed specs, invariant checks, and JSON loading.

A run is configured by a single JSON document. Every field has a documented
default so ``fedsim run`` works with no arguments; explicit CLI flags override
file values. All randomness in a run is derived from ``Config.seed`` through
:func:`derive_seed`, which gives each consumer (partitioning, model init,
client selection, per-client training, ...) an independent, reproducible
stream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import InvalidConfigError

MODEL_KINDS = ("logreg", "mlp")
SCHEDULERS = ("greedyada", "random", "slowest")
MODES = ("standalone", "distributed", "remote")
PARTITION_SCHEMES = ("iid", "dirichlet", "class_per_client", "realistic")
COMPRESSIONS = ("identity", "topk")
ENCRYPTIONS = ("identity",)


def derive_seed(*parts: object) -> int:
    """Derive a stable 64-bit sub-seed from a root seed and a label path.

    Hash-based so that streams for different purposes never collide and the
    mapping is identical across processes (standalone vs. remote runs must
    draw the same per-client training seeds).
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in Gaussian-cluster sample pool."""

    num_classes: int = 2
    feature_dim: int = 2
    total_samples: int = 5000
    separation: float = 4.0

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InvalidConfigError("synthetic.num_classes must be >= 1")
        if self.feature_dim < 1:
            raise InvalidConfigError("synthetic.feature_dim must be >= 1")
        if self.total_samples < 1:
            raise InvalidConfigError("synthetic.total_samples must be >= 1")
        if self.separation <= 0:
            raise InvalidConfigError("synthetic.separation must be > 0")


@dataclass(frozen=True)
class PartitionSpec:
    """How the sample pool is split into per-client shards."""

    scheme: str = "iid"
    num_clients: int = 100
    alpha: float = 0.5
    classes_per_client: int = 1
    unbalanced_beta: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.scheme not in PARTITION_SCHEMES:
            raise InvalidConfigError(f"unknown partition scheme: {self.scheme!r}")
        if self.num_clients < 1:
            raise InvalidConfigError("partition.num_clients must be >= 1")
        if self.alpha <= 0:
            raise InvalidConfigError("partition.alpha must be > 0")
        if self.classes_per_client < 1:
            raise InvalidConfigError("partition.classes_per_client must be >= 1")
        if self.unbalanced_beta is not None and self.unbalanced_beta <= 0:
            raise InvalidConfigError("partition.unbalanced_beta must be > 0")
        if self.seed is not None and self.seed < 0:
            raise InvalidConfigError("partition.seed must be >= 0")


@dataclass(frozen=True)
class HeteroSpec:
    """System-heterogeneity simulation knobs.

    ``speed_ratios`` are drawn uniformly (seeded) per client; the simulated
    clock multiplies compute time by the client's ratio and optionally adds a
    uniform network delay. ``throughput`` converts shard size into base
    compute seconds: base = samples * epochs / throughput.
    """

    enabled: bool = False
    speed_ratios: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    assignment_seed: int | None = None
    network_delay: tuple[float, float] | None = None
    throughput: float = 10000.0

    def __post_init__(self) -> None:
        if not self.speed_ratios:
            raise InvalidConfigError("hetero.speed_ratios must be non-empty")
        if any(r <= 0 for r in self.speed_ratios):
            raise InvalidConfigError("hetero.speed_ratios must all be > 0")
        if self.network_delay is not None:
            lo, hi = self.network_delay
            if lo < 0 or hi < lo:
                raise InvalidConfigError("hetero.network_delay must satisfy 0 <= lo <= hi")
        if self.throughput <= 0:
            raise InvalidConfigError("hetero.throughput must be > 0")


@dataclass(frozen=True)
class Config:
    """Resolved run configuration; every construction path is validated."""

    seed: int = 0
    rounds: int = 10
    clients_per_round: int | None = 2
    client_fraction: float | None = None
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    model: str = "logreg"
    hidden_dim: int = 32
    dataset: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    hetero: HeteroSpec = field(default_factory=HeteroSpec)
    workers: int = 1
    scheduler: str = "greedyada"
    scheduler_default_time: float = 1.0
    scheduler_momentum: float = 0.5
    mode: str = "standalone"
    tracking_dir: str = "./fedsim_runs"
    compression: str = "identity"
    topk_ratio: float = 1.0
    encryption: str = "identity"
    eval_interval: int = 1
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise InvalidConfigError("seed must be >= 0")
        if self.rounds < 1:
            raise InvalidConfigError("rounds must be >= 1")
        if self.clients_per_round is not None and self.client_fraction is not None:
            raise InvalidConfigError("set clients_per_round or client_fraction, not both")
        if self.clients_per_round is None and self.client_fraction is None:
            raise InvalidConfigError("one of clients_per_round / client_fraction is required")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise InvalidConfigError("clients_per_round must be >= 1")
        if self.client_fraction is not None and not 0 < self.client_fraction <= 1:
            raise InvalidConfigError("client_fraction must be in (0, 1]")
        if self.local_epochs < 1:
            raise InvalidConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise InvalidConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum <= 1:
            raise InvalidConfigError("momentum must be in [0, 1]")
        if self.model not in MODEL_KINDS:
            raise InvalidConfigError(f"unknown model kind: {self.model!r}")
        if self.hidden_dim < 1:
            raise InvalidConfigError("hidden_dim must be >= 1")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise InvalidConfigError(f"unknown scheduler: {self.scheduler!r}")
        if self.scheduler_default_time < 0:
            raise InvalidConfigError("scheduler_default_time must be >= 0")
        if not 0 <= self.scheduler_momentum <= 1:
            raise InvalidConfigError("scheduler_momentum must be in [0, 1]")
        if self.mode not in MODES:
            raise InvalidConfigError(f"unknown mode: {self.mode!r}")
        if self.compression not in COMPRESSIONS:
            raise InvalidConfigError(f"unknown compression: {self.compression!r}")
        if not 0 < self.topk_ratio <= 1:
            raise InvalidConfigError("topk_ratio must be in (0, 1]")
        if self.encryption not in ENCRYPTIONS:
            raise InvalidConfigError(f"unknown encryption: {self.encryption!r}")
        if self.eval_interval < 1:
            raise InvalidConfigError("eval_interval must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise InvalidConfigError("test_fraction must be in [0, 1)")
        if self.partition.scheme == "realistic" and self.dataset == "synthetic":
            raise InvalidConfigError("realistic partition requires a dataset directory")

    def resolve_clients_per_round(self, num_clients: int) -> int:
        """Resolve K; a fraction C maps to max(1, round(C * N)), capped at N."""
        if self.clients_per_round is not None:
            k = self.clients_per_round
        else:
            assert self.client_fraction is not None
            k = max(1, round(self.client_fraction * num_clients))
        if k > num_clients:
            raise InvalidConfigError(
                f"clients_per_round={k} exceeds available clients ({num_clients})"
            )
        return k

    def partition_seed(self) -> int:
        if self.partition.seed is not None:
            return self.partition.seed
        return derive_seed(self.seed, "partition")

    def hetero_seed(self) -> int:
        if self.hetero.assignment_seed is not None:
            return self.hetero.assignment_seed
        return derive_seed(self.seed, "hetero")

    def data_seed(self) -> int:
        return derive_seed(self.seed, "data")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hetero"]["speed_ratios"] = list(self.hetero.speed_ratios)
        if self.hetero.network_delay is not None:
            d["hetero"]["network_delay"] = list(self.hetero.network_delay)
        return d

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Config":
        if not isinstance(raw, dict):
            raise InvalidConfigError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs: dict[str, Any] = dict(raw)
        try:
            if "synthetic" in kwargs and isinstance(kwargs["synthetic"], dict):
                kwargs["synthetic"] = SyntheticSpec(**kwargs["synthetic"])
            if "partition" in kwargs and isinstance(kwargs["partition"], dict):
                kwargs["partition"] = PartitionSpec(**kwargs["partition"])
            if "hetero" in kwargs and isinstance(kwargs["hetero"], dict):
                het = dict(kwargs["hetero"])
                if "speed_ratios" in het:
                    het["speed_ratios"] = tuple(het["speed_ratios"])
                if het.get("network_delay") is not None:
                    lo, hi = het["network_delay"]
                    het["network_delay"] = (float(lo), float(hi))
                kwargs["hetero"] = HeteroSpec(**het)
            return cls(**kwargs)
        except TypeError as exc:
            raise InvalidConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "Config":
        p = Path(path)
        if not p.exists():
            raise InvalidConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def client_ids(num_clients: int) -> list[str]:
    """Zero-padded client ids whose lexical order equals numeric order."""
    width = max(2, len(str(max(num_clients - 1, 0))))
    return [f"c{i:0{width}d}" for i in range(num_clients)]
