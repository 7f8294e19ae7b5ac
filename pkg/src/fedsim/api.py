"""The user-facing facade: init, register plugins, run, serve.

Typical standalone use::

    import fedsim

    handle = fedsim.init({"rounds": 20, "clients_per_round": 5})
    report = fedsim.run(handle)

Plugins replace defaults slot by slot: a dataset provider, a model factory,
or stage overrides for the server or client half of the training flow. Each
slot accepts one registration, and none after a run has started.

Remote training uses the same handle: ``start_client`` serves one client's
shard behind the registry, ``start_server`` discovers clients and drives the
rounds over the wire protocol.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import flow, remote, tracking
from .config import Config
from .data import FederatedDataset, load_dataset, partition, synthetic_pool
from .errors import (
    AlreadyRegisteredError,
    DatasetNotFoundError,
    InvalidConfigError,
    RunInProgressError,
)
from .models import ModelSpec

log = logging.getLogger(__name__)

DatasetProvider = FederatedDataset | Callable[[], FederatedDataset]
ModelFactory = Callable[[int, int], ModelSpec]  # (feature_dim, num_classes) -> spec


@dataclass
class PluginRegistry:
    dataset: DatasetProvider | None = None
    model: ModelFactory | None = None
    server_stages: dict | None = None
    client_stages: dict | None = None


@dataclass
class PlatformHandle:
    config: Config
    plugins: PluginRegistry = field(default_factory=PluginRegistry)
    started: bool = False

    def _register(self, slot: str, value) -> None:
        if self.started:
            raise RunInProgressError("cannot register plugins after a run has started")
        if getattr(self.plugins, slot) is not None:
            raise AlreadyRegisteredError(f"{slot} is already registered")
        setattr(self.plugins, slot, value)


def init(config: Config | dict | str | Path | None = None) -> PlatformHandle:
    """Create a handle from a Config, a raw dict, a JSON file path, or defaults."""
    if config is None:
        resolved = Config()
    elif isinstance(config, Config):
        resolved = config
    elif isinstance(config, dict):
        resolved = Config.from_dict(config)
    elif isinstance(config, (str, Path)):
        resolved = Config.from_file(config)
    else:
        raise InvalidConfigError(f"cannot build a config from {type(config).__name__}")
    if resolved.dataset != "synthetic" and not Path(resolved.dataset).exists():
        raise DatasetNotFoundError(f"dataset path does not exist: {resolved.dataset}")
    return PlatformHandle(config=resolved)


def register_dataset(handle: PlatformHandle, provider: DatasetProvider) -> None:
    handle._register("dataset", provider)


def register_model(handle: PlatformHandle, factory: ModelFactory) -> None:
    handle._register("model", factory)


def register_server(handle: PlatformHandle, stages: dict) -> None:
    flow.build_server_stages(flow.CompressionSpec(), stages)  # validate stage names now
    handle._register("server_stages", dict(stages))


def register_client(handle: PlatformHandle, stages: dict) -> None:
    flow.build_client_stages(flow.CompressionSpec(), stages)
    handle._register("client_stages", dict(stages))


def _compression_spec(config: Config) -> flow.CompressionSpec:
    ratio = config.topk_ratio if config.compression == "topk" else 1.0
    return flow.CompressionSpec(kind=config.compression, ratio=ratio)


def _resolve_dataset(handle: PlatformHandle) -> FederatedDataset:
    if handle.plugins.dataset is not None:
        provider = handle.plugins.dataset
        return provider() if callable(provider) else provider
    config = handle.config
    if config.dataset == "synthetic":
        pool = synthetic_pool(config.synthetic, config.data_seed())
        spec = dataclasses.replace(config.partition, seed=config.partition_seed())
        return partition(pool, spec, config.test_fraction)
    return load_dataset(config.dataset)


def _resolve_model(handle: PlatformHandle, feature_dim: int, num_classes: int) -> ModelSpec:
    if handle.plugins.model is not None:
        return handle.plugins.model(feature_dim, num_classes)
    config = handle.config
    return ModelSpec(
        kind=config.model,
        feature_dim=feature_dim,
        num_classes=num_classes,
        hidden_dim=config.hidden_dim,
    )


def resolve_remote_model(handle: PlatformHandle) -> ModelSpec:
    """Model spec for a server with no local data: dims come from the
    configured dataset directory when there is one, else the synthetic spec."""
    config = handle.config
    if config.dataset != "synthetic":
        dataset = load_dataset(config.dataset)
        return _resolve_model(handle, dataset.feature_dim, dataset.num_classes)
    return _resolve_model(handle, config.synthetic.feature_dim, config.synthetic.num_classes)


def tracking_root(config: Config) -> Path:
    env_dir = os.environ.get("FEDSIM_TRACK_DIR")
    return Path(env_dir) if env_dir else Path(config.tracking_dir)


def run(
    handle: PlatformHandle,
    callback: Callable[[flow.TaskReport], None] | None = None,
) -> flow.TaskReport:
    """Execute the configured task in standalone or distributed mode."""
    config = handle.config
    if config.mode == "remote":
        raise InvalidConfigError("remote tasks are driven by start_server, not run")
    handle.started = True
    dataset = _resolve_dataset(handle)
    model = _resolve_model(handle, dataset.feature_dim, dataset.num_classes)
    compression = _compression_spec(config)
    server_stages = flow.build_server_stages(compression, handle.plugins.server_stages)
    client_stages = flow.build_client_stages(compression, handle.plugins.client_stages)
    env = flow.LocalEnvironment(dataset, model, client_stages)
    store = tracking.MetricsStore(tracking_root(config))
    runner = flow.TaskRunner(config, model, env, server_stages, store)
    report = runner.run()
    if callback is not None:
        callback(report)
    return report


@dataclass
class ServerArgs:
    registry_addr: str
    min_clients: int = 1
    client_timeout_s: float = 300.0
    poll_deadline_s: float = 60.0
    stop_clients: bool = False


@dataclass
class ClientArgs:
    listen_addr: str
    registry_addr: str
    client_id: str
    shard_path: str
    ttl_s: int = remote.DEFAULT_TTL_S
    registry_attempts: int = 5
    registry_delay_s: float = 0.5


def start_server(
    handle: PlatformHandle,
    args: ServerArgs,
    callback: Callable[[flow.TaskReport], None] | None = None,
) -> flow.TaskReport:
    """Discover clients via the registry and drive the remote task."""
    config = handle.config
    if config.mode != "remote":
        raise InvalidConfigError("start_server requires mode=remote")
    handle.started = True
    registry = remote.RegistryClient(remote.parse_addr(args.registry_addr))
    required = config.clients_per_round or 1
    clients = remote.wait_for_clients(registry, required, args.poll_deadline_s)
    log.info("driving remote task over %d clients", len(clients))
    model = resolve_remote_model(handle)
    compression = _compression_spec(config)
    server_stages = flow.build_server_stages(compression, handle.plugins.server_stages)
    env = remote.RemoteEnvironment(
        clients,
        model,
        compression,
        client_timeout_s=args.client_timeout_s,
        min_clients=args.min_clients,
    )
    store = tracking.MetricsStore(tracking_root(config))
    runner = flow.TaskRunner(config, model, env, server_stages, store)
    env.task_id = runner.task_id
    report = runner.run()
    if args.stop_clients:
        for addr in clients.values():
            remote.stop_client(addr)
    if callback is not None:
        callback(report)
    return report


def start_client(handle: PlatformHandle, args: ClientArgs) -> remote.ClientService:
    """Register one client with the registry and serve training requests.

    Returns the running service; call ``service.wait()`` to block until a
    STOP frame arrives.
    """
    config = handle.config
    if config.mode != "remote":
        raise InvalidConfigError("start_client requires mode=remote")
    handle.started = True
    return remote.serve_client(
        remote.parse_addr(args.listen_addr),
        remote.parse_addr(args.registry_addr),
        args.client_id,
        args.shard_path,
        stage_overrides=handle.plugins.client_stages,
        ttl_s=args.ttl_s,
        registry_attempts=args.registry_attempts,
        registry_delay_s=args.registry_delay_s,
    )
