"""fedsim command line: run tasks, partition data, benchmark, serve, query.

stdout carries machine-readable output (JSON lines or CSV); diagnostics go
to stderr. Exit codes: 0 success, 1 runtime error, 2 usage error or
not-found. A --config JSON file provides base values; explicit flags
override them; FEDSIM_TRACK_DIR overrides the tracking directory unless
--tracking-dir is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import signal
import sys
from pathlib import Path

from . import api, remote, scheduler, tracking
from .config import Config, PartitionSpec, SyntheticSpec
from .data import partition as partition_pool
from .data import save_dataset, synthetic_pool
from .errors import FedsimError, TaskNotFoundError

log = logging.getLogger("fedsim")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

CONFIG_FLAGS = (
    "seed",
    "rounds",
    "clients_per_round",
    "local_epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "model",
    "dataset",
    "workers",
    "scheduler",
    "mode",
    "tracking_dir",
    "compression",
    "topk_ratio",
    "eval_interval",
)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(name)s: %(message)s")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--clients-per-round", type=int, dest="clients_per_round")
    parser.add_argument("--local-epochs", type=int, dest="local_epochs")
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--model", choices=["logreg", "mlp"])
    parser.add_argument("--dataset", help='"synthetic" or a dataset directory')
    parser.add_argument("--workers", type=int)
    parser.add_argument("--scheduler", choices=["greedyada", "random", "slowest"])
    parser.add_argument("--mode", choices=["standalone", "distributed", "remote"])
    parser.add_argument("--tracking-dir", dest="tracking_dir")
    parser.add_argument("--compression", choices=["identity", "topk"])
    parser.add_argument("--topk-ratio", type=float, dest="topk_ratio")
    parser.add_argument("--eval-interval", type=int, dest="eval_interval")


def _build_config(args: argparse.Namespace) -> Config:
    base: dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(base, dict):
            raise FedsimError("config file must hold a JSON object")
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    if "clients_per_round" in base and base["clients_per_round"] is not None:
        base.pop("client_fraction", None)
    return Config.from_dict(base)


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    config = _build_config(args)
    handle = api.init(config)
    report = api.run(handle)
    _print_json(report.summary())
    return EXIT_OK


def cmd_partition(args: argparse.Namespace) -> int:
    synthetic = SyntheticSpec(
        num_classes=args.classes,
        feature_dim=args.dim,
        total_samples=args.samples,
        separation=args.separation,
    )
    spec = PartitionSpec(
        scheme=args.scheme,
        num_clients=args.num_clients,
        alpha=args.alpha,
        classes_per_client=args.classes_per_client,
        unbalanced_beta=args.beta,
        seed=args.seed,
    )
    pool = synthetic_pool(synthetic, args.seed)
    dataset = partition_pool(pool, spec, args.test_fraction)
    save_dataset(dataset, args.out)
    _print_json(
        {
            "out": args.out,
            "num_clients": len(dataset.clients),
            "num_classes": dataset.num_classes,
            "feature_dim": dataset.feature_dim,
            "total_samples": dataset.total_samples(),
        }
    )
    return EXIT_OK


def cmd_sched_bench(args: argparse.Namespace) -> int:
    rows, _ = scheduler.schedule_benchmark(
        num_clients=args.clients,
        workers=tuple(args.workers),
        num_seeds=args.seeds,
        beta=args.beta,
    )
    sys.stdout.write(scheduler.benchmark_csv(rows))
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    config = Config() if not args.tracking_dir else Config(tracking_dir=args.tracking_dir)
    store = tracking.MetricsStore(api.tracking_root(config))
    predicate = None
    if args.round is not None:
        predicate = lambda rec: rec.get("round_index") == args.round  # noqa: E731
    records = store.query(args.task, args.level, predicate)
    for record in records:
        _print_json(record)
    return EXIT_OK


def cmd_registry(args: argparse.Namespace) -> int:
    server = remote.RegistryServer((args.host, args.port), default_ttl_s=args.ttl)
    log.info("registry listening on %s", remote.format_addr(server.address))
    print(json.dumps({"registry": remote.format_addr(server.address)}), flush=True)
    _serve_until_signal(server.serve_forever, server.stop)
    return EXIT_OK


def cmd_server(args: argparse.Namespace) -> int:
    config = _build_config(args)
    if config.mode != "remote":
        config = dataclasses.replace(config, mode="remote")
    handle = api.init(config)
    report = api.start_server(
        handle,
        api.ServerArgs(
            registry_addr=args.registry,
            min_clients=args.min_clients,
            client_timeout_s=args.client_timeout,
            poll_deadline_s=args.poll_deadline,
            stop_clients=args.stop_clients,
        ),
    )
    _print_json(report.summary())
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    config = Config(mode="remote", dataset=args.shard)
    handle = api.init(config)
    service = api.start_client(
        handle,
        api.ClientArgs(
            listen_addr=args.listen,
            registry_addr=args.registry,
            client_id=args.id,
            shard_path=args.shard,
        ),
    )
    print(json.dumps({"client": args.id, "listen": remote.format_addr(service.address)}), flush=True)
    _serve_until_signal(service.wait, service.stop)
    return EXIT_OK


def _serve_until_signal(wait, stop) -> None:
    def handler(signum, frame):
        log.info("signal %d: shutting down", signum)
        stop()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    try:
        wait()
    except KeyboardInterrupt:
        stop()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug (stderr)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a training task")
    _add_config_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_part = sub.add_parser("partition", help="generate and save a partitioned dataset")
    p_part.add_argument("--out", required=True, help="output dataset directory")
    p_part.add_argument("--scheme", default="iid",
                        choices=["iid", "dirichlet", "class_per_client"])
    p_part.add_argument("--num-clients", type=int, default=100, dest="num_clients")
    p_part.add_argument("--alpha", type=float, default=0.5)
    p_part.add_argument("--classes-per-client", type=int, default=1, dest="classes_per_client")
    p_part.add_argument("--beta", type=float, default=None,
                        help="Dirichlet size-imbalance parameter")
    p_part.add_argument("--classes", type=int, default=2)
    p_part.add_argument("--dim", type=int, default=2)
    p_part.add_argument("--samples", type=int, default=5000)
    p_part.add_argument("--separation", type=float, default=4.0)
    p_part.add_argument("--test-fraction", type=float, default=0.2, dest="test_fraction")
    p_part.add_argument("--seed", type=int, default=0)
    p_part.set_defaults(fn=cmd_partition)

    p_bench = sub.add_parser("sched-bench", help="compare allocation strategies (CSV)")
    p_bench.add_argument("--clients", type=int, default=20)
    p_bench.add_argument("--workers", type=int, nargs="+", default=[2, 4])
    p_bench.add_argument("--seeds", type=int, default=100)
    p_bench.add_argument("--beta", type=float, default=0.5)
    p_bench.set_defaults(fn=cmd_sched_bench)

    p_track = sub.add_parser("track", help="print tracked metrics as JSON lines")
    p_track.add_argument("--task", required=True)
    p_track.add_argument("--level", required=True, choices=["task", "round", "client"])
    p_track.add_argument("--round", type=int, default=None)
    p_track.add_argument("--tracking-dir", dest="tracking_dir")
    p_track.set_defaults(fn=cmd_track)

    p_reg = sub.add_parser("registry", help="serve the client registry")
    p_reg.add_argument("--host", default="127.0.0.1")
    p_reg.add_argument("--port", type=int, default=7070)
    p_reg.add_argument("--ttl", type=int, default=remote.DEFAULT_TTL_S)
    p_reg.set_defaults(fn=cmd_registry)

    p_srv = sub.add_parser("server", help="drive a remote training task")
    _add_config_flags(p_srv)
    p_srv.add_argument("--registry", required=True, help="registry host:port")
    p_srv.add_argument("--min-clients", type=int, default=1, dest="min_clients")
    p_srv.add_argument("--client-timeout", type=float, default=300.0, dest="client_timeout")
    p_srv.add_argument("--poll-deadline", type=float, default=60.0, dest="poll_deadline")
    p_srv.add_argument("--stop-clients", action="store_true", dest="stop_clients")
    p_srv.set_defaults(fn=cmd_server)

    p_cli = sub.add_parser("client", help="serve one client's shard")
    p_cli.add_argument("--id", required=True, help="client id within the dataset")
    p_cli.add_argument("--shard", required=True, help="dataset directory holding the shard")
    p_cli.add_argument("--registry", required=True, help="registry host:port")
    p_cli.add_argument("--listen", default="127.0.0.1:0", help="listen address (0 = ephemeral)")
    p_cli.set_defaults(fn=cmd_client)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.fn(args)
    except TaskNotFoundError as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedsimError as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
