"""Federated datasets: synthetic pools, heterogeneity partitioners, disk format.

A dataset is a map from client id to an ordered train shard plus a held-out
local test shard (the last ``test_fraction`` of the client's samples). The
partitioners implement label-IID dealing, per-class Dirichlet label skew,
fixed classes-per-client skew, and an orthogonal Dirichlet size imbalance;
all of them preserve the pool as a disjoint cover and are deterministic
under the partition seed.

On-disk layout is a directory with ``manifest.json`` (format_version 1) and
one binary shard per client: little-endian u32 sample count, then per sample
feature_dim x f32 followed by a u16 label.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PartitionSpec, SyntheticSpec, client_ids
from .errors import (
    DatasetNotFoundError,
    InfeasiblePartitionError,
    InvalidConfigError,
    MalformedManifestError,
    ShapeMismatchError,
    UnknownFormatVersionError,
)

FORMAT_VERSION = 1
REDRAW_LIMIT = 100


@dataclass(frozen=True)
class Sample:
    features: tuple[float, ...]
    label: int


@dataclass
class ClientShard:
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def all_samples(self) -> list[Sample]:
        return self.train + self.test


@dataclass
class FederatedDataset:
    clients: dict[str, ClientShard]
    num_classes: int
    feature_dim: int

    def global_test(self) -> list[Sample]:
        out: list[Sample] = []
        for shard in self.clients.values():
            out.extend(shard.test)
        return out

    def total_samples(self) -> int:
        return sum(len(s.train) + len(s.test) for s in self.clients.values())


def _f32_sample(row: np.ndarray, label: int) -> Sample:
    # store features as exact f32 values so disk round trips are lossless
    return Sample(tuple(float(v) for v in row.astype(np.float32)), int(label))


def generate_synthetic(
    num_classes: int,
    feature_dim: int,
    total_samples: int,
    seed: int,
    separation: float = 4.0,
) -> list[Sample]:
    """Class-balanced pool of unit-variance Gaussian clusters.

    Cluster means sit on a circle in the first two feature dimensions (on a
    line when feature_dim == 1) with adjacent means ``separation`` apart, so
    separation is measured in sigma units.
    """
    if num_classes < 1 or feature_dim < 1 or total_samples < 1:
        raise InvalidConfigError("synthetic parameters must all be positive")
    rng = np.random.default_rng(seed)
    counts = [total_samples // num_classes] * num_classes
    for i in range(total_samples % num_classes):
        counts[i] += 1
    means = np.zeros((num_classes, feature_dim))
    if num_classes > 1:
        if feature_dim == 1:
            means[:, 0] = np.arange(num_classes) * separation
        else:
            radius = separation / (2.0 * np.sin(np.pi / num_classes))
            angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
            means[:, 0] = radius * np.cos(angles)
            means[:, 1] = radius * np.sin(angles)
    pool: list[Sample] = []
    for label, count in enumerate(counts):
        points = rng.normal(loc=means[label], scale=1.0, size=(count, feature_dim))
        pool.extend(_f32_sample(row, label) for row in points)
    order = rng.permutation(len(pool))
    return [pool[i] for i in order]


def synthetic_pool(spec: SyntheticSpec, seed: int) -> list[Sample]:
    return generate_synthetic(
        spec.num_classes, spec.feature_dim, spec.total_samples, seed, spec.separation
    )


def _proportions_to_counts(props: np.ndarray, total: int) -> np.ndarray:
    """Round proportions to integer counts that sum exactly to total."""
    cum = np.cumsum(props, dtype=np.float64)
    cum /= cum[-1]
    edges = np.round(cum * total).astype(np.int64)
    return np.diff(edges, prepend=0)


def _draw_sizes(rng: np.random.Generator, n: int, beta: float, total: int) -> np.ndarray:
    for _ in range(REDRAW_LIMIT):
        sizes = _proportions_to_counts(rng.dirichlet(np.full(n, beta)), total)
        if sizes.min() > 0:
            return sizes
    raise InfeasiblePartitionError(
        f"could not draw non-empty shard sizes for {n} clients from {total} samples"
    )


def _labels_for_clients(num_clients: int, per_client: int, num_classes: int) -> list[list[int]]:
    """Round-robin label slots: client i holds labels i*n .. i*n+n-1 (mod C)."""
    n_eff = min(per_client, num_classes)
    if num_clients * n_eff < num_classes:
        raise InfeasiblePartitionError(
            f"{num_clients} clients x {n_eff} labels cannot cover {num_classes} classes"
        )
    return [
        [(i * n_eff + j) % num_classes for j in range(n_eff)] for i in range(num_clients)
    ]


def partition(
    pool: list[Sample], spec: PartitionSpec, test_fraction: float = 0.2
) -> FederatedDataset:
    """Split a pool into per-client shards according to the partition spec.

    Every scheme yields a disjoint cover of the pool; each client keeps the
    last ``test_fraction`` of its shard as local test data. Zero-sample
    clients trigger a proportion re-draw (up to 100 times) before failing.
    """
    if not pool:
        raise InvalidConfigError("cannot partition an empty pool")
    if spec.scheme == "realistic":
        raise InvalidConfigError("realistic partitions are loaded from a dataset directory")
    n = spec.num_clients
    if n > len(pool):
        raise InfeasiblePartitionError(f"{n} clients exceed pool of {len(pool)} samples")
    dims = {len(s.features) for s in pool}
    if len(dims) != 1:
        raise ShapeMismatchError(f"pool has mixed feature lengths: {sorted(dims)}")
    feature_dim = dims.pop()
    num_classes = max(s.label for s in pool) + 1
    rng = np.random.default_rng(0 if spec.seed is None else spec.seed)
    ids = client_ids(n)

    if spec.scheme == "iid":
        order = rng.permutation(len(pool))
        if spec.unbalanced_beta is not None:
            sizes = _draw_sizes(rng, n, spec.unbalanced_beta, len(pool))
        else:
            base, rem = divmod(len(pool), n)
            sizes = np.array([base + (1 if i < rem else 0) for i in range(n)])
        if sizes.min() < 1:
            raise InfeasiblePartitionError("a client would receive 0 samples")
        edges = np.cumsum(sizes)
        assignment = [order[start:stop] for start, stop in zip(np.r_[0, edges[:-1]], edges)]

    elif spec.scheme == "dirichlet":
        by_class = [
            rng.permutation(np.flatnonzero([s.label == c for s in pool]))
            for c in range(num_classes)
        ]
        size_weights = None
        if spec.unbalanced_beta is not None:
            sizes = _draw_sizes(rng, n, spec.unbalanced_beta, len(pool))
            size_weights = sizes / sizes.sum()
        assignment = None
        for _ in range(REDRAW_LIMIT):
            parts: list[list[np.ndarray]] = [[] for _ in range(n)]
            for class_idx in by_class:
                props = rng.dirichlet(np.full(n, spec.alpha))
                if size_weights is not None:
                    props = props * size_weights
                    props /= props.sum()
                counts = _proportions_to_counts(props, len(class_idx))
                stop = np.cumsum(counts)
                for i, (lo, hi) in enumerate(zip(np.r_[0, stop[:-1]], stop)):
                    parts[i].append(class_idx[lo:hi])
            candidate = [np.concatenate(p) for p in parts]
            if min(len(a) for a in candidate) > 0:
                assignment = candidate
                break
        if assignment is None:
            raise InfeasiblePartitionError(
                f"dirichlet(alpha={spec.alpha}) left a client empty after {REDRAW_LIMIT} draws"
            )

    elif spec.scheme == "class_per_client":
        labels = _labels_for_clients(n, spec.classes_per_client, num_classes)
        holders: list[list[int]] = [[] for _ in range(num_classes)]
        for i, owned in enumerate(labels):
            for c in owned:
                holders[c].append(i)
        shuffled_classes = []
        for c in range(num_classes):
            class_idx = rng.permutation(np.flatnonzero([s.label == c for s in pool]))
            if len(class_idx) < len(holders[c]):
                raise InfeasiblePartitionError(
                    f"class {c} has {len(class_idx)} samples for {len(holders[c])} clients"
                )
            shuffled_classes.append(class_idx)
        assignment = None
        for _ in range(REDRAW_LIMIT):
            client_weights = (
                rng.dirichlet(np.full(n, spec.unbalanced_beta))
                if spec.unbalanced_beta is not None
                else np.ones(n)
            )
            parts = [[] for _ in range(n)]
            feasible = True
            for c in range(num_classes):
                group = holders[c]
                weights = np.array([client_weights[i] for i in group])
                counts = _proportions_to_counts(weights / weights.sum(), len(shuffled_classes[c]))
                if counts.min() < 1:
                    feasible = False  # a label slot would be starved; redraw weights
                    break
                stop = np.cumsum(counts)
                for member, (lo, hi) in zip(group, zip(np.r_[0, stop[:-1]], stop)):
                    parts[member].append(shuffled_classes[c][lo:hi])
            if feasible:
                assignment = [np.concatenate(p) for p in parts]
                break
            if spec.unbalanced_beta is None:
                break
        if assignment is None:
            raise InfeasiblePartitionError(
                f"class_per_client could not serve every label slot after {REDRAW_LIMIT} draws"
            )

    else:  # pragma: no cover - schemes validated by PartitionSpec
        raise InvalidConfigError(f"unknown partition scheme: {spec.scheme!r}")

    clients: dict[str, ClientShard] = {}
    for cid, idx in zip(ids, assignment):
        samples = [pool[int(i)] for i in idx]
        n_test = int(len(samples) * test_fraction)
        clients[cid] = ClientShard(train=samples[: len(samples) - n_test],
                                   test=samples[len(samples) - n_test :])
    return FederatedDataset(clients=clients, num_classes=num_classes, feature_dim=feature_dim)


def save_dataset(fd: FederatedDataset, path: str | Path) -> None:
    """Write manifest.json plus one binary shard per client (train then test)."""
    if fd.num_classes > 0xFFFF:
        raise InvalidConfigError("labels beyond u16 range cannot be stored")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_classes": fd.num_classes,
        "feature_dim": fd.feature_dim,
        "clients": [
            {
                "id": cid,
                "file": f"{cid}.bin",
                "train_count": len(shard.train),
                "test_count": len(shard.test),
            }
            for cid, shard in fd.clients.items()
        ],
    }
    for cid, shard in fd.clients.items():
        samples = shard.all_samples()
        blob = bytearray(struct.pack("<I", len(samples)))
        for sample in samples:
            blob += np.asarray(sample.features, dtype="<f4").tobytes()
            blob += struct.pack("<H", sample.label)
        (root / f"{cid}.bin").write_bytes(bytes(blob))
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_dataset(path: str | Path) -> FederatedDataset:
    """Load a dataset directory; inverse of :func:`save_dataset`."""
    root = Path(path)
    if not root.exists():
        raise DatasetNotFoundError(f"dataset path does not exist: {root}")
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MalformedManifestError(f"missing manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"manifest.json is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownFormatVersionError(f"unsupported dataset format_version: {version!r}")
    for key in ("num_classes", "feature_dim", "clients"):
        if key not in manifest:
            raise MalformedManifestError(f"manifest is missing {key!r}")
    num_classes = int(manifest["num_classes"])
    feature_dim = int(manifest["feature_dim"])
    sample_size = 4 * feature_dim + 2
    clients: dict[str, ClientShard] = {}
    for entry in manifest["clients"]:
        for key in ("id", "file", "train_count", "test_count"):
            if key not in entry:
                raise MalformedManifestError(f"client entry is missing {key!r}: {entry}")
        cid = entry["id"]
        shard_path = root / entry["file"]
        if not shard_path.exists():
            raise MalformedManifestError(f"manifest lists {cid} but {entry['file']} is missing")
        blob = shard_path.read_bytes()
        if len(blob) < 4:
            raise ShapeMismatchError(f"shard {entry['file']} is too short for a header")
        (count,) = struct.unpack_from("<I", blob, 0)
        expected = entry["train_count"] + entry["test_count"]
        if count != expected:
            raise MalformedManifestError(
                f"shard {entry['file']} holds {count} samples, manifest says {expected}"
            )
        if len(blob) != 4 + count * sample_size:
            raise ShapeMismatchError(
                f"shard {entry['file']} size {len(blob)} does not match "
                f"{count} samples of feature_dim {feature_dim}"
            )
        samples: list[Sample] = []
        offset = 4
        for _ in range(count):
            feats = np.frombuffer(blob, dtype="<f4", count=feature_dim, offset=offset)
            offset += 4 * feature_dim
            (label,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            if label >= num_classes:
                raise MalformedManifestError(
                    f"shard {entry['file']} holds label {label} >= num_classes {num_classes}"
                )
            samples.append(Sample(tuple(float(v) for v in feats), int(label)))
        clients[cid] = ClientShard(
            train=samples[: entry["train_count"]], test=samples[entry["train_count"] :]
        )
    return FederatedDataset(clients=clients, num_classes=num_classes, feature_dim=feature_dim)
