from __future__ import annotations

import pytest

from fedsim.config import PartitionSpec, SyntheticSpec
from fedsim.data import partition, synthetic_pool


@pytest.fixture()
def small_pool():
    return synthetic_pool(SyntheticSpec(num_classes=2, feature_dim=2, total_samples=200), seed=11)


@pytest.fixture()
def two_client_dataset(small_pool):
    return partition(small_pool, PartitionSpec(scheme="iid", num_clients=2, seed=3))


@pytest.fixture()
def base_config(tmp_path):
    return {
        "rounds": 3,
        "clients_per_round": 2,
        "partition": {"num_clients": 8},
        "synthetic": {"total_samples": 400},
        "tracking_dir": str(tmp_path / "runs"),
    }
