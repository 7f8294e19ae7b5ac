from __future__ import annotations

import json

import pytest

from fedsim.config import Config, HeteroSpec, PartitionSpec, client_ids, derive_seed
from fedsim.errors import InvalidConfigError


def test_defaults():
    cfg = Config()
    assert cfg.rounds == 10
    assert cfg.clients_per_round == 2
    assert cfg.local_epochs == 1
    assert cfg.batch_size == 32
    assert cfg.learning_rate == 0.1
    assert cfg.model == "logreg"
    assert cfg.scheduler == "greedyada"
    assert cfg.mode == "standalone"
    assert cfg.partition.num_clients == 100
    assert cfg.synthetic.num_classes == 2
    assert cfg.synthetic.total_samples == 5000


def test_paper_experiment_defaults_echo():
    cfg = Config.from_dict({"local_epochs": 10, "batch_size": 64})
    assert cfg.local_epochs == 10
    assert cfg.batch_size == 64


@pytest.mark.parametrize(
    "field,value",
    [
        ("rounds", 0),
        ("momentum", 1.5),
        ("momentum", -0.1),
        ("local_epochs", 0),
        ("batch_size", 0),
        ("workers", 0),
        ("scheduler_momentum", 1.2),
        ("topk_ratio", 0.0),
        ("topk_ratio", 1.5),
        ("client_fraction", 0.0),
        ("eval_interval", 0),
        ("model", "resnet18"),
        ("scheduler", "fifo"),
        ("mode", "hybrid"),
        ("compression", "gzip"),
    ],
)
def test_invariant_violations(field, value):
    raw = {field: value}
    if field == "client_fraction":
        raw["clients_per_round"] = None
    with pytest.raises(InvalidConfigError):
        Config.from_dict(raw)


def test_exactly_one_client_count_spec():
    with pytest.raises(InvalidConfigError):
        Config(clients_per_round=2, client_fraction=0.5)
    with pytest.raises(InvalidConfigError):
        Config(clients_per_round=None, client_fraction=None)


def test_fraction_resolution_rounds_half_up_with_floor_one():
    cfg = Config(clients_per_round=None, client_fraction=0.1)
    assert cfg.resolve_clients_per_round(100) == 10
    assert cfg.resolve_clients_per_round(5) == 1  # round(0.5) == 0 -> floor 1
    cfg2 = Config(clients_per_round=None, client_fraction=1.0)
    assert cfg2.resolve_clients_per_round(7) == 7


def test_fixed_count_capped_by_population():
    cfg = Config(clients_per_round=10)
    with pytest.raises(InvalidConfigError):
        cfg.resolve_clients_per_round(4)


def test_unknown_fields_rejected():
    with pytest.raises(InvalidConfigError):
        Config.from_dict({"round": 5})


def test_json_file_round_trip(tmp_path):
    cfg = Config(rounds=7, seed=3, hetero=HeteroSpec(enabled=True, network_delay=(0.1, 0.2)))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    loaded = Config.from_file(path)
    assert loaded == cfg


def test_partition_spec_invariants():
    with pytest.raises(InvalidConfigError):
        PartitionSpec(alpha=0.0)
    with pytest.raises(InvalidConfigError):
        PartitionSpec(unbalanced_beta=-1.0)
    with pytest.raises(InvalidConfigError):
        PartitionSpec(scheme="zipf")
    with pytest.raises(InvalidConfigError):
        PartitionSpec(classes_per_client=0)


def test_hetero_spec_invariants():
    with pytest.raises(InvalidConfigError):
        HeteroSpec(speed_ratios=())
    with pytest.raises(InvalidConfigError):
        HeteroSpec(speed_ratios=(1.0, -2.0))
    with pytest.raises(InvalidConfigError):
        HeteroSpec(network_delay=(0.5, 0.1))


def test_realistic_scheme_requires_directory_dataset():
    with pytest.raises(InvalidConfigError):
        Config(partition=PartitionSpec(scheme="realistic"))


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(1, "train", 0, "c01") == derive_seed(1, "train", 0, "c01")
    assert derive_seed(1, "train", 0, "c01") != derive_seed(1, "train", 0, "c02")
    assert derive_seed(1, "train", 0, "c01") != derive_seed(1, "select")
    assert derive_seed(2, "select") != derive_seed(1, "select")


def test_client_ids_sort_lexically_like_numerically():
    ids = client_ids(100)
    assert ids[0] == "c00" and ids[-1] == "c99"
    assert ids == sorted(ids)
    assert len(set(ids)) == 100
