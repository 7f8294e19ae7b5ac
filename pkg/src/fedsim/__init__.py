"""fedsim: desk-scale federated learning orchestration.

Quick start::

    import fedsim

    handle = fedsim.init()
    report = fedsim.run(handle)
"""

from .api import (
    ClientArgs,
    PlatformHandle,
    ServerArgs,
    init,
    register_client,
    register_dataset,
    register_model,
    register_server,
    run,
    start_client,
    start_server,
)
from .config import Config, HeteroSpec, PartitionSpec, SyntheticSpec
from .data import FederatedDataset, Sample, generate_synthetic, load_dataset, partition, save_dataset
from .flow import TaskReport
from .models import ModelSpec, ParamVector

__version__ = "0.1.0"

__all__ = [
    "ClientArgs",
    "Config",
    "FederatedDataset",
    "HeteroSpec",
    "ModelSpec",
    "ParamVector",
    "PartitionSpec",
    "PlatformHandle",
    "Sample",
    "ServerArgs",
    "SyntheticSpec",
    "TaskReport",
    "__version__",
    "generate_synthetic",
    "init",
    "load_dataset",
    "partition",
    "register_client",
    "register_dataset",
    "register_model",
    "register_server",
    "run",
    "save_dataset",
    "start_client",
    "start_server",
]
