"""System-heterogeneity simulation: device speed ratios and a simulated clock.

Each client is assigned a speed ratio drawn from the configured list; a
round's simulated training time is the base compute time (shard size x
epochs / throughput) multiplied by that ratio, plus an optional uniform
network delay. The clock only advances by these values, it never sleeps.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .config import HeteroSpec


@dataclass
class ClientProfile:
    """Per-client speed ratio plus the scheduler's measured/estimated time."""

    client_id: str
    speed_ratio: float
    time: float = 0.0
    profiled: bool = False


def assign_profiles(ids: list[str], spec: HeteroSpec, seed: int = 0) -> dict[str, ClientProfile]:
    """Assign speed ratios uniformly at random (seeded); 1.0 when disabled."""
    rng = random.Random(seed)
    profiles: dict[str, ClientProfile] = {}
    for cid in ids:
        ratio = rng.choice(spec.speed_ratios) if spec.enabled else 1.0
        profiles[cid] = ClientProfile(client_id=cid, speed_ratio=ratio)
    return profiles


def base_compute_time(num_samples: int, epochs: int, spec: HeteroSpec) -> float:
    """Deterministic compute-time proxy: samples x epochs / throughput."""
    return num_samples * epochs / spec.throughput


def simulated_round_time(
    base_time: float,
    profile: ClientProfile,
    spec: HeteroSpec,
    rng: random.Random | None = None,
) -> float:
    """Base compute time scaled by the client's ratio plus sampled delay."""
    if base_time < 0:
        raise ValueError("base_time must be >= 0")
    total = base_time * profile.speed_ratio
    if spec.network_delay is not None:
        lo, hi = spec.network_delay
        if rng is None:
            raise ValueError("a seeded rng is required to sample network delay")
        total += rng.uniform(lo, hi)
    return total
