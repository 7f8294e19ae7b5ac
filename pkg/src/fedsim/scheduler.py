"""Client-to-worker allocation minimizing per-round makespan.

The greedy strategy is longest-processing-time-first: sort the selected
clients by (estimated) training time descending and repeatedly give the
slowest remaining client to the worker with the least total load. Clients
whose time has never been measured use the adaptive default ``t``, which is
refreshed after every round as a momentum-smoothed mean of the round's
measured times. Tie-breaks are fixed (lower client id, lower worker index)
so allocations are deterministic.

A branch-and-bound oracle computes the exact optimal makespan for small
instances; LPT is within 4/3 - 1/(3M) of it.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .errors import InstanceTooLargeError, UnknownClientError
from .hetero import ClientProfile

BRUTE_FORCE_CAP = 5_000_000  # max M**K assignments the oracle will search


@dataclass
class Allocation:
    """Disjoint client groups per worker and their exact load in seconds."""

    groups: list[list[str]]
    loads: list[float]

    def selected(self) -> set[str]:
        return {cid for group in self.groups for cid in group}


@dataclass
class SchedulerState:
    """Adaptive-profiling state: default time, smoothing momentum, profiles."""

    default_time: float = 1.0
    momentum: float = 0.5
    profiles: dict[str, ClientProfile] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.default_time < 0:
            raise ValueError("default_time must be >= 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")


def makespan(alloc: Allocation) -> float:
    return max(alloc.loads) if alloc.loads else 0.0


def _effective_time(profile: ClientProfile, default_time: float) -> float:
    return profile.time if profile.profiled else default_time


def greedy_allocate(
    selected: list[ClientProfile], workers: int, state: SchedulerState
) -> Allocation:
    """LPT assignment of the selected clients onto ``workers`` workers."""
    if not selected or workers < 1:
        raise ValueError("need at least one client and one worker")
    order = sorted(
        selected,
        key=lambda p: (-_effective_time(p, state.default_time), p.client_id),
    )
    groups: list[list[str]] = [[] for _ in range(workers)]
    loads = [0.0] * workers
    for profile in order:
        w = min(range(workers), key=lambda i: (loads[i], i))
        groups[w].append(profile.client_id)
        loads[w] += _effective_time(profile, state.default_time)
    return Allocation(groups=groups, loads=loads)


def baseline_allocate(
    selected: list[ClientProfile],
    workers: int,
    strategy: str,
    rng: random.Random | None = None,
) -> Allocation:
    """Reference strategies: seeded round-robin or slowest-first block fill."""
    if not selected or workers < 1:
        raise ValueError("need at least one client and one worker")
    groups: list[list[str]] = [[] for _ in range(workers)]
    loads = [0.0] * workers
    if strategy == "random":
        if rng is None:
            raise ValueError("random allocation requires a seeded rng")
        shuffled = list(selected)
        rng.shuffle(shuffled)
        for i, profile in enumerate(shuffled):
            groups[i % workers].append(profile.client_id)
            loads[i % workers] += profile.time
    elif strategy == "slowest":
        order = sorted(selected, key=lambda p: (-p.time, p.client_id))
        per_worker = math.ceil(len(selected) / workers)
        for i, profile in enumerate(order):
            w = i // per_worker
            groups[w].append(profile.client_id)
            loads[w] += profile.time
    else:
        raise ValueError(f"unknown baseline strategy: {strategy!r}")
    return Allocation(groups=groups, loads=loads)


def adaptive_profile(
    alloc: Allocation, measured: dict[str, float], state: SchedulerState
) -> SchedulerState:
    """Fold one round of measured times back into the scheduler state.

    Every measured client becomes profiled with its fresh time; the default
    time moves to mean(measured) * m + old * (1 - m), so m=1 discards the
    preset entirely and m=0 freezes it.
    """
    allocated = alloc.selected()
    unknown = set(measured) - allocated
    if unknown:
        raise UnknownClientError(f"measured clients not in allocation: {sorted(unknown)}")
    for cid, seconds in measured.items():
        profile = state.profiles.get(cid)
        if profile is None:
            profile = ClientProfile(client_id=cid, speed_ratio=1.0)
            state.profiles[cid] = profile
        profile.time = seconds
        profile.profiled = True
    if measured:
        round_mean = sum(measured.values()) / len(measured)
        state.default_time = round_mean * state.momentum + state.default_time * (1 - state.momentum)
    return state


def brute_force_optimal(times: list[float], workers: int) -> float:
    """Exact minimal makespan by exhaustive assignment search.

    Branch-and-bound over the M**K assignment tree (descending job order,
    load pruning, empty-worker symmetry breaking) visits every assignment
    not provably worse than the incumbent, so the returned value is the true
    optimum. Refuses instances with more than BRUTE_FORCE_CAP assignments.
    """
    if workers < 1 or not times:
        raise ValueError("need at least one job and one worker")
    if workers ** len(times) > BRUTE_FORCE_CAP:
        raise InstanceTooLargeError(
            f"{workers}**{len(times)} assignments exceed the search cap"
        )
    jobs = sorted(times, reverse=True)
    loads = [0.0] * workers
    best = math.inf

    def search(i: int) -> None:
        nonlocal best
        if i == len(jobs):
            best = min(best, max(loads))
            return
        seen_empty = False
        for w in range(workers):
            if loads[w] == 0.0:
                if seen_empty:
                    continue  # identical to the previous empty worker
                seen_empty = True
            if loads[w] + jobs[i] >= best:
                continue
            loads[w] += jobs[i]
            search(i + 1)
            loads[w] -= jobs[i]

    search(0)
    return best


def lpt_bound(workers: int) -> float:
    """Graham's LPT approximation factor 4/3 - 1/(3M)."""
    return 4.0 / 3.0 - 1.0 / (3.0 * workers)


@dataclass(frozen=True)
class BenchRow:
    strategy: str
    workers: int
    makespan: float
    speedup: float


def _profiled(ids: list[str], times: list[float]) -> list[ClientProfile]:
    return [
        ClientProfile(client_id=cid, speed_ratio=1.0, time=t, profiled=True)
        for cid, t in zip(ids, times)
    ]


def schedule_benchmark(
    num_clients: int = 20,
    workers: tuple[int, ...] = (2, 4),
    num_seeds: int = 100,
    beta: float = 0.5,
    speed_ratios: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0),
    total_samples: int = 2000,
    epochs: int = 1,
    throughput: float = 10000.0,
) -> tuple[list[BenchRow], dict[tuple[str, int], list[float]]]:
    """Compare allocation strategies over seeded heterogeneous instances.

    Each seed draws Dirichlet(beta)-unbalanced shard sizes and uniform speed
    ratios, yielding one per-client time vector; every strategy allocates the
    same vector. Returns aggregate rows (mean makespan, speedup vs. the
    standalone sum) plus the per-seed makespans keyed by (strategy, workers).
    """
    per_seed: dict[tuple[str, int], list[float]] = {}
    standalone_total = 0.0
    ids = [f"c{i:02d}" for i in range(num_clients)]
    for seed in range(num_seeds):
        np_rng = np.random.default_rng(seed)
        props = np_rng.dirichlet(np.full(num_clients, beta))
        sizes = np.maximum(1, np.round(props * total_samples).astype(int))
        ratio_rng = random.Random(seed)
        times = [
            (int(size) * epochs / throughput) * ratio_rng.choice(speed_ratios)
            for size in sizes
        ]
        standalone_total += sum(times)
        profiles = _profiled(ids, times)
        for m in workers:
            state = SchedulerState(profiles={p.client_id: p for p in profiles})
            greedy = makespan(greedy_allocate(profiles, m, state))
            rand = makespan(baseline_allocate(profiles, m, "random", random.Random(seed + 1)))
            slow = makespan(baseline_allocate(profiles, m, "slowest"))
            per_seed.setdefault(("greedyada", m), []).append(greedy)
            per_seed.setdefault(("random", m), []).append(rand)
            per_seed.setdefault(("slowest", m), []).append(slow)
    standalone_mean = standalone_total / num_seeds
    rows = [BenchRow("standalone", 1, standalone_mean, 1.0)]
    for (strategy, m), values in sorted(per_seed.items()):
        mean = sum(values) / len(values)
        rows.append(BenchRow(strategy, m, mean, standalone_mean / mean))
    return rows, per_seed


def benchmark_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["strategy", "workers", "makespan", "speedup"])
    for row in rows:
        writer.writerow([row.strategy, row.workers, f"{row.makespan:.6f}", f"{row.speedup:.4f}"])
    return buf.getvalue()
