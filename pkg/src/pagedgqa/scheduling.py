"""Grouping-plan selection and least-loaded decode dispatch.

``select_grouping`` turns a coarse hardware profile into a (num_groups,
heads_per_group) factorization of the query heads: high-bandwidth targets
take as many groups as the KV budget allows (more parallelism), while
bandwidth-limited targets take the fewest groups whose per-group head count
still fits the compute units. The rule is a deliberate, testable policy;
swap it without touching callers.

``SchedulerState`` dispatches decode requests to the least-loaded worker
(ties to the lowest id) and services each worker's queue FIFO, one step of
the head request per tick. With unit costs this greedy policy keeps the
max-min load spread at most 1 at every admission.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

__all__ = [
    "Bandwidth",
    "GroupingPlan",
    "HardwareProfile",
    "LoadStats",
    "Request",
    "SchedulerState",
    "WorkerState",
    "select_grouping",
]


class Bandwidth(enum.Enum):
    HIGH = "high"
    LIMITED = "limited"


@dataclass(frozen=True)
class HardwareProfile:
    """Coarse description of the execution target."""

    compute_units: int
    bandwidth_class: Bandwidth
    memory_bytes: int

    def __post_init__(self) -> None:
        if self.compute_units < 1:
            raise ValueError(f"compute_units must be positive, got {self.compute_units}")
        if self.memory_bytes < 1:
            raise ValueError(f"memory_bytes must be positive, got {self.memory_bytes}")


@dataclass(frozen=True)
class GroupingPlan:
    """A divisor pair: num_groups KV groups of heads_per_group query heads."""

    num_groups: int
    heads_per_group: int

    def __post_init__(self) -> None:
        if self.num_groups < 1 or self.heads_per_group < 1:
            raise ValueError(
                f"plan extents must be positive, got "
                f"({self.num_groups}, {self.heads_per_group})"
            )


def select_grouping(
    profile: HardwareProfile,
    num_heads: int,
    kv_budget_bytes: int,
    head_size: int,
) -> GroupingPlan:
    """Pick the grouping divisor pair for ``num_heads`` query heads.

    High bandwidth: the largest num_groups whose per-token KV footprint
    (2 * num_groups * head_size * 4 bytes) fits kv_budget_bytes. Limited
    bandwidth: the smallest num_groups whose heads_per_group does not exceed
    the compute units. Deterministic; ties break toward more groups.
    """
    if num_heads < 1:
        raise ValueError(f"num_heads must be positive, got {num_heads}")
    if head_size < 1:
        raise ValueError(f"head_size must be positive, got {head_size}")
    divisors = [g for g in range(1, num_heads + 1) if num_heads % g == 0]
    if profile.bandwidth_class is Bandwidth.HIGH:
        feasible = [g for g in divisors if 2 * g * head_size * 4 <= kv_budget_bytes]
        if not feasible:
            raise ValueError(
                f"no group count fits a KV budget of {kv_budget_bytes} bytes "
                f"(smallest option needs {2 * head_size * 4})"
            )
        groups = max(feasible)
    else:
        feasible = [g for g in divisors if num_heads // g <= profile.compute_units]
        groups = min(feasible)
    return GroupingPlan(num_groups=groups, heads_per_group=num_heads // groups)


@dataclass
class Request:
    """One decode job: finishes after remaining_steps service ticks."""

    id: int
    seq_id: int
    remaining_steps: int
    cost: float = 1.0

    def __post_init__(self) -> None:
        if self.remaining_steps < 0:
            raise ValueError(f"remaining_steps must be >= 0, got {self.remaining_steps}")
        if self.cost <= 0:
            raise ValueError(f"cost must be positive, got {self.cost}")


@dataclass
class WorkerState:
    """One worker: FIFO queue of requests plus its summed cost load."""

    id: int
    queue: deque[Request] = field(default_factory=deque)

    @property
    def load(self) -> float:
        return sum(r.cost for r in self.queue)


@dataclass(frozen=True)
class LoadStats:
    max_load: float
    min_load: float
    imbalance: float


class SchedulerState:
    """Least-loaded dispatch over a fixed set of workers."""

    def __init__(self, num_workers: int) -> None:
        if num_workers < 1:
            raise ValueError(f"num_workers must be positive, got {num_workers}")
        self.workers = [WorkerState(id=i) for i in range(num_workers)]
        self._seen_ids: set[int] = set()

    def admit(self, request: Request) -> int:
        """Queue a request on the least-loaded worker; return the worker id.

        Ties break toward the lowest worker id, so placement is a pure
        function of the admission history.
        """
        if request.id in self._seen_ids:
            raise ValueError(f"duplicate request id {request.id}")
        self._seen_ids.add(request.id)
        target = min(self.workers, key=lambda w: (w.load, w.id))
        target.queue.append(request)
        return target.id

    def step(self) -> list[int]:
        """Service one tick: each nonempty worker advances its head request.

        Returns the ids of requests that completed this tick, in worker-id
        order.
        """
        completed = []
        for worker in self.workers:
            if not worker.queue:
                continue
            head = worker.queue[0]
            if head.remaining_steps > 0:
                head.remaining_steps -= 1
            if head.remaining_steps == 0:
                worker.queue.popleft()
                completed.append(head.id)
        return completed

    def pending(self) -> int:
        """Number of requests still queued across all workers."""
        return sum(len(w.queue) for w in self.workers)

    def load_stats(self) -> LoadStats:
        loads = [w.load for w in self.workers]
        return LoadStats(
            max_load=max(loads),
            min_load=min(loads),
            imbalance=max(loads) - min(loads),
        )
