"""vExpert slot pool and the Expand / Shrink / Migrate primitives.

Every GPU owns ``E`` slots; each slot is either free or holds a replica of
one expert. Replicas of the same expert on the same GPU share weights, so
they add capacity without adding a member to the expert's sync group.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

from .topology import ClusterTopology

UNASSIGNED = -1

Slot = tuple[int, int]  # (gpu, slot_index)


class PlacementError(ValueError):
    pass


class OpKind(enum.Enum):
    EXPAND = "expand"
    SHRINK = "shrink"
    MIGRATE = "migrate"


@dataclass(frozen=True)
class Transfer:
    """Point-to-point copy of one expert's model states."""

    src: int
    dst: int
    nbytes: float
    expert: int = -1


@dataclass(frozen=True)
class PlacementOp:
    kind: OpKind
    expert: int = -1
    gpu: int = -1  # expand target / shrink source
    slot_a: Slot | None = None
    slot_b: Slot | None = None

    @classmethod
    def expand(cls, expert: int, gpu: int) -> "PlacementOp":
        return cls(OpKind.EXPAND, expert=expert, gpu=gpu)

    @classmethod
    def shrink(cls, expert: int, gpu: int) -> "PlacementOp":
        return cls(OpKind.SHRINK, expert=expert, gpu=gpu)

    @classmethod
    def migrate(cls, slot_a: Slot, slot_b: Slot) -> "PlacementOp":
        return cls(OpKind.MIGRATE, slot_a=tuple(slot_a), slot_b=tuple(slot_b))

    def __str__(self):
        if self.kind is OpKind.MIGRATE:
            return f"migrate{self.slot_a}<->{self.slot_b}"
        return f"{self.kind.value}(e{self.expert}@g{self.gpu})"


@dataclass(frozen=True, eq=False)
class Placement:
    num_experts: int
    slots: np.ndarray  # (num_gpus, slots_per_gpu) expert id or UNASSIGNED

    def __post_init__(self):
        s = np.array(self.slots, dtype=np.int64)
        if s.ndim != 2:
            raise PlacementError("slots must be a (gpus x slots_per_gpu) matrix")
        if np.any((s < UNASSIGNED) | (s >= self.num_experts)):
            raise PlacementError("slot holds an out-of-range expert id")
        s.setflags(write=False)
        object.__setattr__(self, "slots", s)

    @property
    def num_gpus(self) -> int:
        return self.slots.shape[0]

    @property
    def slots_per_gpu(self) -> int:
        return self.slots.shape[1]

    @cached_property
    def counts(self) -> np.ndarray:
        """(N, G) matrix of slot counts ``n[e, g]``."""
        n = np.zeros((self.num_experts, self.num_gpus), dtype=np.int64)
        g_idx, _ = np.nonzero(self.slots != UNASSIGNED)
        np.add.at(n, (self.slots[self.slots != UNASSIGNED], g_idx), 1)
        n.setflags(write=False)
        return n

    @cached_property
    def hosts(self) -> np.ndarray:
        """(N, G) boolean: GPU g holds at least one replica of e."""
        return self.counts > 0

    def replica_count(self, e: int) -> int:
        return int(self.counts[e].sum())

    def replica_gpus(self, e: int) -> tuple[int, ...]:
        return tuple(int(g) for g in np.flatnonzero(self.counts[e]))

    def replicas(self, e: int) -> list[tuple[int, int]]:
        return [(g, int(self.counts[e, g])) for g in self.replica_gpus(e)]

    def free_slots(self, g: int) -> int:
        return int(np.count_nonzero(self.slots[g] == UNASSIGNED))

    def free_slot_counts(self) -> np.ndarray:
        return np.count_nonzero(self.slots == UNASSIGNED, axis=1)

    def assigned_slots(self) -> int:
        return int(np.count_nonzero(self.slots != UNASSIGNED))

    def utilization(self) -> float:
        return self.assigned_slots() / self.slots.size

    def key(self) -> bytes:
        return self.slots.tobytes()

    def assignment_multiset(self) -> tuple[tuple[int, ...], ...]:
        """Per-GPU sorted slot contents; ignores slot positions."""
        return tuple(tuple(sorted(int(x) for x in row)) for row in self.slots)

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return self.num_experts == other.num_experts and np.array_equal(self.slots, other.slots)

    __hash__ = None

    def check(self):
        """Raise PlacementError unless every expert has at least one slot."""
        missing = np.flatnonzero(self.counts.sum(axis=1) == 0)
        if missing.size:
            raise PlacementError(f"experts without a replica: {missing.tolist()}")

    def _with(self, updates: Iterable[tuple[Slot, int]]) -> "Placement":
        s = self.slots.copy()
        for (g, k), e in updates:
            s[g, k] = e
        return Placement(self.num_experts, s)

    def to_text(self) -> str:
        lines = ["gpu,slot,expert"]
        for g in range(self.num_gpus):
            for k in range(self.slots_per_gpu):
                if self.slots[g, k] != UNASSIGNED:
                    lines.append(f"{g},{k},{self.slots[g, k]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, num_experts: int, num_gpus: int, slots_per_gpu: int) -> "Placement":
        s = np.full((num_gpus, slots_per_gpu), UNASSIGNED, dtype=np.int64)
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "gpu,slot,expert":
            raise PlacementError("missing header 'gpu,slot,expert'")
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                g, k, e = (int(x) for x in line.split(","))
            except ValueError:
                raise PlacementError(f"line {lineno}: malformed record {line!r}") from None
            if not (0 <= g < num_gpus and 0 <= k < slots_per_gpu):
                raise PlacementError(f"line {lineno}: slot ({g}, {k}) out of range")
            s[g, k] = e
        return cls(num_experts, s)


def initial_placement(num_experts: int, topo: ClusterTopology) -> Placement:
    """Classic expert parallelism: expert i on GPU i mod G, one slot each."""
    G, E = topo.num_gpus, topo.vexperts_per_gpu
    if num_experts > G * E:
        raise PlacementError(
            f"insufficient vExpert budget: {num_experts} experts > {G} GPUs x {E} slots"
        )
    if num_experts < 1:
        raise PlacementError("need at least one expert")
    s = np.full((G, E), UNASSIGNED, dtype=np.int64)
    for e in range(num_experts):
        s[e % G, e // G] = e
    return Placement(num_experts, s)


def nearest_replica(p: Placement, e: int, target: int, topo: ClusterTopology) -> int:
    """Existing replica GPU of ``e`` with the highest bandwidth to ``target``."""
    gpus = [g for g in p.replica_gpus(e) if g != target]
    if not gpus:
        raise PlacementError(f"expert {e} has no replica to copy from")
    # max bandwidth, then lowest id
    return min(gpus, key=lambda g: (-topo.bandwidth(g, target), g))


def expand(p: Placement, e: int, target_gpu: int, topo: ClusterTopology) -> tuple[Placement, Transfer | None]:
    free = np.flatnonzero(p.slots[target_gpu] == UNASSIGNED)
    if free.size == 0:
        raise PlacementError(f"no free slot on GPU {target_gpu}")
    if p.replica_count(e) == 0:
        raise PlacementError(f"expert {e} has no replica to copy from")
    transfer = None
    if p.counts[e, target_gpu] == 0:
        src = nearest_replica(p, e, target_gpu, topo)
        transfer = Transfer(src, target_gpu, topo.expert_state_bytes, expert=e)
    return p._with([((target_gpu, int(free[0])), e)]), transfer


def shrink(p: Placement, e: int, source_gpu: int) -> Placement:
    if p.counts[e, source_gpu] == 0:
        raise PlacementError(f"expert {e} has no slot on GPU {source_gpu}")
    if p.replica_count(e) < 2:
        raise PlacementError(f"cannot violate >=1 replica constraint: expert {e} has a single slot")
    k = int(np.flatnonzero(p.slots[source_gpu] == e)[-1])
    return p._with([((source_gpu, k), UNASSIGNED)])


def migrate(
    p: Placement, slot_a: Slot, slot_b: Slot, topo: ClusterTopology
) -> tuple[Placement, tuple[Transfer, ...]]:
    """Swap the experts held by two slots on different GPUs.

    A copy is emitted only toward a GPU that does not already hold the
    incoming expert (weight sharing makes the other direction free).
    """
    (ga, ka), (gb, kb) = slot_a, slot_b
    ea, eb = int(p.slots[ga, ka]), int(p.slots[gb, kb])
    if ea == UNASSIGNED or eb == UNASSIGNED:
        raise PlacementError("migrate needs two assigned slots")
    if ea == eb:
        raise PlacementError(f"both slots hold expert {ea}; swap is a no-op")
    if ga == gb:
        raise PlacementError("slots are on the same GPU; weight sharing makes the swap meaningless")
    transfers = []
    if p.counts[ea, gb] == 0:
        transfers.append(Transfer(ga, gb, topo.expert_state_bytes, expert=ea))
    if p.counts[eb, ga] == 0:
        transfers.append(Transfer(gb, ga, topo.expert_state_bytes, expert=eb))
    return p._with([((ga, ka), eb), ((gb, kb), ea)]), tuple(transfers)


def apply_op(p: Placement, op: PlacementOp, topo: ClusterTopology) -> tuple[Placement, tuple[Transfer, ...]]:
    if op.kind is OpKind.EXPAND:
        q, t = expand(p, op.expert, op.gpu, topo)
        return q, (t,) if t is not None else ()
    if op.kind is OpKind.SHRINK:
        return shrink(p, op.expert, op.gpu), ()
    return migrate(p, op.slot_a, op.slot_b, topo)


def apply_ops(p: Placement, ops: Iterable[PlacementOp], topo: ClusterTopology) -> Placement:
    for op in ops:
        p, _ = apply_op(p, op, topo)
    return p
