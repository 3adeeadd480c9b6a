"""Step-by-step simulation of dynamic expert placement over a demand trace.

Each step:

1. pending adjustments drain in the background against a bandwidth budget
   (``adjust_bandwidth_fraction`` of the previous step's makespan); ops whose
   transfers have finished are applied to the live placement in queue order;
2. the step's demand is routed over the live placement and costed;
3. the balance trigger is evaluated on the *projected* placement (live plus
   everything still queued), and if it fires the planner runs until the
   trigger clears or no plan helps; accepted ops are queued;
4. at most one sync-reducing migration is queued.

The engine is deterministic: the same trace, topology and config give the
same reports.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .costmodel import StepCostBreakdown, step_cost
from .placement import Placement, PlacementOp, Transfer, apply_op, initial_placement
from .policy import (
    DEFAULT_HORIZON,
    BalanceMetric,
    balance_ratio,
    plan_migrations,
    rebalance,
    variance_metric,
)
from .router import RoutingPlan, route
from .topology import ClusterTopology
from .workload import TokenDemand

CSV_SCHEMA = "1"
DEFAULT_THRESHOLD = 1.1
DEFAULT_GROUP_LATENCY = 5e-3


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyMode:
    kind: str = "dynamic"  # dynamic | interval | static
    interval: int = 1

    def __post_init__(self):
        if self.kind not in ("dynamic", "interval", "static"):
            raise SimError(f"unknown policy mode {self.kind!r}")
        if self.interval < 1:
            raise SimError("interval must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "PolicyMode":
        """``dynamic``, ``static`` or ``interval:K``."""
        if text in ("dynamic", "static"):
            return cls(text)
        if text.startswith("interval:"):
            try:
                k = int(text.split(":", 1)[1])
            except ValueError:
                raise SimError(f"bad interval in {text!r}") from None
            return cls("interval", k)
        raise SimError(f"unknown policy mode {text!r}")

    def __str__(self):
        return f"interval:{self.interval}" if self.kind == "interval" else self.kind

    def plans_at(self, step: int) -> bool:
        if self.kind == "static":
            return False
        if self.kind == "interval":
            return step % self.interval == 0
        return True


@dataclass(frozen=True)
class SimConfig:
    threshold: float = DEFAULT_THRESHOLD
    metric: BalanceMetric = BalanceMetric.MAX_RATIO
    policy_mode: PolicyMode = field(default_factory=PolicyMode)
    horizon: int = DEFAULT_HORIZON
    adjust_bandwidth_fraction: float = 0.5
    max_live_groups: int = 64
    group_create_latency: float = DEFAULT_GROUP_LATENCY
    candidates: int = 4
    migrations: bool = True
    seed: int = 0  # the engine draws no random numbers; kept for provenance

    def validate(self):
        if not self.threshold > 1:
            raise SimError("threshold must be > 1")
        if self.horizon < 1:
            raise SimError("horizon must be >= 1")
        if not 0 < self.adjust_bandwidth_fraction <= 1:
            raise SimError("adjust_bandwidth_fraction must be in (0, 1]")
        if self.max_live_groups < 1:
            raise SimError("max_live_groups must be >= 1")
        if self.group_create_latency < 0:
            raise SimError("group_create_latency must be >= 0")
        if self.candidates < 1:
            raise SimError("candidates must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["policy_mode"] = str(self.policy_mode)
        return d


def trigger_value(cfg: SimConfig, d: TokenDemand, p: Placement, plan: RoutingPlan) -> float:
    """Balance signal on the balance-ratio scale.

    The variance metric is mapped to ``1 + stddev / mean`` so that one
    threshold serves both metrics.
    """
    if cfg.metric is BalanceMetric.MAX_RATIO:
        return balance_ratio(d, p, plan)
    mean = plan.gpu_totals.mean()
    return 1.0 + float(np.sqrt(variance_metric(d, p, plan)) / mean) if mean else 1.0


# ---------------------------------------------------------------- adjustments


@dataclass
class PendingTransfer:
    src: int
    dst: int
    remaining: float  # bytes
    expert: int = -1


@dataclass
class PendingOp:
    op: PlacementOp
    transfers: list[PendingTransfer]

    @property
    def done(self) -> bool:
        return all(t.remaining <= 0 for t in self.transfers)


@dataclass
class MergedTransfer:
    src: int
    dst: int
    parts: list[PendingTransfer]

    @property
    def remaining(self) -> float:
        return sum(t.remaining for t in self.parts)


class AdjustmentQueue:
    """FIFO of planned ops and their outstanding state transfers."""

    def __init__(self):
        self.items: list[PendingOp] = []

    def __len__(self):
        return len(self.items)

    def push(self, op: PlacementOp, transfers: Iterable[Transfer]):
        self.items.append(
            PendingOp(op, [PendingTransfer(t.src, t.dst, float(t.nbytes), t.expert) for t in transfers])
        )

    def pending_bytes(self) -> float:
        return sum(t.remaining for item in self.items for t in item.transfers)

    def pop_completed(self) -> list[PlacementOp]:
        """Remove and return the leading run of finished ops."""
        out = []
        while self.items and self.items[0].done:
            out.append(self.items.pop(0).op)
        return out


def merge_ops(queue: AdjustmentQueue) -> list[list[MergedTransfer]]:
    """Group outstanding transfers into sequential stages of concurrent ones.

    Consecutive transfers over the same (src, dst) coalesce into one; a
    transfer joins the current stage only if it shares no endpoint with
    anything already in it, otherwise it opens the next stage.
    """
    flat = [t for item in queue.items for t in item.transfers if t.remaining > 0]
    merged: list[MergedTransfer] = []
    for t in flat:
        if merged and (merged[-1].src, merged[-1].dst) == (t.src, t.dst):
            merged[-1].parts.append(t)
        else:
            merged.append(MergedTransfer(t.src, t.dst, [t]))
    stages: list[list[MergedTransfer]] = []
    busy: set[int] = set()
    for m in merged:
        if not stages or m.src in busy or m.dst in busy:
            stages.append([])
            busy = set()
        stages[-1].append(m)
        busy |= {m.src, m.dst}
    return stages


def best_effort_drain(queue: AdjustmentQueue, available_seconds: float, topo: ClusterTopology) -> tuple[list[PlacementOp], float]:
    """Spend up to ``available_seconds`` of link time on queued transfers.

    Stages run one after another; inside a stage every link drains in
    parallel. Returns the ops that are now complete (in queue order) and the
    number of bytes moved.
    """
    budget = float(available_seconds)
    moved = 0.0
    for stage in merge_ops(queue):
        if budget <= 0:
            break
        stage_time = 0.0
        for m in stage:
            bw = topo.bandwidth(m.src, m.dst)
            need = m.remaining / bw
            stage_time = max(stage_time, min(need, budget))
            room = budget * bw
            for part in m.parts:
                k = min(part.remaining, room)
                part.remaining -= k
                room -= k
                moved += k
        budget -= stage_time
        if any(m.remaining > 0 for m in stage):
            break  # budget ran out inside this stage
    return queue.pop_completed(), moved


# ------------------------------------------------------------- collectives


def sync_groups(p: Placement) -> dict[int, tuple[int, ...]]:
    """Expert -> GPUs in its AllReduce group, for replicated experts only."""
    return {e: p.replica_gpus(e) for e in range(p.num_experts) if int(p.hosts[e].sum()) > 1}


def collective_order(p: Placement) -> list[list[int]]:
    """Per GPU, the experts whose AllReduce it joins, in ascending id."""
    groups = sync_groups(p)
    order: list[list[int]] = [[] for _ in range(p.num_gpus)]
    for e in sorted(groups):
        for g in groups[e]:
            order[g].append(e)
    return order


def simulate_collectives(order: Sequence[Sequence[int]], groups: dict[int, Sequence[int]]) -> bool:
    """Run blocking collectives; True if every GPU finishes its list.

    A collective fires once every member GPU has it at the head of its
    list. Stalling with work left is a deadlock.
    """
    heads = [0] * len(order)
    remaining = sum(len(o) for o in order)
    while remaining:
        fired = False
        for e, members in groups.items():
            if all(heads[g] < len(order[g]) and order[g][heads[g]] == e for g in members):
                for g in members:
                    heads[g] += 1
                remaining -= len(members)
                fired = True
        if not fired:
            return False
    return True


def check_deadlock_free(p: Placement) -> bool:
    return simulate_collectives(collective_order(p), sync_groups(p))


class GroupCache:
    """LRU set of live communicator groups."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise SimError("cache capacity must be >= 1")
        self.capacity = capacity
        self._live: OrderedDict[frozenset, None] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def touch(self, group: Iterable[int]) -> tuple[bool, frozenset | None]:
        """Use ``group``; returns (hit, evicted group or None)."""
        key = frozenset(group)
        if key in self._live:
            self._live.move_to_end(key)
            self.hits += 1
            return True, None
        self.misses += 1
        evicted = None
        if len(self._live) >= self.capacity:
            evicted, _ = self._live.popitem(last=False)
            self.evictions += 1
        self._live[key] = None
        return False, evicted

    def __contains__(self, group) -> bool:
        return frozenset(group) in self._live

    def __len__(self):
        return len(self._live)


def group_overhead(p: Placement, cache: GroupCache, latency: float) -> tuple[np.ndarray, int]:
    """Per-GPU communicator-creation time for this step's sync groups."""
    extra = np.zeros(p.num_gpus)
    misses = 0
    for e, gpus in sorted(sync_groups(p).items()):
        hit, _ = cache.touch(gpus)
        if not hit:
            misses += 1
            extra[list(gpus)] += latency
    return extra, misses


# ------------------------------------------------------------------ reports


@dataclass(frozen=True, eq=False)
class StepReport:
    step: int
    clock_s: float
    makespan_s: float
    breakdown: StepCostBreakdown
    balance_ratio: float
    plan_applied: tuple[PlacementOp, ...]  # ops queued by the planner this step
    ops_completed: int
    pending_ops: int
    adjust_bytes: float
    group_misses: int
    slots_utilization: float
    tokens_dropped: int
    replica_counts: tuple[int, ...]
    tokens_reassigned: int = 0

    @property
    def step_time_s(self) -> float:
        return self.makespan_s + self.breakdown.adjust_s


CSV_COLUMNS = (
    "schema",
    "step",
    "clock_s",
    "makespan_s",
    "compute_s",
    "a2a_s",
    "sync_s",
    "adjust_s",
    "balance_ratio",
    "ops_planned",
    "ops_completed",
    "pending_ops",
    "adjust_bytes",
    "group_misses",
    "slots_utilization",
    "tokens_dropped",
    "tokens_reassigned",
    "replica_counts",
)


def report_row(r: StepReport) -> list[str]:
    # components of the slowest GPU, so they add up to the makespan
    g = r.breakdown.straggler
    b = r.breakdown
    return [
        CSV_SCHEMA,
        str(r.step),
        repr(r.clock_s),
        repr(r.makespan_s),
        repr(float(b.compute_s[g])),
        repr(float(b.a2a_s[g])),
        repr(float(b.sync_s[g])),
        repr(float(b.adjust_s)),
        repr(r.balance_ratio),
        str(len(r.plan_applied)),
        str(r.ops_completed),
        str(r.pending_ops),
        repr(float(r.adjust_bytes)),
        str(r.group_misses),
        repr(r.slots_utilization),
        str(r.tokens_dropped),
        str(r.tokens_reassigned),
        ";".join(str(c) for c in r.replica_counts),
    ]


def reports_to_csv(reports: Sequence[StepReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(report_row(r))
    return buf.getvalue()


def summarize(reports: Sequence[StepReport], skip: int = 0) -> dict:
    """Aggregate a report stream; ``skip`` drops warm-up steps from the balance mean."""
    if not reports:
        raise SimError("no reports to summarize")
    times = np.array([r.step_time_s for r in reports])
    ratios = np.array([r.balance_ratio for r in reports])
    tail = ratios[skip:] if skip < len(ratios) else ratios
    return {
        "steps": len(reports),
        "mean_makespan_s": float(times.mean()),
        "max_makespan_s": float(times.max()),
        "total_time_s": float(reports[-1].clock_s),
        "mean_balance_ratio": float(ratios.mean()),
        "mean_balance_ratio_tail": float(tail.mean()),
        "total_adjust_bytes": float(sum(r.adjust_bytes for r in reports)),
        "ops_planned": int(sum(len(r.plan_applied) for r in reports)),
        "tokens_dropped": int(sum(r.tokens_dropped for r in reports)),
        "tokens_reassigned": int(sum(r.tokens_reassigned for r in reports)),
        "group_misses": int(sum(r.group_misses for r in reports)),
    }


# ------------------------------------------------------------------- engine


def run(
    trace: Sequence[TokenDemand],
    topo: ClusterTopology,
    cfg: SimConfig | None = None,
    placement: Placement | None = None,
    on_step: Callable[[StepReport, Placement], None] | None = None,
) -> list[StepReport]:
    """Simulate ``trace`` from ``placement`` (default: one slot per expert)."""
    cfg = cfg or SimConfig()
    cfg.validate()
    if not trace:
        return []
    N = trace[0].num_experts
    if trace[0].num_gpus != topo.num_gpus:
        raise SimError(f"trace has {trace[0].num_gpus} GPU columns, topology has {topo.num_gpus} GPUs")
    current = placement if placement is not None else initial_placement(N, topo)
    current.check()
    target = current
    queue = AdjustmentQueue()
    cache = GroupCache(cfg.max_live_groups)
    migration_memo: dict[bytes, list[PlacementOp]] = {}

    reports: list[StepReport] = []
    clock = 0.0
    prev_makespan = 0.0
    for d in trace:
        if d.demand.shape != (N, topo.num_gpus):
            raise SimError(f"step {d.step}: demand shape {d.demand.shape} changed mid-trace")
        # (1) background adjustments
        done, moved = best_effort_drain(queue, cfg.adjust_bandwidth_fraction * prev_makespan, topo)
        for op in done:
            current, _ = apply_op(current, op, topo)

        # (2) route and cost on the live placement
        plan = route(d, current)
        extra, misses = group_overhead(current, cache, cfg.group_create_latency)
        cost = step_cost(d, current, plan, topo, extra_sync_s=extra)
        makespan = cost.makespan_s
        clock += makespan + cost.adjust_s
        ratio = balance_ratio(d, current, plan)

        # (3)-(4) plan against the projected placement
        queued: list[PlacementOp] = []
        if cfg.policy_mode.plans_at(len(reports)):
            base = target
            if trigger_value(cfg, d, target, route(d, target)) > cfg.threshold:
                target, ops = _rebalance(d, target, topo, cfg)
                queued.extend(ops)
            if cfg.migrations:
                key = target.key()
                if key not in migration_memo:
                    migration_memo[key] = plan_migrations(target, topo, cfg.horizon)
                queued.extend(migration_memo[key])
                for op in migration_memo[key]:
                    target, _ = apply_op(target, op, topo)
            # replay from the planning base to get each op's transfers
            q = base
            for op in queued:
                q, transfers = apply_op(q, op, topo)
                queue.push(op, transfers)

        report = StepReport(
            step=d.step,
            clock_s=clock,
            makespan_s=makespan,
            breakdown=cost,
            balance_ratio=ratio,
            plan_applied=tuple(queued),
            ops_completed=len(done),
            pending_ops=len(queue),
            adjust_bytes=moved,
            group_misses=misses,
            slots_utilization=current.utilization(),
            tokens_dropped=0,
            replica_counts=tuple(int(c) for c in current.counts.sum(axis=1)),
        )
        reports.append(report)
        if on_step is not None:
            on_step(report, current)
        prev_makespan = makespan
    return reports


def _rebalance(d, target, topo, cfg):
    if cfg.metric is BalanceMetric.MAX_RATIO:
        return rebalance(d, target, topo, cfg.threshold, BalanceMetric.MAX_RATIO, cfg.horizon, cfg.candidates)
    # the variance trigger lives on the ratio scale, so loop here
    applied = []
    for _ in range(4 * target.slots.size + 16):
        if trigger_value(cfg, d, target, route(d, target)) <= cfg.threshold:
            break
        target, ops = rebalance(d, target, topo, -np.inf, BalanceMetric.MAX_RATIO, cfg.horizon, cfg.candidates, max_rounds=1)
        if not ops:
            break
        applied.extend(ops)
    return target, applied
