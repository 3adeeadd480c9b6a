"""Reference systems modeled in the same cost framework.

- ``static-ep``: classic expert parallelism, one slot per expert, tokens
  above ``capacity_factor * total / N`` per expert are dropped.
- ``full-replicate``: every step the ``top_k`` most loaded experts get a
  replica on every GPU (shadowing); they pay the full AllReduce.
- ``strict-rebalance``: static placement, but demand is rewritten so every
  GPU receives the same number of tokens; the rewritten tokens are counted
  as reassigned (they no longer reach the expert their gate picked).
- ``flex``: the dynamic placement engine.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from .costmodel import step_cost
from .placement import Placement, expand, initial_placement
from .policy import balance_ratio
from .rounding import largest_remainder
from .router import route
from .simengine import GroupCache, SimConfig, StepReport, group_overhead, run
from .topology import ClusterTopology
from .workload import TokenDemand


class BaselineKind(enum.Enum):
    STATIC_EP = "static-ep"
    FULL_REPLICATE = "full-replicate"
    STRICT_REBALANCE = "strict-rebalance"
    FLEX = "flex"


def capped_demand(d: TokenDemand, capacity_factor: float) -> tuple[TokenDemand, int]:
    """Drop each expert's tokens above ``capacity_factor`` x its fair share."""
    if capacity_factor <= 0:
        raise ValueError("capacity_factor must be > 0")
    if math.isinf(capacity_factor):
        return d, 0
    D = d.demand
    cap = int(math.floor(capacity_factor * d.total / d.num_experts))
    kept = D.copy()
    for e in np.flatnonzero(D.sum(axis=1) > cap):
        # sources lose tokens in proportion to what they sent
        kept[e] = largest_remainder(cap, D[e])
    return TokenDemand(d.step, kept), int(D.sum() - kept.sum())


def shadow_placement(d: TokenDemand, base: Placement, topo: ClusterTopology, top_k: int = 1) -> Placement:
    """``base`` plus a replica of each of the ``top_k`` hottest experts on every GPU with room."""
    loads = d.expert_loads()
    hot = sorted(range(d.num_experts), key=lambda e: (-int(loads[e]), e))[:top_k]
    p = base
    for e in hot:
        for g in range(p.num_gpus):
            if not p.counts[e, g] and p.free_slots(g):
                p, _ = expand(p, e, g, topo)
    return p


def equalized_demand(d: TokenDemand, p: Placement) -> tuple[TokenDemand, int]:
    """Rewrite demand so each GPU's hosted experts receive ``total / G`` tokens.

    Needs every expert on exactly one GPU. Returns the rewritten demand and
    the number of tokens moved to a different expert.
    """
    if np.any(p.hosts.sum(axis=1) != 1):
        raise ValueError("equalized demand needs exactly one hosting GPU per expert")
    G = p.num_gpus
    loads = d.expert_loads()
    home = p.hosts.argmax(axis=1)
    shares = largest_remainder(d.total, np.ones(G, dtype=np.int64))
    new_loads = np.zeros_like(loads)
    for g in range(G):
        experts = np.flatnonzero(home == g)
        if experts.size == 0:
            continue  # an idle GPU cannot absorb anything
        w = loads[experts] if loads[experts].sum() else np.ones(experts.size, dtype=np.int64)
        new_loads[experts] = largest_remainder(int(shares[g]), w)
    # GPUs without experts leave tokens unplaced; give them back to the hottest GPU
    short = d.total - int(new_loads.sum())
    if short:
        new_loads[int(np.argmax(loads))] += short
    D = d.demand
    col = D.sum(axis=0)
    out = np.zeros_like(D)
    for e in range(d.num_experts):
        w = D[e] if D[e].sum() else (col if col.sum() else np.ones(G, dtype=np.int64))
        out[e] = largest_remainder(int(new_loads[e]), w)
    reassigned = int(np.maximum(loads - new_loads, 0).sum())
    return TokenDemand(d.step, out), reassigned


def _static_run(trace, topo, cfg, per_step) -> list[StepReport]:
    """Shared loop for baselines that pick their placement and demand per step."""
    cache = GroupCache(cfg.max_live_groups)
    reports = []
    clock = 0.0
    for d in trace:
        p, d_eff, dropped, reassigned = per_step(d)
        plan = route(d_eff, p)
        extra, misses = group_overhead(p, cache, cfg.group_create_latency)
        cost = step_cost(d_eff, p, plan, topo, extra_sync_s=extra)
        clock += cost.makespan_s
        reports.append(
            StepReport(
                step=d.step,
                clock_s=clock,
                makespan_s=cost.makespan_s,
                breakdown=cost,
                balance_ratio=balance_ratio(d_eff, p, plan) if d_eff.total else 1.0,
                plan_applied=(),
                ops_completed=0,
                pending_ops=0,
                adjust_bytes=0.0,
                group_misses=misses,
                slots_utilization=p.utilization(),
                tokens_dropped=dropped,
                replica_counts=tuple(int(c) for c in p.counts.sum(axis=1)),
                tokens_reassigned=reassigned,
            )
        )
    return reports


def run_baseline(
    kind: BaselineKind,
    trace: Sequence[TokenDemand],
    topo: ClusterTopology,
    cfg: SimConfig | None = None,
    capacity_factor: float = 1.0,
    replicate_top: int = 1,
) -> list[StepReport]:
    cfg = cfg or SimConfig()
    cfg.validate()
    if kind is BaselineKind.FLEX:
        return run(trace, topo, cfg)
    if not trace:
        return []
    base = initial_placement(trace[0].num_experts, topo)

    if kind is BaselineKind.STATIC_EP:
        def per_step(d):
            kept, dropped = capped_demand(d, capacity_factor)
            return base, kept, dropped, 0
    elif kind is BaselineKind.FULL_REPLICATE:
        if replicate_top < 1:
            raise ValueError("replicate_top must be >= 1")

        def per_step(d):
            return shadow_placement(d, base, topo, replicate_top), d, 0, 0
    elif kind is BaselineKind.STRICT_REBALANCE:
        def per_step(d):
            even, moved = equalized_demand(d, base)
            return base, even, 0, moved
    else:  # pragma: no cover
        raise ValueError(kind)
    return _static_run(trace, topo, cfg, per_step)
