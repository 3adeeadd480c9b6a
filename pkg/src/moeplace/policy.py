"""Balance metrics and cost-model-driven placement planning."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
import numpy as np

from .costmodel import A2A_CALLS_PER_STEP, adjust_cost, step_cost, sync_costs
from .placement import (
    UNASSIGNED,
    Placement,
    PlacementOp,
    apply_op,
)
from .router import RoutingPlan, _route_expert, route
from .topology import ClusterTopology, group_bps
from .workload import TokenDemand

DEFAULT_HORIZON = 50

SchedulingPlan = list[PlacementOp]


class BalanceMetric(enum.Enum):
    MAX_RATIO = "max"
    VARIANCE = "variance"


def balance_ratio(d: TokenDemand, p: Placement, plan: RoutingPlan) -> float:
    """Max per-GPU token load over the mean per-GPU load."""
    totals = plan.gpu_totals
    total = int(totals.sum())
    if total == 0:
        raise ValueError("balance ratio undefined for zero tokens")
    return float(totals.max() * len(totals) / total)


def variance_metric(d: TokenDemand, p: Placement, plan: RoutingPlan) -> float:
    """Population variance of per-GPU token loads."""
    totals = plan.gpu_totals.astype(np.float64)
    return float(np.mean((totals - totals.mean()) ** 2))


def metric_value(kind: BalanceMetric, d: TokenDemand, p: Placement, plan: RoutingPlan) -> float:
    if kind is BalanceMetric.MAX_RATIO:
        return balance_ratio(d, p, plan)
    return variance_metric(d, p, plan)


def leximax_less(a: np.ndarray, b: np.ndarray) -> bool:
    """True if ``a`` sorted descending is lexicographically below ``b``.

    The first entry is the makespan, so this never accepts a worse
    makespan; on a makespan tie it prefers relieving the next-slowest GPU.
    """
    for x, y in zip(np.sort(a)[::-1], np.sort(b)[::-1]):
        if x != y:
            return x < y
    return False


class _Scorer:
    """Per-GPU step time kept as a sum of independent per-expert terms.

    Routing is decided expert by expert, so a candidate move only needs the
    experts it touches re-routed. Scores are for ranking; accepted plans are
    re-checked with the full cost model.
    """

    def __init__(self, d: TokenDemand, p: Placement, topo: ClusterTopology, horizon: int, cache: dict):
        self.rows = d.demand.tolist()
        self.topo = topo
        self.horizon = horizon
        self.G = p.num_gpus
        self.k_a2a = A2A_CALLS_PER_STEP * topo.token_bytes
        self.cache = cache
        self.counts = p.counts.tolist()
        self.base = [self.term(e, tuple(row)) for e, row in enumerate(self.counts)]
        self.t = np.sum(self.base, axis=0)

    def term(self, e: int, n: tuple[int, ...]) -> np.ndarray:
        key = (e, n)
        v = self.cache.get(key)
        if v is None:
            G, topo = self.G, self.topo
            out = np.zeros((1, G, G), dtype=np.int64)
            if any(self.rows[e]):
                _route_expert(self.rows[e], list(n), out, 0)
            f = out[0]
            v = f.sum(axis=0) / topo.tps + self.k_a2a * (f * topo.inv_bandwidth).sum(axis=0)
            hosting = [g for g in range(G) if n[g]]
            if len(hosting) > 1:
                v[hosting] += topo.expert_param_bytes / group_bps(topo, hosting)
            self.cache[key] = v
        return v

    def score(self, move: "_Move") -> np.ndarray:
        t = self.t.copy()
        for e, n in move.changes.items():
            t += self.term(e, n) - self.base[e]
        for src, dst in move.transfers:
            amortized = self.topo.expert_state_bytes / self.topo.bandwidth(src, dst) / self.horizon
            t[src] += amortized
            t[dst] += amortized
        return t


@dataclass
class _Move:
    ops: SchedulingPlan
    changes: dict  # expert -> new slot-count row
    transfers: list  # (src, dst)


def _expand_move(counts, topo, e: int, g: int, changes=None, ops=None) -> _Move:
    changes = dict(changes or {})
    row = list(changes.get(e, counts[e]))
    transfers = []
    if row[g] == 0:
        src = min((h for h in range(len(row)) if row[h]), key=lambda h: (-topo.bandwidth(h, g), h))
        transfers.append((src, g))
    row[g] += 1
    changes[e] = tuple(row)
    return _Move(list(ops or []) + [PlacementOp.expand(e, g)], changes, transfers)


def _shrink_expand_move(counts, topo, e1: int, victim: int, e0: int, g: int) -> _Move:
    row = list(counts[e1])
    row[victim] -= 1
    return _expand_move(counts, topo, e0, g, {e1: tuple(row)}, [PlacementOp.shrink(e1, victim)])


def _swap_move(p: Placement, counts, a_slot: tuple[int, int], b_slot: tuple[int, int]) -> _Move:
    (ga, ka), (gb, kb) = a_slot, b_slot
    a, b = int(p.slots[ga, ka]), int(p.slots[gb, kb])
    ra, rb = list(counts[a]), list(counts[b])
    transfers = []
    if ra[gb] == 0:
        transfers.append((ga, gb))
    if rb[ga] == 0:
        transfers.append((gb, ga))
    ra[ga] -= 1
    ra[gb] += 1
    rb[gb] -= 1
    rb[ga] += 1
    return _Move([PlacementOp.migrate(a_slot, b_slot)], {a: tuple(ra), b: tuple(rb)}, transfers)


def _hot_cold(d: TokenDemand, p: Placement):
    loads = d.expert_loads().tolist()
    n = p.counts.sum(axis=1).tolist()
    caps = [Fraction(loads[e], n[e]) for e in range(p.num_experts)]
    # ties -> lowest expert id
    hot = sorted(range(p.num_experts), key=lambda e: (-caps[e], e))
    cold = sorted(range(p.num_experts), key=lambda e: (caps[e], e))
    return hot, cold


def _primary_move(d, p, topo, totals) -> _Move | None:
    """The argmax / argmin pair: expand the hottest expert into the least
    loaded free slot, first shrinking the coldest one on its most loaded
    GPU when no slot is free."""
    hot, cold = _hot_cold(d, p)
    counts = p.counts.tolist()
    e0, e1 = hot[0], cold[0]
    free = p.free_slot_counts()
    if free.any():
        targets = np.flatnonzero(free)
        return _expand_move(counts, topo, e0, int(targets[np.argmin(totals[targets])]))
    if e0 == e1 or p.replica_count(e1) < 2:
        return None
    hosting = np.flatnonzero(p.counts[e1])
    victim = int(hosting[np.argmax(totals[hosting])])
    # only the freed slot is free now
    return _shrink_expand_move(counts, topo, e1, victim, e0, victim)


def _neighborhood(d: TokenDemand, p: Placement, topo: ClusterTopology, straggler: int, candidates: int) -> list[_Move]:
    """Expands of hot experts (or shrink-then-expand when every slot is
    taken) plus slot swaps that touch the slowest GPU."""
    hot, cold = _hot_cold(d, p)
    counts = p.counts.tolist()
    G = p.num_gpus
    on_straggler = [e for e in hot if counts[e][straggler]]
    hot_set = list(dict.fromkeys(hot[:candidates] + on_straggler))
    free = p.free_slot_counts().tolist()
    moves: list[_Move] = []
    if any(free):
        for e0 in hot_set:
            moves.extend(_expand_move(counts, topo, e0, g) for g in range(G) if free[g])
    else:
        spare = [e for e in cold if sum(counts[e]) >= 2][:candidates]
        for e1 in spare:
            for victim in range(G):
                if not counts[e1][victim]:
                    continue
                for e0 in hot_set:
                    if e0 != e1:
                        moves.append(_shrink_expand_move(counts, topo, e1, victim, e0, victim))
    # one representative slot per (expert, gpu)
    reps: dict[tuple[int, int], tuple[int, int]] = {}
    for g in range(G):
        for k in range(p.slots_per_gpu):
            e = int(p.slots[g, k])
            if e != UNASSIGNED and (e, g) not in reps:
                reps[(e, g)] = (g, k)
    mine = [(e, g) for (e, g) in reps if g == straggler]
    others = [(e, g) for (e, g) in reps if g != straggler]
    for ea, ga in mine:
        for eb, gb in others:
            if ea != eb:
                moves.append(_swap_move(p, counts, reps[(ea, ga)], reps[(eb, gb)]))
    return moves


def _leximax_key(t: np.ndarray) -> tuple:
    return tuple(np.sort(t)[::-1].tolist())


def _verify(d, p, ops, topo, horizon, t0) -> bool:
    charge = np.zeros(p.num_gpus)
    for op in ops:
        p, transfers = apply_op(p, op, topo)
        for t in transfers:
            amortized = adjust_cost(t, topo) / horizon
            charge[t.src] += amortized
            charge[t.dst] += amortized
    return leximax_less(step_cost(d, p, route(d, p), topo).per_gpu + charge, t0)


def make_scheduling_plan(
    d: TokenDemand,
    p: Placement,
    topo: ClusterTopology,
    horizon: int = DEFAULT_HORIZON,
    candidates: int = 4,
    lookahead: bool = True,
) -> SchedulingPlan:
    """Expand the hottest vExpert, shrinking the coldest one if no slot is free.

    The expert to expand is the one with the largest per-vExpert load
    (``I_e / n_e``), the one to shrink has the smallest. It lands on the
    least loaded GPU with a free slot; a shrink frees a slot on the most
    loaded GPU hosting the cold expert. A plan is accepted if the modeled
    per-GPU times, with each state transfer's time spread over ``horizon``
    steps and charged to its two endpoints, improve in leximax order.

    If that pair does not help, the best improving move among a wider
    neighborhood is taken: expands of the ``candidates`` hottest experts
    and of every expert on the slowest GPU (into any free slot, or after
    shrinking one of the ``candidates`` coldest replicated experts on any
    of its GPUs), and slot swaps between the slowest GPU and the rest.

    With ``lookahead``, when no single move helps, the ``candidates`` best
    non-improving moves are each followed by the best move from the
    resulting placement, and a pair that improves is accepted. Replicating
    a hot expert often only pays off once a second expert follows.
    """
    plan0 = route(d, p)
    cost0 = step_cost(d, p, plan0, topo)
    t0 = cost0.per_gpu
    cache: dict = {}
    scorer = _Scorer(d, p, topo, horizon, cache)

    first = _primary_move(d, p, topo, plan0.gpu_totals)
    if first is not None and _verify(d, p, first.ops, topo, horizon, t0):
        return first.ops

    moves = _neighborhood(d, p, topo, cost0.straggler, candidates)
    if not moves:
        return []
    keys = [_leximax_key(scorer.score(m)) for m in moves]
    order = sorted(range(len(moves)), key=lambda i: keys[i])
    k0 = _leximax_key(scorer.t)
    for i in order[:candidates]:
        if keys[i] < k0 and _verify(d, p, moves[i].ops, topo, horizon, t0):
            return moves[i].ops

    if not lookahead:
        return []
    for i in order[:candidates]:
        ops = moves[i].ops
        q = p
        for op in ops:
            q, _ = apply_op(q, op, topo)
        inner = make_scheduling_plan(d, q, topo, horizon, candidates, lookahead=False)
        # the inner plan only beats q; the pair must beat p
        if inner and _verify(d, p, ops + inner, topo, horizon, t0):
            return ops + inner
    return []


def _group_sync(topo: ClusterTopology, gpus: frozenset[int], cache: dict) -> float:
    if len(gpus) <= 1:
        return 0.0
    v = cache.get(gpus)
    if v is None:
        v = cache[gpus] = topo.expert_param_bytes / group_bps(topo, gpus)
    return v


def sync_costs_total(p: Placement, topo: ClusterTopology) -> float:
    """Sum over experts of their AllReduce time (what migrations minimize)."""
    return float(sync_costs(p, topo).sum())


def plan_migrations(
    p: Placement,
    topo: ClusterTopology,
    horizon: int = DEFAULT_HORIZON,
) -> SchedulingPlan:
    """Best strictly sync-reducing slot swap, or nothing.

    Score of a swap = total AllReduce time saved minus its state-transfer
    time spread over ``horizon`` steps.
    """
    counts = p.counts
    cache: dict = {}
    gpu_sets = [frozenset(np.flatnonzero(counts[e]).tolist()) for e in range(p.num_experts)]
    # one representative slot per (expert, gpu)
    reps: dict[tuple[int, int], tuple[int, int]] = {}
    for g in range(p.num_gpus):
        for k in range(p.slots_per_gpu):
            e = int(p.slots[g, k])
            if e != UNASSIGNED and (e, g) not in reps:
                reps[(e, g)] = (g, k)
    pairs = sorted(reps)
    xfer_s = topo.expert_state_bytes

    def moved(e: int, src: int, dst: int) -> frozenset[int]:
        s = gpu_sets[e]
        if counts[e, src] == 1:
            s = s - {src}
        return s | {dst}

    best_score, best = 0.0, None
    for i, (a, ga) in enumerate(pairs):
        for b, gb in pairs[i + 1:]:
            if a == b or ga == gb:
                continue
            if len(gpu_sets[a]) < 2 and len(gpu_sets[b]) < 2:
                continue  # nothing to consolidate
            before = _group_sync(topo, gpu_sets[a], cache) + _group_sync(topo, gpu_sets[b], cache)
            after = _group_sync(topo, moved(a, ga, gb), cache) + _group_sync(topo, moved(b, gb, ga), cache)
            cost = 0.0
            if counts[a, gb] == 0:
                cost += xfer_s / topo.bandwidth(ga, gb)
            if counts[b, ga] == 0:
                cost += xfer_s / topo.bandwidth(gb, ga)
            score = before - after - cost / horizon
            if score > best_score:
                best_score, best = score, (reps[(a, ga)], reps[(b, gb)])
    if best is None:
        return []
    return [PlacementOp.migrate(*best)]


def rebalance(
    d: TokenDemand,
    p: Placement,
    topo: ClusterTopology,
    threshold: float,
    metric: BalanceMetric = BalanceMetric.MAX_RATIO,
    horizon: int = DEFAULT_HORIZON,
    candidates: int = 4,
    max_rounds: int | None = None,
    lookahead: bool = True,
) -> tuple[Placement, SchedulingPlan]:
    """Ask the planner for expand/shrink steps until balanced or no gain.

    Terminates because every accepted plan strictly lowers the sorted
    per-GPU time vector, so no placement repeats; ``max_rounds`` is only a
    safety net.
    """
    if max_rounds is None:
        max_rounds = 4 * p.slots.size + 16
    applied: SchedulingPlan = []
    plan = route(d, p)
    for _ in range(max_rounds):
        if metric_value(metric, d, p, plan) <= threshold:
            break
        ops = make_scheduling_plan(d, p, topo, horizon, candidates, lookahead)
        if not ops:
            break
        for op in ops:
            p, _ = apply_op(p, op, topo)
        applied.extend(ops)
        plan = route(d, p)
    return p, applied


def converge(
    d: TokenDemand,
    p: Placement,
    topo: ClusterTopology,
    horizon: int = DEFAULT_HORIZON,
    candidates: int = 4,
    lookahead: bool = True,
) -> tuple[Placement, SchedulingPlan]:
    """Run the planner to a fixed point, ignoring any balance threshold."""
    return rebalance(d, p, topo, threshold=-np.inf, horizon=horizon, candidates=candidates, lookahead=lookahead)

