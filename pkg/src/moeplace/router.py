"""Locality-first greedy token routing over vExpert replicas.

For each expert ``e`` with total demand ``I_e`` spread over ``n_e`` slots,
every slot should process ``cap_e = I_e / n_e`` tokens. A hosting GPU keeps
up to ``floor(cap_e * n_eg)`` of its own tokens; the residual of every
source is scattered over hosting GPUs in proportion to their remaining
availability. Nothing is ever dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from .placement import Placement
from .rounding import largest_remainder
from .workload import TokenDemand


class RoutingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoutingPlan:
    flows: np.ndarray  # (N, G, G) tokens of expert e moved src -> dst
    dropped: int = 0

    @cached_property
    def received(self) -> np.ndarray:
        """(N, G) tokens of expert e processed on GPU g."""
        return self.flows.sum(axis=1)

    @cached_property
    def gpu_totals(self) -> np.ndarray:
        return self.received.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.flows.sum())

    def remote_tokens(self) -> int:
        diag = np.einsum("egg->", self.flows)
        return int(self.flows.sum() - diag)

    def to_csv_rows(self, step: int = 0) -> list[str]:
        rows = []
        for e, src, dst in zip(*np.nonzero(self.flows)):
            rows.append(f"{step},{e},{src},{dst},{self.flows[e, src, dst]}")
        return rows


PLAN_HEADER = "step,expert,src,dst,tokens"


def received_matrix(plan: RoutingPlan) -> np.ndarray:
    return plan.received


def _route_expert(row: list[int], n: list[int], out: np.ndarray, e: int):
    G = len(row)
    total = sum(row)
    ne = sum(n)
    quota = [total * n[g] // ne for g in range(G)]  # floor(cap_e * n_eg), exact
    local = [min(quota[g], row[g]) for g in range(G)]
    resid = [row[g] - local[g] for g in range(G)]
    for g in range(G):
        if local[g]:
            out[e, g, g] = local[g]
    S = sum(resid)
    if S == 0:
        return

    avail = [quota[g] - local[g] for g in range(G)]
    A = sum(avail)
    take = min(S, A)
    alloc = [int(x) for x in largest_remainder(take, np.array(avail, dtype=np.int64))] if take else [0] * G
    # floor rounding leaves at most (hosting GPUs - 1) tokens unplaced
    recv = [local[g] + alloc[g] for g in range(G)]
    hosting = [g for g in range(G) if n[g]]
    for _ in range(S - take):
        g = min(hosting, key=lambda h: (Fraction(recv[h], n[h]), h))
        alloc[g] += 1
        recv[g] += 1

    # a source that is also a destination serves itself first
    for g in range(G):
        if resid[g] and alloc[g]:
            k = min(resid[g], alloc[g])
            out[e, g, g] += k
            resid[g] -= k
            alloc[g] -= k
    for src in range(G):
        if not resid[src]:
            continue
        split = largest_remainder(resid[src], np.array(alloc, dtype=np.int64))
        for dst in range(G):
            if split[dst]:
                out[e, src, dst] += int(split[dst])
                alloc[dst] -= int(split[dst])


def route(d: TokenDemand, p: Placement) -> RoutingPlan:
    D = d.demand
    if D.shape != (p.num_experts, p.num_gpus):
        raise RoutingError(f"demand shape {D.shape} does not match placement ({p.num_experts}, {p.num_gpus})")
    N, G = D.shape
    counts = p.counts.tolist()
    rows = D.tolist()
    flows = np.zeros((N, G, G), dtype=np.int64)
    for e in range(N):
        if not any(rows[e]):
            continue
        if not any(counts[e]):
            raise RoutingError(f"expert {e} has demand {sum(rows[e])} but no replica")
        _route_expert(rows[e], counts[e], flows, e)

    plan = RoutingPlan(flows)
    # conservation and destination checks are cheap; keep them on every call
    if not np.array_equal(flows.sum(axis=2), D):
        raise AssertionError("router lost or duplicated tokens")
    if np.any(plan.received[~p.hosts] != 0):
        raise AssertionError("router sent tokens to a non-hosting GPU")
    return plan


def check_plan(plan: RoutingPlan, d: TokenDemand, p: Placement):
    """Raise RoutingError if ``plan`` is not a valid no-drop plan for (d, p)."""
    if plan.flows.shape != (p.num_experts, p.num_gpus, p.num_gpus):
        raise RoutingError("plan shape does not match placement")
    if np.any(plan.flows < 0):
        raise RoutingError("negative flow")
    if not np.array_equal(plan.flows.sum(axis=2), d.demand):
        raise RoutingError("routed tokens do not match demand")
    bad = np.argwhere((plan.received != 0) & ~p.hosts)
    if bad.size:
        e, g = bad[0]
        raise RoutingError(f"plan references non-hosting destination: expert {e} on GPU {g}")
