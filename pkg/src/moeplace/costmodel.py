"""Per-step training-time model of one MoE layer.

Each GPU's time is the sum, over the experts it hosts, of expert compute,
all-to-all receive time and gradient AllReduce time. The step's makespan is
the slowest GPU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .placement import Placement, Transfer
from .router import RoutingError, RoutingPlan
from .topology import ClusterTopology, group_bps
from .workload import TokenDemand

# dispatch + combine in forward, mirrored in backward
A2A_CALLS_PER_STEP = 4


@dataclass(frozen=True)
class StepCostBreakdown:
    compute_s: np.ndarray  # (G,)
    a2a_s: np.ndarray  # (G,)
    sync_s: np.ndarray  # (G,)
    adjust_s: float = 0.0

    @property
    def per_gpu(self) -> np.ndarray:
        return self.compute_s + self.a2a_s + self.sync_s

    @property
    def makespan_s(self) -> float:
        return float(self.per_gpu.max())

    @property
    def straggler(self) -> int:
        return int(np.argmax(self.per_gpu))


def compute_cost(tokens, topo: ClusterTopology):
    return tokens / topo.tps


def a2a_cost(plan: RoutingPlan, e: int, g: int, topo: ClusterTopology) -> float:
    """All-to-all time charged to GPU ``g`` for the tokens of expert ``e`` it receives."""
    incoming = plan.flows[e, :, g]
    t = 0.0
    for src in np.flatnonzero(incoming):
        if src != g:
            t += incoming[src] * topo.token_bytes / topo.bandwidth(int(src), g)
    return A2A_CALLS_PER_STEP * t


def sync_cost(p: Placement, e: int, topo: ClusterTopology) -> float:
    gpus = p.replica_gpus(e)
    if len(gpus) <= 1:
        return 0.0
    return topo.expert_param_bytes / group_bps(topo, gpus)


def adjust_cost(transfer: Transfer | None, topo: ClusterTopology) -> float:
    if transfer is None or transfer.src == transfer.dst:
        return 0.0
    return transfer.nbytes / topo.bandwidth(transfer.src, transfer.dst)


def sync_costs(p: Placement, topo: ClusterTopology) -> np.ndarray:
    """(N,) AllReduce time per expert."""
    out = np.zeros(p.num_experts)
    groups = p.hosts.sum(axis=1)
    for e in np.flatnonzero(groups > 1):
        out[e] = topo.expert_param_bytes / group_bps(topo, np.flatnonzero(p.hosts[e]))
    return out


def step_cost(
    d: TokenDemand,
    p: Placement,
    plan: RoutingPlan,
    topo: ClusterTopology,
    adjust_s: float = 0.0,
    extra_sync_s: np.ndarray | None = None,
) -> StepCostBreakdown:
    """Evaluate the step-time model for a routed demand on a placement.

    ``extra_sync_s`` adds per-GPU sync overhead (e.g. communicator
    creation) on top of the AllReduce estimate.
    """
    recv = plan.received
    if recv.shape != p.hosts.shape:
        raise RoutingError("plan shape does not match placement")
    bad = np.argwhere((recv != 0) & ~p.hosts)
    if bad.size:
        e, g = bad[0]
        raise RoutingError(f"plan references non-hosting destination: expert {e} on GPU {g}")

    compute = recv.sum(axis=0) / topo.tps
    # sum over e, src of flows[e, src, g] / bw(src, g); diagonal of inv_bandwidth is 0
    remote = np.einsum("esg,sg->g", plan.flows, topo.inv_bandwidth)
    a2a = A2A_CALLS_PER_STEP * topo.token_bytes * remote
    sync = p.hosts.T.astype(np.float64) @ sync_costs(p, topo)
    if extra_sync_s is not None:
        sync = sync + extra_sync_s
    return StepCostBreakdown(compute, a2a, sync, adjust_s)
