"""Exhaustive reference solver for tiny placement instances.

Every slot assignment (up to slot order within a GPU) is enumerated. For a
fixed placement the per-step cost only depends on *which* GPUs host each
expert, so the best token split is searched once per host pattern and
cached. The split search starts from an even per-slot split and from the
locality-first split and descends with token moves between replicas,
halving the move size down to one token; a move is accepted when it lowers
the sorted per-GPU time vector (leximax), which also lets the search walk
along makespan plateaus.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .costmodel import A2A_CALLS_PER_STEP, step_cost
from .placement import UNASSIGNED, Placement, initial_placement
from .policy import DEFAULT_HORIZON, converge
from .rounding import largest_remainder
from .router import RoutingPlan, route
from .topology import ClusterTopology, default_topology, group_bps
from .workload import TokenDemand, TraceGeneratorConfig, generate_trace

MAX_CELLS = 16  # N * G


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleInstance:
    demand: TokenDemand
    topo: ClusterTopology

    def __post_init__(self):
        N, G = self.demand.demand.shape
        if G != self.topo.num_gpus:
            raise OracleError(f"demand has {G} GPU columns, topology has {self.topo.num_gpus} GPUs")
        if N * G > MAX_CELLS:
            raise OracleError(f"instance too large: N*G = {N * G} > {MAX_CELLS}")
        if N > G * self.topo.vexperts_per_gpu:
            raise OracleError(f"insufficient slots: {N} experts > {G} GPUs x {self.topo.vexperts_per_gpu} slots")

    @property
    def num_experts(self) -> int:
        return self.demand.num_experts

    @property
    def num_gpus(self) -> int:
        return self.topo.num_gpus

    @property
    def slots_per_gpu(self) -> int:
        return self.topo.vexperts_per_gpu


@dataclass(frozen=True, eq=False)
class OracleSolution:
    placement: Placement
    split: np.ndarray  # (N, G) tokens of expert e processed on GPU g
    plan: RoutingPlan
    objective: float  # seconds
    placements_checked: int = field(default=0, compare=False)


def _gpu_rows(N: int, E: int) -> list[tuple[int, ...]]:
    rows = []
    for k in range(E + 1):
        rows.extend(itertools.combinations_with_replacement(range(N), k))
    return rows


def enumerate_placements(N: int, G: int, E: int):
    """Yield slot matrices (each row sorted, free slots last) covering every expert."""
    rows = _gpu_rows(N, E)
    everyone = set(range(N))
    for combo in itertools.product(rows, repeat=G):
        if set().union(*combo) != everyone:
            continue
        s = np.full((G, E), UNASSIGNED, dtype=np.int64)
        for g, row in enumerate(combo):
            s[g, : len(row)] = row
        yield combo, s


def _encoding(combo: tuple[tuple[int, ...], ...], N: int, E: int) -> tuple[int, ...]:
    # free slots encode as N so they sort after every expert id
    return tuple(x for row in combo for x in row + (N,) * (E - len(row)))


class _SplitSearch:
    """Token split optimizer for one demand matrix on one topology."""

    def __init__(self, D: np.ndarray, topo: ClusterTopology):
        self.D = D.tolist()
        self.N, self.G = D.shape
        self.topo = topo
        self.a = 1.0 / topo.tps
        inv = topo.inv_bandwidth
        # remote-token price per (e, g): sources weighted by their demand for e
        self.b = []
        for e in range(self.N):
            row = []
            for g in range(self.G):
                w = np.array([D[e, s] if s != g else 0 for s in range(self.G)], dtype=np.float64)
                others = inv[:, g].copy()
                if w.sum() > 0:
                    price = float((w * others).sum() / w.sum())
                else:
                    price = float(others.sum() / max(self.G - 1, 1))
                row.append(A2A_CALLS_PER_STEP * topo.token_bytes * price)
            self.b.append(row)

    def sync(self, hosts: list[list[int]]) -> list[float]:
        out = [0.0] * self.G
        for gpus in hosts:
            if len(gpus) > 1:
                c = self.topo.expert_param_bytes / group_bps(self.topo, gpus)
                for g in gpus:
                    out[g] += c
        return out

    def gpu_time(self, x: list[list[int]], g: int, sync_g: float) -> float:
        t = sync_g
        D, b = self.D, self.b
        for e in range(self.N):
            xe = x[e][g]
            if xe:
                t += xe * self.a
                r = xe - D[e][g]
                if r > 0:
                    t += r * b[e][g]
        return t

    def descend(self, x: list[list[int]], hosts: list[list[int]], sync: list[float]) -> list[list[int]]:
        G = self.G
        t = [self.gpu_time(x, g, sync[g]) for g in range(G)]
        top = max((sum(r) for r in x), default=0)
        step = 1 << max(top.bit_length() - 1, 0)
        moves = [(e, a, c) for e, gpus in enumerate(hosts) for a in gpus for c in gpus if a != c]
        while step >= 1:
            improved = True
            while improved:
                improved = False
                for e, a, c in moves:
                    if x[e][a] < step or t[a] <= t[c]:
                        continue
                    x[e][a] -= step
                    x[e][c] += step
                    ta = self.gpu_time(x, a, sync[a])
                    tc = self.gpu_time(x, c, sync[c])
                    # only a and c change, so leximax order reduces to the pair
                    old_hi, old_lo = t[a], t[c]
                    new_hi, new_lo = max(ta, tc), min(ta, tc)
                    if new_hi < old_hi or (new_hi == old_hi and new_lo < old_lo):
                        t[a], t[c] = ta, tc
                        improved = True
                    else:
                        x[e][a] += step
                        x[e][c] -= step
            step //= 2
        return x

    def starts(self, hosts: list[list[int]], counts: np.ndarray | None = None) -> list[list[list[int]]]:
        out = []
        loads = [sum(r) for r in self.D]
        # even per slot (per hosting GPU when slot counts are unknown)
        even = []
        for e, gpus in enumerate(hosts):
            w = np.zeros(self.G, dtype=np.int64)
            for g in gpus:
                w[g] = counts[e, g] if counts is not None else 1
            even.append([int(v) for v in largest_remainder(loads[e], w)])
        out.append(even)
        # keep local tokens, spread the rest evenly
        local = []
        for e, gpus in enumerate(hosts):
            row = [0] * self.G
            for g in gpus:
                row[g] = self.D[e][g]
            rest = loads[e] - sum(row)
            w = np.zeros(self.G, dtype=np.int64)
            w[gpus] = 1
            for g, v in enumerate(largest_remainder(rest, w)):
                row[g] += int(v)
            local.append(row)
        out.append(local)
        return out

    def solve(self, hosts: list[list[int]], extra_starts=()) -> tuple[list[list[int]], float]:
        sync = self.sync(hosts)
        best, best_t = None, None
        for x0 in list(self.starts(hosts)) + list(extra_starts):
            x = self.descend([list(r) for r in x0], hosts, sync)
            t = sorted((self.gpu_time(x, g, sync[g]) for g in range(self.G)), reverse=True)
            if best_t is None or t < best_t:
                best, best_t = x, t
        return best, best_t[0]


def flows_for_split(D: np.ndarray, split: np.ndarray, topo: ClusterTopology) -> np.ndarray:
    """Locality-first transport realizing ``split``: local tokens stay, the
    surplus of each source goes to the deficits over the fastest links."""
    N, G = D.shape
    flows = np.zeros((N, G, G), dtype=np.int64)
    pairs = sorted(
        ((s, g) for s in range(G) for g in range(G) if s != g),
        key=lambda sg: (-topo.bandwidth(*sg), sg),
    )
    for e in range(N):
        local = np.minimum(D[e], split[e])
        flows[e, np.arange(G), np.arange(G)] = local
        supply = (D[e] - local).tolist()
        need = (split[e] - local).tolist()
        for s, g in pairs:
            if supply[s] and need[g]:
                k = min(supply[s], need[g])
                flows[e, s, g] += k
                supply[s] -= k
                need[g] -= k
    return flows


def solve_exact(inst: OracleInstance) -> OracleSolution:
    """Minimum modeled makespan over all placements and token splits."""
    N, G, E = inst.num_experts, inst.num_gpus, inst.slots_per_gpu
    D = inst.demand.demand
    search = _SplitSearch(D, inst.topo)
    by_hosts: dict[tuple, tuple[list[list[int]], float]] = {}
    best = None  # (objective, encoding, slots, split)
    checked = 0
    for combo, slots in enumerate_placements(N, G, E):
        checked += 1
        hosts = tuple(tuple(g for g in range(G) if e in combo[g]) for e in range(N))
        if hosts not in by_hosts:
            x, _ = search.solve([list(h) for h in hosts])
            split = np.array(x, dtype=np.int64)
            p = Placement(N, slots)
            plan = RoutingPlan(flows_for_split(D, split, inst.topo))
            by_hosts[hosts] = (split, step_cost(inst.demand, p, plan, inst.topo).makespan_s)
        split, obj = by_hosts[hosts]
        enc = _encoding(combo, N, E)
        if best is None or (obj, enc) < (best[0], best[1]):
            best = (obj, enc, slots, split)

    obj, _, slots, split = best
    p = Placement(N, slots)
    plan = RoutingPlan(flows_for_split(D, split, inst.topo))
    sol = OracleSolution(p, split, plan, obj, checked)
    _check_solution(inst, sol)
    return sol


def _check_solution(inst: OracleInstance, sol: OracleSolution):
    p = sol.placement
    if np.any(p.counts.sum(axis=1) < 1):
        raise AssertionError("oracle placement leaves an expert without a slot")
    if np.any(p.counts.sum(axis=0) > inst.slots_per_gpu):
        raise AssertionError("oracle placement exceeds the slot budget")
    if not np.array_equal(sol.split.sum(axis=1), inst.demand.expert_loads()):
        raise AssertionError("oracle split does not conserve tokens")
    if np.any(sol.split[~p.hosts] != 0):
        raise AssertionError("oracle split uses a non-hosting GPU")
    if not np.array_equal(sol.plan.flows.sum(axis=2), inst.demand.demand):
        raise AssertionError("oracle flows do not match demand")


def placement_objective(inst: OracleInstance, p: Placement) -> float:
    """Modeled makespan of ``p`` with tokens routed by the locality-first router."""
    return step_cost(inst.demand, p, route(inst.demand, p), inst.topo).makespan_s


def compare_policy(inst: OracleInstance, placement: Placement, solution: OracleSolution | None = None) -> float:
    """Greedy objective over the exact optimum (>= 1)."""
    if solution is None:
        solution = solve_exact(inst)
    return placement_objective(inst, placement) / solution.objective


def random_instance(
    num_gpus: int,
    num_experts: int,
    slots: int,
    seed: int,
    tokens_per_gpu: int = 8192,
    max_zipf: float = 2.0,
    max_step: int = 50,
) -> OracleInstance:
    """Seeded skewed instance drawn from the trace generator.

    The Zipf exponent is uniform in ``[0, max_zipf]`` and the demand is
    taken from a uniformly chosen step of the drifting trace.
    """
    rng = np.random.default_rng(seed)
    exponent = float(rng.uniform(0.0, max_zipf))
    steps = int(rng.integers(0, max_step)) + 1
    cfg = TraceGeneratorConfig(
        num_experts, num_gpus, tokens_per_gpu * num_gpus, zipf_exponent=exponent, seed=seed, num_steps=steps
    )
    d = generate_trace(cfg)[-1]
    return OracleInstance(d, default_topology(num_gpus, slots))


def greedy_placement(inst: OracleInstance, horizon: int = DEFAULT_HORIZON) -> Placement:
    """Placement the dynamic planner converges to from one slot per expert."""
    p0 = initial_placement(inst.num_experts, inst.topo)
    p, _ = converge(inst.demand, p0, inst.topo, horizon=horizon)
    return p
