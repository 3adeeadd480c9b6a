import numpy as np
import pytest

from conftest import make_topology, random_demand, random_placement
from moeplace.costmodel import (
    a2a_cost,
    adjust_cost,
    compute_cost,
    step_cost,
    sync_cost,
    sync_costs,
)
from moeplace.placement import UNASSIGNED, Placement, Transfer, initial_placement
from moeplace.router import RoutingError, RoutingPlan, route
from moeplace.topology import ClusterTopology, default_topology, group_bps
from moeplace.workload import TokenDemand


def test_compute_cost():
    topo = make_topology()
    assert compute_cost(0, topo) == 0
    assert compute_cost(1_000_000, topo) == 1.0
    assert compute_cost(2 * 777, topo) == 2 * compute_cost(777, topo)


def test_a2a_cost_arithmetic():
    topo = make_topology(2, gpus_per_node=1)  # two nodes, 25e9 between them
    flows = np.zeros((1, 2, 2), dtype=np.int64)
    flows[0, 1, 0] = 1000
    flows[0, 0, 0] = 500  # local, free
    plan = RoutingPlan(flows)
    assert a2a_cost(plan, 0, 0, topo) == pytest.approx(4 * 1000 * 4096 / 25e9)
    assert a2a_cost(plan, 0, 1, topo) == 0


def test_a2a_split_across_equal_sources():
    topo = make_topology(3)
    one = np.zeros((1, 3, 3), dtype=np.int64)
    one[0, 1, 0] = 100
    two = np.zeros((1, 3, 3), dtype=np.int64)
    two[0, 1, 0] = 60
    two[0, 2, 0] = 40
    assert a2a_cost(RoutingPlan(one), 0, 0, topo) == pytest.approx(a2a_cost(RoutingPlan(two), 0, 0, topo))


def test_sync_cost_arithmetic():
    table = {(2, False): 100e9}
    topo = ClusterTopology(2, 2, 100e9, 100e9, 1e6, table, 2, expert_param_bytes=50e6)
    single = initial_placement(2, topo)
    assert sync_cost(single, 0, topo) == 0
    s = np.array([[0, 1], [0, UNASSIGNED]])
    assert sync_cost(Placement(2, s), 0, topo) == pytest.approx(5e-4)


def test_sync_cost_monotone_in_group_size():
    topo = default_topology(16, 16)
    for span_start in (0, 4):  # intra-node, then groups crossing the node boundary at size > 4
        prev = 0.0
        for size in range(2, 9):
            s = np.full((16, 16), UNASSIGNED)
            s[span_start : span_start + size, 0] = 0
            s[15, 1] = 1
            c = sync_cost(Placement(2, s), 0, topo)
            if (span_start + size - 1) // 8 == span_start // 8:
                assert c >= prev
                prev = c


def test_adjust_cost():
    topo = make_topology(2, gpus_per_node=1, expert_state_bytes=150e6)
    assert adjust_cost(None, topo) == 0
    assert adjust_cost(Transfer(0, 1, 150e6), topo) == pytest.approx(6e-3)
    fwd, back = Transfer(0, 1, 150e6), Transfer(1, 0, 150e6)
    assert adjust_cost(fwd, topo) == adjust_cost(back, topo)


def test_single_gpu_single_expert_is_compute_only():
    topo = make_topology(1, slots=1)
    p = initial_placement(1, topo)
    d = TokenDemand(0, [[4096]])
    cost = step_cost(d, p, route(d, p), topo)
    assert cost.makespan_s == compute_cost(4096, topo)
    assert cost.a2a_s.sum() == 0 and cost.sync_s.sum() == 0


def test_symmetric_two_gpu():
    topo = make_topology(2, slots=1)
    p = initial_placement(2, topo)
    d = TokenDemand(0, [[50, 50], [50, 50]])
    cost = step_cost(d, p, route(d, p), topo)
    assert cost.per_gpu[0] == cost.per_gpu[1] == cost.makespan_s


def test_hand_evaluated_skewed_instance():
    # 2 GPUs, 2 experts, E=1: A (75%) on GPU 0, B (25%) on GPU 1, tokens evenly produced
    topo = make_topology(2, slots=1)
    p = initial_placement(2, topo)
    d = TokenDemand(0, [[375, 375], [125, 125]])
    cost = step_cost(d, p, route(d, p), topo)
    tok = 4096
    gpu0 = 750 / 1e6 + 4 * 375 * tok / 100e9
    gpu1 = 250 / 1e6 + 4 * 125 * tok / 100e9
    assert cost.per_gpu.tolist() == pytest.approx([gpu0, gpu1], rel=1e-12)
    assert cost.makespan_s == pytest.approx(gpu0, rel=1e-12)
    assert cost.straggler == 0


def test_matches_per_term_definitions(rng):
    for _ in range(30):
        G = int(rng.integers(1, 5))
        topo = make_topology(G, gpus_per_node=1 if G > 1 and rng.random() < 0.5 else None, slots=3)
        N = int(rng.integers(1, 3 * G + 1))
        p = random_placement(rng, N, G, 3)
        d = random_demand(rng, N, G)
        plan = route(d, p)
        cost = step_cost(d, p, plan, topo)
        for g in range(G):
            hosted = [e for e in range(N) if p.hosts[e, g]]
            comp = sum(compute_cost(int(plan.received[e, g]), topo) for e in hosted)
            a2a = sum(a2a_cost(plan, e, g, topo) for e in hosted)
            sync = sum(sync_cost(p, e, topo) for e in hosted)
            assert cost.compute_s[g] == pytest.approx(comp, rel=1e-12, abs=1e-15)
            assert cost.a2a_s[g] == pytest.approx(a2a, rel=1e-12, abs=1e-15)
            assert cost.sync_s[g] == pytest.approx(sync, rel=1e-12, abs=1e-15)
        assert cost.makespan_s == cost.per_gpu.max()
        # zero-comm lower bound
        assert cost.makespan_s >= compute_cost(plan.gpu_totals.max(), topo) - 1e-15


def test_monotone_in_received_tokens(rng):
    topo = make_topology(3, slots=2)
    p = random_placement(rng, 4, 3, 2)
    d = random_demand(rng, 4, 3)
    plan = route(d, p)
    base = step_cost(d, p, plan, topo).makespan_s
    for e, g in np.argwhere(p.hosts):
        flows = plan.flows.copy()
        flows[e, g, g] += 5
        more = TokenDemand(0, flows.sum(axis=2))
        assert step_cost(more, p, RoutingPlan(flows), topo).makespan_s >= base


def test_non_hosting_destination_rejected():
    topo = make_topology(2, slots=1)
    p = initial_placement(2, topo)
    flows = np.zeros((2, 2, 2), dtype=np.int64)
    flows[0, 0, 1] = 1
    with pytest.raises(RoutingError, match="non-hosting"):
        step_cost(TokenDemand(0, flows.sum(axis=2)), p, RoutingPlan(flows), topo)


def test_sync_costs_vector():
    topo = default_topology(8)
    s = np.array([[0, 1]] + [[0, UNASSIGNED]] * 3 + [[2, UNASSIGNED]] * 4)
    p = Placement(3, s)
    v = sync_costs(p, topo)
    assert v[1] == 0
    assert v[0] == v[2] == topo.expert_param_bytes / group_bps(topo, {0, 1, 2, 3})
