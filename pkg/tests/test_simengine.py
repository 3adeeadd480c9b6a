import numpy as np
import pytest

from conftest import make_topology, random_placement
from moeplace.placement import PlacementOp, Transfer, initial_placement
from moeplace.policy import BalanceMetric
from moeplace.simengine import (
    CSV_COLUMNS,
    AdjustmentQueue,
    GroupCache,
    PolicyMode,
    SimConfig,
    SimError,
    best_effort_drain,
    check_deadlock_free,
    collective_order,
    merge_ops,
    reports_to_csv,
    run,
    simulate_collectives,
    summarize,
    sync_groups,
)
from moeplace.topology import default_topology
from moeplace.workload import TokenDemand, TraceGeneratorConfig, generate_trace


def skewed_trace(steps=20):
    return [TokenDemand(t, [[3750, 3750], [1250, 1250]]) for t in range(steps)]


def test_uniform_trace_never_plans():
    topo = make_topology(4, slots=2)
    trace = generate_trace(TraceGeneratorConfig(4, 4, 16000, zipf_exponent=0, drift_rate=0, num_steps=10))
    reports = run(trace, topo)
    assert all(r.balance_ratio == 1.0 for r in reports)
    assert all(not r.plan_applied for r in reports)


def test_skewed_dynamic_expands_hot_expert():
    topo = make_topology(2, slots=2)
    reports = run(skewed_trace(), topo, SimConfig(threshold=1.1))
    first = reports[0].plan_applied
    assert PlacementOp.expand(0, 1) in first
    assert reports[0].balance_ratio == 1.5
    assert reports[-1].balance_ratio < 1.5
    assert reports[-1].replica_counts[0] >= 2


def test_skewed_static_stays_put():
    topo = make_topology(2, slots=2)
    reports = run(skewed_trace(), topo, SimConfig(policy_mode=PolicyMode("static")))
    assert [r.balance_ratio for r in reports] == [1.5] * 20
    assert all(r.breakdown.sync_s.sum() == 0 for r in reports)


def test_static_uniform_is_classic_expert_parallelism():
    topo = make_topology(4, slots=1)
    trace = [TokenDemand(0, np.diag([100] * 4))]
    seen = []
    run(trace, topo, SimConfig(policy_mode=PolicyMode("static")), on_step=lambda r, p: seen.append(r))
    assert seen[0].breakdown.a2a_s.sum() == 0
    assert seen[0].breakdown.sync_s.sum() == 0


def test_interval_mode_plans_only_on_multiples():
    topo = make_topology(2, slots=2)
    # flip the hot expert every step so there is always something to do
    trace = [TokenDemand(t, [[3750, 3750], [1250, 1250]] if t % 2 else [[1250, 1250], [3750, 3750]]) for t in range(12)]
    reports = run(trace, topo, SimConfig(policy_mode=PolicyMode("interval", 5), migrations=False))
    planned = [r.step for r in reports if r.plan_applied]
    assert planned and all(s % 5 == 0 for s in planned)


def test_policy_mode_parse():
    assert PolicyMode.parse("interval:10") == PolicyMode("interval", 10)
    assert str(PolicyMode.parse("static")) == "static"
    for bad in ("interval:x", "sometimes", "interval:0"):
        with pytest.raises(SimError):
            PolicyMode.parse(bad)


def test_config_validation():
    with pytest.raises(SimError):
        SimConfig(threshold=1.0).validate()
    with pytest.raises(SimError):
        SimConfig(adjust_bandwidth_fraction=0).validate()


def test_reports_invariants_every_step():
    topo = default_topology(8, 4)
    trace = generate_trace(TraceGeneratorConfig(16, 8, 16384, seed=2, num_steps=60, drift_rate=0.1))

    def check(report, placement):
        placement.check()
        assert (placement.counts.sum(axis=0) <= 4).all()
        assert report.tokens_dropped == 0
        assert check_deadlock_free(placement)

    reports = run(trace, topo, on_step=check)
    assert len(reports) == 60
    assert reports[-1].clock_s == pytest.approx(sum(r.step_time_s for r in reports))


def test_determinism_byte_identical_csv():
    topo = default_topology(8, 4)
    trace = generate_trace(TraceGeneratorConfig(16, 8, 16384, seed=4, num_steps=40))
    a = reports_to_csv(run(trace, topo))
    b = reports_to_csv(run(trace, topo))
    assert a == b
    assert a.splitlines()[0] == ",".join(CSV_COLUMNS)


def test_variance_metric_runs():
    topo = make_topology(2, slots=2)
    reports = run(skewed_trace(), topo, SimConfig(metric=BalanceMetric.VARIANCE))
    assert reports[-1].balance_ratio < 1.5


def test_trace_shape_mismatch():
    with pytest.raises(SimError):
        run(skewed_trace(), make_topology(3, slots=2))


def test_summary_fields():
    topo = make_topology(2, slots=2)
    s = summarize(run(skewed_trace(), topo), skip=5)
    assert s["steps"] == 20 and s["tokens_dropped"] == 0
    assert s["mean_makespan_s"] > 0


# ----------------------------------------------------------- adjustments


def test_drain_empty_queue():
    q = AdjustmentQueue()
    assert best_effort_drain(q, 1.0, make_topology()) == ([], 0.0)


def test_drain_partial_transfer():
    topo = make_topology(2, gpus_per_node=1)  # 25e9 between the two GPUs
    q = AdjustmentQueue()
    q.push(PlacementOp.expand(0, 1), [Transfer(0, 1, 150e6)])
    done, moved = best_effort_drain(q, 3e-3, topo)
    assert done == []
    assert moved == pytest.approx(75e6)
    assert q.pending_bytes() == pytest.approx(75e6)
    done, _ = best_effort_drain(q, 3e-3, topo)
    assert done == [PlacementOp.expand(0, 1)]
    assert len(q) == 0


def test_drain_saturates():
    topo = make_topology(4)
    q = AdjustmentQueue()
    for g in (1, 2, 3):
        q.push(PlacementOp.expand(0, g), [Transfer(0, g, 1e9)])
    done, moved = best_effort_drain(q, 1.0, topo)
    assert len(done) == 3 and moved == pytest.approx(3e9)


def test_ops_complete_in_queue_order():
    topo = make_topology(4)
    q = AdjustmentQueue()
    q.push(PlacementOp.expand(0, 1), [Transfer(0, 1, 1e9)])  # slow
    q.push(PlacementOp.expand(1, 3), [Transfer(2, 3, 1e3)])  # tiny, runs concurrently
    done, _ = best_effort_drain(q, 1e-3, topo)
    # the second transfer finished, but its op waits for the first
    assert done == []
    assert q.items[1].done
    done, _ = best_effort_drain(q, 1.0, topo)
    assert [op.expert for op in done] == [0, 1]


def test_transferless_ops_complete_immediately():
    q = AdjustmentQueue()
    q.push(PlacementOp.shrink(0, 1), [])
    assert best_effort_drain(q, 0.0, make_topology())[0] == [PlacementOp.shrink(0, 1)]


def queue_of(*pairs, nbytes=1e6):
    q = AdjustmentQueue()
    for src, dst in pairs:
        q.push(PlacementOp.expand(0, dst), [Transfer(src, dst, nbytes)])
    return q


def test_merge_same_link_coalesces():
    stages = merge_ops(queue_of((0, 1), (0, 1)))
    assert len(stages) == 1 and len(stages[0]) == 1
    assert stages[0][0].remaining == 2e6


def test_merge_disjoint_links_concurrent():
    stages = merge_ops(queue_of((0, 1), (2, 3)))
    assert len(stages) == 1 and len(stages[0]) == 2


def test_merge_shared_endpoint_sequential():
    stages = merge_ops(queue_of((0, 1), (1, 2)))
    assert [len(s) for s in stages] == [1, 1]


def test_concurrent_links_each_use_full_budget():
    topo = make_topology(4, intra=1e9)
    q = queue_of((0, 1), (2, 3), nbytes=1e9)
    done, moved = best_effort_drain(q, 0.5, topo)
    assert moved == pytest.approx(1e9)  # 0.5 GB on each link


# ----------------------------------------------------------- collectives


def test_collective_order_ascending():
    from moeplace.placement import Placement

    s = np.array([[5, 2], [5, 2], [1, 3]])
    order = collective_order(Placement(6, s))
    assert order[0] == [2, 5] and order[1] == [2, 5]
    assert order[2] == []  # singles need no group


def test_no_groups_for_single_replicas():
    topo = make_topology(4, slots=1)
    p = initial_placement(4, topo)
    assert sync_groups(p) == {}
    assert collective_order(p) == [[], [], [], []]


def test_deadlock_detector_catches_crossed_order():
    groups = {0: (0, 1), 1: (0, 1)}
    assert simulate_collectives([[0, 1], [0, 1]], groups)
    assert not simulate_collectives([[0, 1], [1, 0]], groups)


def run_deadlock_checks(n: int, seed: int) -> int:
    rng = np.random.default_rng(seed)
    deadlocks = 0
    for _ in range(n):
        G, E = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        N = int(rng.integers(1, G * E + 1))
        p = random_placement(rng, N, G, E)
        if not check_deadlock_free(p):
            deadlocks += 1
    return deadlocks


def test_random_placements_deadlock_free():
    assert run_deadlock_checks(300, seed=11) == 0


# ----------------------------------------------------------- group cache


def test_lru_cache_hits_and_evictions():
    c = GroupCache(2)
    assert c.touch({0, 1}) == (False, None)
    assert c.touch({0, 1}) == (True, None)
    c = GroupCache(2)
    a, b, cc = {0, 1}, {1, 2}, {2, 3}
    c.touch(a)
    c.touch(b)
    hit, evicted = c.touch(cc)
    assert not hit and evicted == frozenset(a)
    assert c.touch(a)[0] is False


def test_misses_stop_after_warmup():
    topo = make_topology(2, slots=2)
    reports = run(skewed_trace(100), topo, SimConfig(max_live_groups=4))
    misses = np.cumsum([r.group_misses for r in reports])
    assert misses[-1] == misses[50]
    assert misses[-1] >= 1
