import math

import pytest

from conftest import make_topology
from moeplace.baselines import (
    BaselineKind,
    capped_demand,
    equalized_demand,
    run_baseline,
    shadow_placement,
)
from moeplace.placement import initial_placement
from moeplace.simengine import summarize
from moeplace.topology import default_topology
from moeplace.workload import TokenDemand, TraceGeneratorConfig, generate_trace


def skewed(steps=5):
    return [TokenDemand(t, [[3750, 3750], [1250, 1250]]) for t in range(steps)]


def test_capped_demand_drops_overflow():
    d = TokenDemand(0, [[3750, 3750], [1250, 1250]])
    kept, dropped = capped_demand(d, 1.0)
    assert kept.expert_loads().tolist() == [5000, 2500]
    assert dropped == 2500
    assert capped_demand(d, math.inf) == (d, 0)
    with pytest.raises(ValueError):
        capped_demand(d, 0)


def test_static_ep_reports_drops():
    topo = make_topology(2, slots=2)
    reports = run_baseline(BaselineKind.STATIC_EP, skewed(), topo, capacity_factor=1.0)
    assert all(r.tokens_dropped == 2500 for r in reports)
    unlimited = run_baseline(BaselineKind.STATIC_EP, skewed(), topo, capacity_factor=math.inf)
    assert all(r.tokens_dropped == 0 and r.balance_ratio == 1.5 for r in unlimited)


def test_shadow_placement_replicates_hottest():
    topo = make_topology(2, slots=2)
    d = TokenDemand(0, [[3750, 3750], [1250, 1250]])
    p = shadow_placement(d, initial_placement(2, topo), topo, top_k=1)
    assert p.counts[0].tolist() == [1, 1]
    assert p.counts[1].sum() == 1


def test_full_replicate_pays_sync():
    topo = make_topology(2, slots=2)
    reports = run_baseline(BaselineKind.FULL_REPLICATE, skewed(), topo)
    assert all(r.breakdown.sync_s.max() > 0 for r in reports)
    assert all(r.tokens_dropped == 0 for r in reports)


def test_equalized_demand_is_balanced_and_counts_reassigned():
    topo = make_topology(2, slots=1)
    d = TokenDemand(0, [[3750, 3750], [1250, 1250]])
    even, moved = equalized_demand(d, initial_placement(2, topo))
    assert even.expert_loads().tolist() == [5000, 5000]
    assert even.total == d.total
    assert moved == 2500


def test_strict_rebalance_ratio_one():
    topo = make_topology(2, slots=1)
    reports = run_baseline(BaselineKind.STRICT_REBALANCE, skewed(), topo)
    assert all(r.balance_ratio == 1.0 and r.tokens_reassigned == 2500 for r in reports)


def test_flex_beats_static_on_skewed_trace():
    topo = default_topology(8, 4)
    trace = generate_trace(TraceGeneratorConfig(16, 8, 16384, seed=1, num_steps=30))
    flex = summarize(run_baseline(BaselineKind.FLEX, trace, topo), skip=5)
    static = summarize(run_baseline(BaselineKind.STATIC_EP, trace, topo, capacity_factor=math.inf), skip=5)
    assert flex["mean_makespan_s"] < static["mean_makespan_s"]
    assert flex["tokens_dropped"] == 0


def test_empty_trace():
    assert run_baseline(BaselineKind.STATIC_EP, [], make_topology()) == []
