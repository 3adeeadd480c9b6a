import numpy as np
import pytest

from moeplace.placement import UNASSIGNED, Placement
from moeplace.topology import ClusterTopology, default_topology, ring_bps_table
from moeplace.workload import TokenDemand


def make_topology(num_gpus=2, gpus_per_node=None, slots=2, **kw) -> ClusterTopology:
    """Small hand-rolled profile with round numbers."""
    gpus_per_node = gpus_per_node or num_gpus
    intra = kw.pop("intra", 100e9)
    inter = kw.pop("inter", 25e9)
    args = dict(
        num_gpus=num_gpus,
        gpus_per_node=gpus_per_node,
        intra_bandwidth=intra,
        inter_bandwidth=inter,
        tps=1e6,
        bps_table=ring_bps_table(num_gpus, gpus_per_node, intra, inter),
        vexperts_per_gpu=slots,
        expert_param_bytes=50e6,
        expert_state_bytes=150e6,
        token_bytes=4096,
    )
    args.update(kw)
    return ClusterTopology(**args)


def random_placement(rng, num_experts, num_gpus, slots, fill=None) -> Placement:
    """Uniformly scattered valid placement: every expert once, then random extra slots."""
    s = np.full((num_gpus, slots), UNASSIGNED, dtype=np.int64)
    cells = rng.permutation(num_gpus * slots)
    for e in range(num_experts):
        g, k = divmod(int(cells[e]), slots)
        s[g, k] = e
    extra = fill if fill is not None else int(rng.integers(0, num_gpus * slots - num_experts + 1))
    for c in cells[num_experts : num_experts + extra]:
        g, k = divmod(int(c), slots)
        s[g, k] = int(rng.integers(num_experts))
    return Placement(num_experts, s)


def random_demand(rng, num_experts, num_gpus, high=200, step=0) -> TokenDemand:
    d = rng.integers(0, high, size=(num_experts, num_gpus))
    # sparse rows and zero cells are the interesting corners
    d[rng.random(d.shape) < 0.2] = 0
    return TokenDemand(step, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def topo8():
    return default_topology(8)


@pytest.fixture
def topo16():
    return default_topology(16)
