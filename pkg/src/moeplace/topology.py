"""Cluster model: devices, link bandwidths and profiled throughputs.

A topology is a flat list of ``num_gpus`` devices grouped into nodes of
``gpus_per_node``. Point-to-point bandwidth has one intra-node and one
inter-node value. AllReduce throughput comes from a profile table keyed by
``(group size, spans nodes)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class TopologyError(ValueError):
    pass


BpsKey = tuple[int, bool]

_REQUIRED_KEYS = (
    "num_gpus",
    "gpus_per_node",
    "vexperts_per_gpu",
    "tps",
    "token_bytes",
    "expert_param_bytes",
    "expert_state_bytes",
)


@dataclass(frozen=True, eq=True)
class ClusterTopology:
    num_gpus: int
    gpus_per_node: int
    intra_bandwidth: float  # bytes/s
    inter_bandwidth: float  # bytes/s
    tps: float  # tokens/s for one expert fwd+bwd on one device
    bps_table: Mapping[BpsKey, float] = field(repr=False)
    vexperts_per_gpu: int = 1
    expert_param_bytes: float = 0.0
    expert_state_bytes: float = 0.0
    token_bytes: float = 0.0

    def __post_init__(self):
        if self.num_gpus < 1:
            raise TopologyError("num_gpus must be >= 1")
        if self.gpus_per_node < 1:
            raise TopologyError("gpus_per_node must be >= 1")
        if self.num_gpus % self.gpus_per_node:
            raise TopologyError(
                f"num_gpus={self.num_gpus} is not a multiple of gpus_per_node={self.gpus_per_node}"
            )
        if self.vexperts_per_gpu < 1:
            raise TopologyError("vexperts_per_gpu must be >= 1")
        for name in ("intra_bandwidth", "inter_bandwidth"):
            if not getattr(self, name) > 0:
                raise TopologyError(f"non-positive bandwidth: {name}={getattr(self, name)}")
        if not self.tps > 0:
            raise TopologyError(f"non-positive throughput: tps={self.tps}")
        for name in ("expert_param_bytes", "expert_state_bytes", "token_bytes"):
            if getattr(self, name) < 0:
                raise TopologyError(f"negative size: {name}")
        object.__setattr__(self, "bps_table", dict(self.bps_table))
        _check_bps_table(self.bps_table, self.num_gpus, self.gpus_per_node)

    @property
    def num_nodes(self) -> int:
        return self.num_gpus // self.gpus_per_node

    @property
    def num_slots(self) -> int:
        return self.num_gpus * self.vexperts_per_gpu

    def node_of(self, g: int) -> int:
        return g // self.gpus_per_node

    def bandwidth(self, g: int, h: int) -> float:
        """Point-to-point bandwidth; a device to itself is infinite."""
        if g == h:
            return math.inf
        if self.node_of(g) == self.node_of(h):
            return self.intra_bandwidth
        return self.inter_bandwidth

    @cached_property
    def inv_bandwidth(self) -> np.ndarray:
        """(G, G) matrix of 1/bandwidth with a zero diagonal."""
        nodes = np.arange(self.num_gpus) // self.gpus_per_node
        same = nodes[:, None] == nodes[None, :]
        inv = np.where(same, 1.0 / self.intra_bandwidth, 1.0 / self.inter_bandwidth)
        np.fill_diagonal(inv, 0.0)
        return inv

    def spans_nodes(self, group: Iterable[int]) -> bool:
        return len({self.node_of(g) for g in group}) > 1

    def group_bps(self, group: Iterable[int]) -> float:
        return group_bps(self, group)


def group_bps(topo: ClusterTopology, group: Iterable[int]) -> float:
    """AllReduce throughput (bytes/s) for a device group of size >= 2."""
    members = set(group)
    if len(members) < 2:
        raise TopologyError(f"AllReduce group needs >= 2 devices, got {sorted(members)}")
    for g in members:
        if not 0 <= g < topo.num_gpus:
            raise TopologyError(f"GPU {g} out of range")
    return topo.bps_table[(len(members), topo.spans_nodes(members))]


def required_bps_keys(num_gpus: int, gpus_per_node: int) -> list[BpsKey]:
    keys = [(n, False) for n in range(2, min(num_gpus, gpus_per_node) + 1)]
    if num_gpus > gpus_per_node:
        keys += [(n, True) for n in range(2, num_gpus + 1)]
    return keys


def _check_bps_table(table: Mapping[BpsKey, float], num_gpus: int, gpus_per_node: int):
    for key in required_bps_keys(num_gpus, gpus_per_node):
        if key not in table:
            size, spans = key
            kind = "inter" if spans else "intra"
            raise TopologyError(f"bps table has no {kind}-node entry for group size {size}")
        if not table[key] > 0:
            raise TopologyError(f"non-positive throughput: bps{key}={table[key]}")
    for spans in (False, True):
        sizes = sorted(n for (n, s) in table if s == spans)
        for a, b in zip(sizes, sizes[1:]):
            if table[(b, spans)] > table[(a, spans)]:
                raise TopologyError(
                    f"bps must be non-increasing in group size: size {b} > size {a} (spans={spans})"
                )
    for (n, spans), value in table.items():
        if spans and (n, False) in table and value > table[(n, False)]:
            raise TopologyError(f"inter-node bps exceeds intra-node bps at size {n}")


def ring_bps_table(num_gpus: int, gpus_per_node: int, intra: float, inter: float) -> dict[BpsKey, float]:
    """Algorithm bandwidth of a ring AllReduce, bottlenecked by the slowest link.

    A ring moves 2(n-1)/n of the message over each link, so the effective
    message throughput is ``link * n / (2(n - 1))``.
    """
    table = {}
    for n, spans in required_bps_keys(num_gpus, gpus_per_node):
        link = inter if spans else intra
        table[(n, spans)] = link * n / (2 * (n - 1))
    return table


def topology_from_dict(doc: Mapping) -> ClusterTopology:
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise TopologyError(f"missing field: {key}")
    bw = doc.get("bandwidth")
    if not isinstance(bw, Mapping) or "intra" not in bw:
        raise TopologyError("missing field: bandwidth.intra")
    num_gpus = int(doc["num_gpus"])
    gpus_per_node = int(doc["gpus_per_node"])
    intra = float(bw["intra"])
    # single-node clusters have no inter-node links; any positive value is unused
    if "inter" not in bw:
        if num_gpus > gpus_per_node:
            raise TopologyError("missing field: bandwidth.inter")
        inter = intra
    else:
        inter = float(bw["inter"])
    if intra <= 0 or inter <= 0:
        raise TopologyError(f"non-positive bandwidth: intra={intra}, inter={inter}")
    if gpus_per_node > 0 and num_gpus % gpus_per_node:
        raise TopologyError(f"num_gpus={num_gpus} is not a multiple of gpus_per_node={gpus_per_node}")

    bps_doc = doc.get("bps")
    if bps_doc is None:
        raise TopologyError("missing field: bps")
    if bps_doc.get("model") == "ring":
        table = ring_bps_table(num_gpus, gpus_per_node, intra, inter)
    else:
        table = {}
        for section, spans in (("intra", False), ("inter", True)):
            for size, value in bps_doc.get(section, {}).items():
                table[(int(size), spans)] = float(value)

    return ClusterTopology(
        num_gpus=num_gpus,
        gpus_per_node=gpus_per_node,
        intra_bandwidth=intra,
        inter_bandwidth=inter,
        tps=float(doc["tps"]),
        bps_table=table,
        vexperts_per_gpu=int(doc["vexperts_per_gpu"]),
        expert_param_bytes=float(doc["expert_param_bytes"]),
        expert_state_bytes=float(doc["expert_state_bytes"]),
        token_bytes=float(doc["token_bytes"]),
    )


def parse_topology(text: str) -> ClusterTopology:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise TopologyError(f"malformed topology config: {exc}") from exc
    return topology_from_dict(doc)


def load_topology(path: str | Path) -> ClusterTopology:
    return parse_topology(Path(path).read_text())


def default_topology(num_gpus: int = 8, vexperts_per_gpu: int | None = None) -> ClusterTopology:
    """Bundled A100 profile: 8 GPUs per node, NVLink intra, InfiniBand inter.

    Clusters wider than 8 GPUs must be a multiple of 8. The bps table is rebuilt from the
    ring model so any cluster width works.
    """
    text = resources.files("moeplace").joinpath("configs/a100_8gpu.toml").read_text()
    doc = tomllib.loads(text)
    doc["num_gpus"] = num_gpus
    doc["gpus_per_node"] = min(doc["gpus_per_node"], num_gpus)
    if vexperts_per_gpu is not None:
        doc["vexperts_per_gpu"] = vexperts_per_gpu
    doc["bps"] = {"model": "ring"}
    return topology_from_dict(doc)
