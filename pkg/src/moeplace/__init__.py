"""Simulator for dynamic expert placement in Mixture-of-Experts training."""

from .baselines import BaselineKind, run_baseline
from .costmodel import step_cost
from .oracle import OracleInstance, solve_exact
from .placement import Placement, PlacementOp, initial_placement
from .policy import BalanceMetric, balance_ratio, make_scheduling_plan
from .router import RoutingPlan, route
from .simengine import PolicyMode, SimConfig, run, summarize
from .topology import ClusterTopology, default_topology, load_topology
from .workload import TokenDemand, TraceGeneratorConfig, generate_trace

__version__ = "0.1.0"

__all__ = [
    "BalanceMetric",
    "BaselineKind",
    "ClusterTopology",
    "OracleInstance",
    "Placement",
    "PlacementOp",
    "PolicyMode",
    "RoutingPlan",
    "SimConfig",
    "TokenDemand",
    "TraceGeneratorConfig",
    "balance_ratio",
    "default_topology",
    "generate_trace",
    "initial_placement",
    "load_topology",
    "make_scheduling_plan",
    "route",
    "run",
    "run_baseline",
    "solve_exact",
    "step_cost",
    "summarize",
]
