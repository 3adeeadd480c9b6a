"""``moeplace`` command line: gen, run, validate, dump-placement.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineKind, run_baseline
from .oracle import MAX_CELLS, compare_policy, greedy_placement, random_instance, solve_exact
from .policy import DEFAULT_HORIZON, BalanceMetric
from .simengine import (
    DEFAULT_THRESHOLD,
    PolicyMode,
    SimConfig,
    SimError,
    reports_to_csv,
    run,
    summarize,
)
from .topology import default_topology, load_topology
from .workload import (
    DEFAULT_DRIFT_RATE,
    DEFAULT_ZIPF_EXPONENT,
    TraceGeneratorConfig,
    generate_trace,
    load_trace,
    save_trace,
    top_k_share,
)

SCHEMA = "1"


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _factor(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("capacity factor must be > 0 (use 'inf' for no cap)")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moeplace", description="MoE expert placement simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic demand trace")
    g.add_argument("--experts", type=_positive_int, required=True)
    g.add_argument("--gpus", type=_positive_int, required=True)
    g.add_argument("--tokens", type=_positive_int, required=True, help="tokens per step (all GPUs)")
    g.add_argument("--zipf", type=float, default=DEFAULT_ZIPF_EXPONENT)
    g.add_argument("--drift", type=float, default=DEFAULT_DRIFT_RATE)
    g.add_argument("--steps", type=_positive_int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--top-k", type=_positive_int, default=10, help="k for the skewness summary")
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="simulate a trace")
    _sim_args(r)
    r.add_argument("--baseline", choices=[k.value for k in BaselineKind], default="flex")
    r.add_argument("--capacity-factor", type=_factor, default=1.0, help="static-ep only")
    r.add_argument("--replicate-top", type=_positive_int, default=1, help="full-replicate only")
    r.add_argument("--skip", type=int, default=100, help="warm-up steps left out of the tail balance mean")
    r.add_argument("--csv", help="per-step report CSV path")
    r.add_argument("--summary", help="summary JSON path (default: stdout)")
    r.add_argument("--compare", help="summary JSON of a reference run; adds speedup")

    v = sub.add_parser("validate", help="compare the planner with the exact oracle")
    v.add_argument("--gpus", type=_positive_int, required=True)
    v.add_argument("--experts", type=_positive_int, required=True)
    v.add_argument("--slots", type=_positive_int, default=2)
    v.add_argument("--instances", type=_positive_int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tokens-per-gpu", type=_positive_int, default=8192)
    v.add_argument("--max-zipf", type=float, default=2.0)
    v.add_argument("--horizon", type=_positive_int, default=DEFAULT_HORIZON)

    dp = sub.add_parser("dump-placement", help="print the live placement after a step")
    _sim_args(dp)
    dp.add_argument("--step", type=int, default=-1, help="step index (default: last)")
    dp.add_argument("--out", help="output path (default: stdout)")
    return ap


def _sim_args(p: argparse.ArgumentParser):
    p.add_argument("--trace", required=True)
    p.add_argument("--topology", help="TOML cluster profile (default: bundled A100 profile)")
    p.add_argument("--slots", type=_positive_int, help="vExpert slots per GPU (overrides the profile)")
    p.add_argument("--policy", default=None, help="dynamic | static | interval:K (flex only; default dynamic)")
    p.add_argument("--metric", choices=[m.value for m in BalanceMetric], default="max")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--horizon", type=_positive_int, default=DEFAULT_HORIZON)
    p.add_argument("--adjust-fraction", type=float, default=0.5)
    p.add_argument("--max-groups", type=_positive_int, default=64)
    p.add_argument("--no-migrate", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _topology(args, num_gpus: int):
    if args.topology:
        topo = load_topology(args.topology)
        if args.slots is not None:
            topo = replace(topo, vexperts_per_gpu=args.slots)
        if topo.num_gpus != num_gpus:
            raise UsageError(f"trace has {num_gpus} GPUs but the profile has {topo.num_gpus}")
        return topo
    return default_topology(num_gpus, args.slots)


def _sim_config(args) -> SimConfig:
    try:
        mode = PolicyMode.parse(args.policy or "dynamic")
        cfg = SimConfig(
            threshold=args.threshold,
            metric=BalanceMetric(args.metric),
            policy_mode=mode,
            horizon=args.horizon,
            adjust_bandwidth_fraction=args.adjust_fraction,
            max_live_groups=args.max_groups,
            migrations=not args.no_migrate,
            seed=args.seed,
        )
        cfg.validate()
    except SimError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _load(args):
    trace = load_trace(args.trace)
    if not trace:
        raise SimError(f"{args.trace}: empty trace")
    return trace, _topology(args, trace[0].num_gpus)


def cmd_gen(args) -> int:
    cfg = TraceGeneratorConfig(
        args.experts, args.gpus, args.tokens, args.zipf, args.drift, args.seed, args.steps
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trace = generate_trace(cfg)
    save_trace(trace, args.out)
    k = min(args.top_k, args.experts)
    print(f"wrote {len(trace)} steps to {args.out}")
    print(f"top{k}_share={top_k_share(trace[0], k):.3f}")
    return 0


def cmd_run(args) -> int:
    kind = BaselineKind(args.baseline)
    if kind is not BaselineKind.FLEX and args.policy is not None:
        raise UsageError(f"--policy only applies to the flex baseline, not {kind.value}")
    cfg = _sim_config(args)
    trace, topo = _load(args)
    reports = run_baseline(kind, trace, topo, cfg, args.capacity_factor, args.replicate_top)
    if args.csv:
        Path(args.csv).write_text(reports_to_csv(reports))
    summary = summarize(reports, skip=min(max(args.skip, 0), len(reports) - 1))
    out = {
        "schema": SCHEMA,
        "config": {
            "trace": str(args.trace),
            "baseline": kind.value,
            "capacity_factor": args.capacity_factor if math.isfinite(args.capacity_factor) else "inf",
            "replicate_top": args.replicate_top,
            "skip": args.skip,
            "sim": cfg.to_dict(),
            "topology": _topology_dict(topo),
        },
        "summary": summary,
    }
    if args.compare:
        ref = json.loads(Path(args.compare).read_text())
        out["speedup"] = ref["summary"]["mean_makespan_s"] / summary["mean_makespan_s"]
        out["reference"] = str(args.compare)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    else:
        print(text)
    return 0


def _topology_dict(topo) -> dict:
    d = asdict(topo)
    d["bps_table"] = {f"{n}:{'inter' if cross else 'intra'}": v for (n, cross), v in sorted(topo.bps_table.items())}
    return d


def cmd_validate(args) -> int:
    G, N, E = args.gpus, args.experts, args.slots
    if N * G > MAX_CELLS:
        raise UsageError(f"instance too large: experts x gpus = {N * G} > {MAX_CELLS}")
    if N > G * E:
        raise UsageError(f"insufficient slots: {N} experts > {G} GPUs x {E} slots")
    ratios = []
    print("instance,seed,greedy_s,oracle_s,ratio")
    for i in range(args.instances):
        seed = args.seed + i
        inst = random_instance(G, N, E, seed, args.tokens_per_gpu, args.max_zipf)
        sol = solve_exact(inst)
        ratio = compare_policy(inst, greedy_placement(inst, args.horizon), sol)
        ratios.append(ratio)
        print(f"{i},{seed},{ratio * sol.objective!r},{sol.objective!r},{ratio:.6f}")
    r = np.array(ratios)
    print(
        f"p50={np.percentile(r, 50):.4f} p90={np.percentile(r, 90):.4f} max={r.max():.4f} "
        f"within_1.10={int((r <= 1.10).sum())}/{len(r)}"
    )
    return 0


def cmd_dump_placement(args) -> int:
    cfg = _sim_config(args)
    trace, topo = _load(args)
    want = args.step if args.step >= 0 else len(trace) - 1
    if want >= len(trace):
        raise UsageError(f"--step {want} out of range (trace has {len(trace)} steps)")
    snap = {}

    def keep(report, placement):
        if report.step == trace[want].step:
            snap["p"] = placement

    run(trace[: want + 1], topo, cfg, on_step=keep)
    text = snap["p"].to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "validate": cmd_validate,
    "dump-placement": cmd_dump_placement,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"moeplace: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"moeplace: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
