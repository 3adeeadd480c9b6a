"""Per-step token demand: synthetic skewed/drifting traces and trace files.

A demand matrix ``D[e, g]`` counts tokens produced on GPU ``g`` whose gate
picked expert ``e``. Every step carries the same total batch ``B``.

Trace file format (CSV, sorted by step, expert, gpu; zero cells omitted)::

    step,expert,gpu,tokens
    0,0,0,12
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rounding import largest_remainder

# top-10 of 64 experts carry 75% of tokens at this exponent
DEFAULT_ZIPF_EXPONENT = 1.26
DEFAULT_DRIFT_RATE = 0.02

TRACE_HEADER = "step,expert,gpu,tokens"


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class TokenDemand:
    step: int
    demand: np.ndarray  # (num_experts, num_gpus) int64

    def __post_init__(self):
        d = np.asarray(self.demand, dtype=np.int64)
        if d.ndim != 2:
            raise WorkloadError("demand must be a 2-D (experts x gpus) matrix")
        if np.any(d < 0):
            raise WorkloadError("demand entries must be non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "demand", d)

    @property
    def num_experts(self) -> int:
        return self.demand.shape[0]

    @property
    def num_gpus(self) -> int:
        return self.demand.shape[1]

    @property
    def total(self) -> int:
        return int(self.demand.sum())

    def expert_loads(self) -> np.ndarray:
        return self.demand.sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, TokenDemand):
            return NotImplemented
        return self.step == other.step and np.array_equal(self.demand, other.demand)

    __hash__ = None


def expert_load(d: TokenDemand, e: int) -> int:
    return int(d.demand[e].sum())


def top_k_share(d: TokenDemand, k: int) -> float:
    loads = np.sort(d.expert_loads())[::-1]
    return float(loads[:k].sum() / loads.sum())


@dataclass(frozen=True)
class TraceGeneratorConfig:
    num_experts: int
    num_gpus: int
    tokens_per_step: int
    zipf_exponent: float = DEFAULT_ZIPF_EXPONENT
    drift_rate: float = DEFAULT_DRIFT_RATE
    seed: int = 0
    num_steps: int = 1

    def validate(self):
        if self.num_experts < 1 or self.num_gpus < 1:
            raise WorkloadError("num_experts and num_gpus must be >= 1")
        if self.tokens_per_step < 1:
            raise WorkloadError("tokens_per_step must be >= 1")
        if self.tokens_per_step % self.num_gpus:
            raise WorkloadError(
                f"tokens_per_step={self.tokens_per_step} is not divisible by num_gpus={self.num_gpus}"
            )
        if self.zipf_exponent < 0:
            raise WorkloadError("zipf_exponent must be >= 0")
        if not 0 <= self.drift_rate <= 1:
            raise WorkloadError("drift_rate must be in [0, 1]")
        if self.num_steps < 0:
            raise WorkloadError("num_steps must be >= 0")
        if self.tokens_per_step < self.num_experts * self.num_gpus:
            warnings.warn(
                "tokens_per_step < num_experts * num_gpus; many demand cells will be zero",
                stacklevel=3,
            )


def zipf_popularity(num_experts: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Zipf weights over a random permutation of expert ids."""
    ranks = np.arange(1, num_experts + 1, dtype=np.float64)
    weights = ranks ** -exponent
    weights /= weights.sum()
    p = np.empty(num_experts)
    p[rng.permutation(num_experts)] = weights
    return p


def popularity_walk(cfg: TraceGeneratorConfig) -> Iterator[np.ndarray]:
    """Yield the expert-popularity vector for each step.

    Each step multiplies every share by ``exp(u)``, ``u ~ U[-drift, drift]``,
    then renormalizes, so a share moves by at most a factor ``exp(2 drift)``.
    """
    rng = np.random.default_rng(cfg.seed)
    p = zipf_popularity(cfg.num_experts, cfg.zipf_exponent, rng)
    for t in range(cfg.num_steps):
        if t > 0 and cfg.drift_rate > 0:
            p = p * np.exp(rng.uniform(-cfg.drift_rate, cfg.drift_rate, cfg.num_experts))
            p /= p.sum()
        yield p


def demand_from_popularity(p: np.ndarray, num_gpus: int, tokens_per_step: int, step: int = 0) -> TokenDemand:
    per_gpu = tokens_per_step // num_gpus
    column = largest_remainder(per_gpu, p)
    return TokenDemand(step, np.repeat(column[:, None], num_gpus, axis=1))


def generate_trace(cfg: TraceGeneratorConfig) -> list[TokenDemand]:
    cfg.validate()
    return [
        demand_from_popularity(p, cfg.num_gpus, cfg.tokens_per_step, t)
        for t, p in enumerate(popularity_walk(cfg))
    ]


def save_trace(trace: Sequence[TokenDemand], path: str | Path):
    with open(path, "w") as f:
        f.write(TRACE_HEADER + "\n")
        for d in trace:
            for e, g in zip(*np.nonzero(d.demand)):
                f.write(f"{d.step},{e},{g},{d.demand[e, g]}\n")


def load_trace(
    path: str | Path,
    num_experts: int | None = None,
    num_gpus: int | None = None,
    tokens_per_step: int | None = None,
) -> list[TokenDemand]:
    """Parse a trace file.

    Shapes default to ``max index + 1`` over the whole file; pass them
    explicitly when trailing experts or GPUs may be idle. Every step must
    carry the same total (``tokens_per_step`` when given).
    """
    records: list[tuple[int, int, int, int]] = []
    with open(path) as f:
        header = f.readline().strip()
        if header != TRACE_HEADER:
            raise WorkloadError(f"line 1: expected header {TRACE_HEADER!r}, got {header!r}")
        prev = None
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise WorkloadError(f"line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                rec = tuple(int(x) for x in parts)
            except ValueError:
                raise WorkloadError(f"line {lineno}: non-integer field in {line!r}") from None
            step, e, g, tokens = rec
            if tokens < 0:
                raise WorkloadError(f"line {lineno}: negative token count {tokens}")
            if step < 0 or e < 0 or g < 0:
                raise WorkloadError(f"line {lineno}: negative index")
            key = (step, e, g)
            if prev is not None and key <= prev:
                raise WorkloadError(f"line {lineno}: records not sorted by (step, expert, gpu)")
            prev = key
            for bound, idx, what in ((num_experts, e, "expert"), (num_gpus, g, "gpu")):
                if bound is not None and idx >= bound:
                    raise WorkloadError(f"line {lineno}: {what} {idx} inconsistent with declared count {bound}")
            records.append(rec)

    if not records:
        return []
    n = num_experts if num_experts is not None else max(r[1] for r in records) + 1
    gcount = num_gpus if num_gpus is not None else max(r[2] for r in records) + 1
    num_steps = records[-1][0] + 1
    mats = np.zeros((num_steps, n, gcount), dtype=np.int64)
    for step, e, g, tokens in records:
        mats[step, e, g] = tokens

    totals = mats.sum(axis=(1, 2))
    expected = tokens_per_step if tokens_per_step is not None else int(totals[0])
    for step, total in enumerate(totals):
        if total != expected:
            raise WorkloadError(f"step {step}: total tokens {total} != {expected}")
    return [TokenDemand(t, mats[t]) for t in range(num_steps)]
