"""Prefill FLOPs accounting over the decoder stack.

One layer processing n tokens costs 4*n*d^2 (attention projections) +
2*n^2*d (attention scores and values) + 2*n*d*m (FFN), evaluated in exact
integer arithmetic so ratios carry no rounding drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import Overflow, ScheduleInvalid


@dataclass(frozen=True)
class ModelDims:
    """Decoder dimensions: layer count, hidden size, FFN intermediate size."""

    layers: int
    hidden: int
    intermediate: int

    def __post_init__(self) -> None:
        if self.layers <= 0 or self.hidden <= 0 or self.intermediate <= 0:
            raise ScheduleInvalid(f"model dims must be positive, got {self}")


def layer_flops(n: int, dims: ModelDims) -> int:
    """Exact FLOPs for one layer over n tokens.

    Python integers are arbitrary precision, so the guaranteed-exact range
    (n <= 1e7, d and m <= 1e5) can never wrap; Overflow guards only against
    nonsensical negative inputs.
    """
    if n < 0:
        raise Overflow(f"token count must be >= 0, got {n}")
    n = int(n)
    d = int(dims.hidden)
    m = int(dims.intermediate)
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def pipeline_flops(
    per_stage_counts,
    boundaries,
    dims: ModelDims,
    baseline_count: int | None = None,
) -> dict:
    """Total prefill FLOPs for a staged schedule, plus the ratio to baseline.

    Stage i's count applies to layers [boundaries[i], boundaries[i+1]) with
    the final stage running to the last layer.  The baseline runs
    ``baseline_count`` tokens (the unpruned count; defaults to the stage-1
    count) through every layer.  Counting covers visual tokens only.
    """
    counts = [int(c) for c in per_stage_counts]
    bounds = [int(b) for b in boundaries]
    if len(counts) != len(bounds):
        raise ScheduleInvalid(
            f"{len(counts)} stage counts for {len(bounds)} boundaries"
        )
    if not bounds or bounds[0] != 0:
        raise ScheduleInvalid("boundaries must start at layer 0")
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ScheduleInvalid(f"boundaries must be strictly increasing: {bounds}")
    if bounds[-1] >= dims.layers:
        raise ScheduleInvalid(
            f"last boundary {bounds[-1]} must lie below layer count {dims.layers}"
        )

    edges = bounds + [dims.layers]
    per_stage = []
    total = 0
    for idx, count in enumerate(counts):
        span = edges[idx + 1] - edges[idx]
        stage_total = span * layer_flops(count, dims)
        per_stage.append(stage_total)
        total += stage_total

    if baseline_count is None:
        baseline_count = counts[0]
    baseline = dims.layers * layer_flops(int(baseline_count), dims)
    ratio = float(Fraction(total, baseline)) if baseline else 0.0
    return {
        "total": total,
        "per_stage": per_stage,
        "baseline": baseline,
        "ratio": ratio,
    }
