"""Staged pruning over an embedding provider.

Stage 1 (the input boundary) segments the video and merges static tokens.
Entering stage 2 the survivors are ranked by instruction relevance and the
weakest fraction dropped.  Entering each later stage, per-segment budgets
spread that stage's prune ratio and the diverse-selection kernel picks the
survivors segment by segment.  A provider supplies the embeddings seen at
every stage boundary, standing in for the backbone this artifact does not
run.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .budget import (
    DEFAULT_LAMBDA,
    DEFAULT_R_VAR,
    RATIO_CEILING,
    allocate_ratios,
    segment_budgets,
)
from .cost import ModelDims, pipeline_flops
from .dpp import Selection, SelectionBlock, prune_tokens, relevance, round_half_up
from .errors import ConfigError, ScheduleInvalid
from .merge import apply_merge, plan_merge
from .segmentation import (
    DEFAULT_BETA,
    SegmentMap,
    global_topk_mask,
    segment,
    similarity_stack,
)
from .tensors import (
    InstructionEmbedding,
    VideoTokens,
    read_tensor_file,
)

DEFAULT_DIMS = ModelDims(layers=28, hidden=3584, intermediate=18944)


def default_boundaries(n_stages: int, layers: int) -> list[int]:
    """Equal-quarter stage boundaries: {0, ceil(L/4), ceil(L/2), ...}."""
    return [0] + [math.ceil(layers * i / n_stages) for i in range(1, n_stages)]


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit arg, else HIERAPRUNE_THREADS, else cpu count."""
    if threads is not None:
        return max(1, int(threads))
    raw = os.environ.get("HIERAPRUNE_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"HIERAPRUNE_THREADS: not an integer: {raw!r}") from exc
        if value < 1:
            raise ConfigError(f"HIERAPRUNE_THREADS: must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


@dataclass
class PruneSchedule:
    """All knobs of a staged run."""

    n_stages: int = 4
    boundaries: list[int] | None = None
    r_merge: float = 0.0
    r_prune: list[float] | None = None
    r_var: float = DEFAULT_R_VAR
    lam: float = DEFAULT_LAMBDA
    beta: float = DEFAULT_BETA
    seed: int = 0
    dims: ModelDims = DEFAULT_DIMS

    def __post_init__(self) -> None:
        if self.n_stages < 2:
            raise ScheduleInvalid(f"n_stages must be >= 2, got {self.n_stages}")
        if self.boundaries is None:
            self.boundaries = default_boundaries(self.n_stages, self.dims.layers)
        self.boundaries = [int(b) for b in self.boundaries]
        if len(self.boundaries) != self.n_stages:
            raise ScheduleInvalid(
                f"{len(self.boundaries)} boundaries for {self.n_stages} stages"
            )
        if self.boundaries[0] != 0:
            raise ScheduleInvalid("stage 1 must start at layer 0")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ScheduleInvalid(f"boundaries not strictly increasing: {self.boundaries}")
        if self.boundaries[-1] >= self.dims.layers:
            raise ScheduleInvalid(
                f"boundary {self.boundaries[-1]} outside [0, {self.dims.layers})"
            )
        if not 0.0 <= self.r_merge < 1.0:
            raise ScheduleInvalid(f"r_merge must be in [0, 1), got {self.r_merge}")
        if self.r_prune is None:
            self.r_prune = [0.0] * (self.n_stages - 1)
        self.r_prune = [float(r) for r in self.r_prune]
        if len(self.r_prune) != self.n_stages - 1:
            raise ScheduleInvalid(
                f"r_prune needs {self.n_stages - 1} entries (stages 2..{self.n_stages}),"
                f" got {len(self.r_prune)}"
            )
        for r in self.r_prune:
            if not 0.0 <= r <= RATIO_CEILING:
                raise ScheduleInvalid(
                    f"prune ratios must be in [0, {RATIO_CEILING}], got {r}"
                )
        if not 0.0 <= self.beta <= 1.0:
            raise ScheduleInvalid(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ScheduleInvalid(f"lambda must be in [0, 1], got {self.lam}")
        if self.r_var < 0:
            raise ScheduleInvalid(f"r_var must be >= 0, got {self.r_var}")


class EmbeddingProvider:
    """Source of per-stage token embeddings for surviving tokens."""

    def bind(self, video: VideoTokens, instruction: InstructionEmbedding) -> None:
        self._video = video
        self._instruction = instruction

    def at_stage(self, stage: int, alive_ids: np.ndarray):
        raise NotImplementedError


class IdentityProvider(EmbeddingProvider):
    """Embeddings frozen at their input values across all stages."""

    def at_stage(self, stage: int, alive_ids: np.ndarray):
        emb = self._video.data.reshape(-1, self._video.dim)[alive_ids]
        return emb.astype(np.float64), self._instruction.data.astype(np.float64)


class SyntheticProvider(EmbeddingProvider):
    """Deterministic seeded orthogonal mixing applied cumulatively per stage.

    Every token and the instruction rotate by the same stage transform, so
    geometry (and thus selections) stays meaningful while the embeddings
    genuinely change between stages.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._mixes: dict[int, np.ndarray] = {}

    def _cumulative_mix(self, stage: int, dim: int) -> np.ndarray:
        if stage not in self._mixes:
            q_total = np.eye(dim)
            for s in range(2, stage + 1):
                rng = np.random.default_rng(self.seed * 100003 + s)
                gauss = rng.standard_normal((dim, dim))
                q, r = np.linalg.qr(gauss)
                q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
                q_total = q @ q_total
            self._mixes[stage] = q_total
        return self._mixes[stage]

    def at_stage(self, stage: int, alive_ids: np.ndarray):
        dim = self._video.dim
        q = self._cumulative_mix(stage, dim)
        emb = self._video.data.reshape(-1, dim)[alive_ids].astype(np.float64)
        return emb @ q.T, q @ self._instruction.data.astype(np.float64)


class FileProvider(EmbeddingProvider):
    """Recorded hidden states: stage{i}.hvtk (full video grid) and
    instr{i}.hvtk (vector) under one directory."""

    def __init__(self, directory):
        self.directory = os.fspath(directory)

    def at_stage(self, stage: int, alive_ids: np.ndarray):
        video_path = os.path.join(self.directory, f"stage{stage}.hvtk")
        instr_path = os.path.join(self.directory, f"instr{stage}.hvtk")
        recorded = read_tensor_file(video_path)
        if recorded.data.shape != self._video.data.shape:
            raise ScheduleInvalid(
                f"{video_path}: grid {recorded.data.shape} does not match video"
                f" {self._video.data.shape}"
            )
        instr = read_tensor_file(instr_path)
        emb = recorded.data.reshape(-1, recorded.dim)[alive_ids]
        return emb.astype(np.float64), instr.data.astype(np.float64)


@dataclass
class PruneReport:
    """Everything a staged run decided, measured, and kept."""

    n0: int
    stage_counts: list[int]
    stage_kept: list[np.ndarray]
    segment_boundaries: list[int]
    budgets: list[float]
    segment_ratios: dict[int, list[float]]
    segment_kept_counts: dict[int, list[int]]
    flops: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "n0": self.n0,
            "stage_counts": list(self.stage_counts),
            "segment_boundaries": list(self.segment_boundaries),
            "budgets": [float(b) for b in self.budgets],
            "segment_ratios": {
                str(stage): [float(r) for r in ratios]
                for stage, ratios in sorted(self.segment_ratios.items())
            },
            "segment_kept_counts": {
                str(stage): [int(c) for c in counts]
                for stage, counts in sorted(self.segment_kept_counts.items())
            },
            "flops": {
                "total": int(self.flops["total"]),
                "per_stage": [int(f) for f in self.flops["per_stage"]],
                "baseline": int(self.flops["baseline"]),
                "ratio": float(self.flops["ratio"]),
            },
            "stage_kept": [[int(i) for i in kept] for kept in self.stage_kept],
        }
        if include_timing:
            out["timings"] = {k: float(v) for k, v in self.timings.items()}
        return out


def apportion_kept(sizes, ratios, target: int) -> list[int]:
    """Per-segment kept counts near round_half_up((1-r)*n), summing to target.

    Counts stay within [1, n_m] for nonempty segments (0 for empty ones);
    the residual against ``target`` is settled one token at a time on the
    segment whose count is farthest from its unrounded value, lowest index
    first.  When the bounds make ``target`` unreachable the result gets as
    close as the bounds allow.
    """
    sizes = [int(n) for n in sizes]
    exact = [(1.0 - r) * n for r, n in zip(ratios, sizes)]
    lo = [1 if n > 0 else 0 for n in sizes]
    kept = [
        min(n, max(l, round_half_up(x))) for x, n, l in zip(exact, sizes, lo)
    ]
    diff = target - sum(kept)
    while diff != 0:
        if diff > 0:
            candidates = [m for m in range(len(sizes)) if kept[m] < sizes[m]]
            if not candidates:
                break
            pick = max(candidates, key=lambda m: (exact[m] - kept[m], -m))
            kept[pick] += 1
            diff -= 1
        else:
            candidates = [m for m in range(len(sizes)) if kept[m] > lo[m]]
            if not candidates:
                break
            pick = max(candidates, key=lambda m: (kept[m] - exact[m], -m))
            kept[pick] -= 1
            diff += 1
    return kept


def token_count_recurrence(schedule: PruneSchedule, n0: int) -> list[int]:
    """Closed-form per-stage token counts, rounded half up per stage.

    Stage 1 count applies the merge ratio; every later stage applies its
    prune ratio to the previous count, flooring at one surviving token.
    """
    if n0 < 0:
        raise ScheduleInvalid(f"initial token count must be >= 0, got {n0}")
    if n0 == 0:
        return [0] * schedule.n_stages
    counts = [max(1, round_half_up(n0 * (1.0 - schedule.r_merge)))]
    for base in schedule.r_prune:
        counts.append(max(1, round_half_up(counts[-1] * (1.0 - base))))
    return counts


def run_pipeline(
    video: VideoTokens,
    instruction: InstructionEmbedding,
    schedule: PruneSchedule,
    provider: EmbeddingProvider,
    threads: int | None = None,
    backend: str | None = None,
) -> PruneReport:
    """Execute the staged schedule and account for its prefill cost."""
    if instruction.dim != video.dim:
        raise ScheduleInvalid(
            f"instruction dim {instruction.dim} does not match video dim {video.dim}"
        )
    threads = resolve_threads(threads)
    timings: dict[str, float] = {}
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    stack = similarity_stack(video, backend=backend)
    mask = global_topk_mask(stack, schedule.r_merge, video.total_tokens)
    segmap_input = segment(video, mask, schedule.beta)
    timings["segmentation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    merged = apply_merge(video, plan_merge(video, mask))
    segmap = SegmentMap.from_boundaries(segmap_input.boundaries, merged)
    budgets = segment_budgets(segmap, schedule.lam)
    timings["merge"] = time.perf_counter() - t0

    provider.bind(merged, instruction)
    hw = video.height * video.width
    alive = merged.alive_token_ids()
    stage_counts = [len(alive)]
    stage_kept = [alive.copy()]
    segment_ratios: dict[int, list[float]] = {}
    segment_kept_counts: dict[int, list[int]] = {}

    for stage in range(2, schedule.n_stages + 1):
        t0 = time.perf_counter()
        base = schedule.r_prune[stage - 2]
        n_cur = len(alive)
        target = max(1, round_half_up(n_cur * (1.0 - base))) if n_cur else 0
        h_v, h_t = provider.at_stage(stage, alive)
        if stage == 2:
            # Relevance-only pruning, applied globally across segments.
            rel = relevance(h_v, h_t)
            order = np.lexsort((np.arange(n_cur), -rel.r))
            alive = alive[np.sort(order[:target])]
        else:
            frames = alive // hw
            row_sets = [
                np.flatnonzero((frames >= start) & (frames < end))
                for start, end in segmap.segments
            ]
            sizes = [len(rs) for rs in row_sets]
            ratios = allocate_ratios(budgets, base, schedule.r_var, sizes)
            counts = apportion_kept(sizes, ratios.ratios, target)
            selection = prune_tokens(
                h_v,
                h_t,
                row_sets,
                ratios,
                kept_counts=counts,
                backend=backend,
                threads=threads,
            )
            alive = alive[selection.kept]
            segment_ratios[stage] = [float(r) for r in ratios.ratios]
            segment_kept_counts[stage] = selection.kept_counts()
        stage_counts.append(len(alive))
        stage_kept.append(alive.copy())
        timings[f"stage{stage}"] = time.perf_counter() - t0

    flops = pipeline_flops(
        stage_counts,
        schedule.boundaries,
        schedule.dims,
        baseline_count=video.total_tokens,
    )
    timings["total"] = time.perf_counter() - t_total
    return PruneReport(
        n0=video.total_tokens,
        stage_counts=stage_counts,
        stage_kept=stage_kept,
        segment_boundaries=list(segmap.boundaries),
        budgets=[float(b) for b in budgets.b],
        segment_ratios=segment_ratios,
        segment_kept_counts=segment_kept_counts,
        flops=flops,
        timings=timings,
    )


def baseline_random(
    video: VideoTokens,
    keep_fraction: float,
    seed: int,
    keep_count: int | None = None,
) -> Selection:
    """Uniform random kept set of exact size ceil(fraction * n), seeded."""
    alive = video.alive_token_ids()
    n = len(alive)
    if keep_count is None:
        keep_count = min(n, math.ceil(keep_fraction * n))
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=keep_count, replace=False))
    return Selection([SelectionBlock(alive[rows], [])])


def baseline_relevance_only(
    video: VideoTokens,
    instruction: InstructionEmbedding,
    keep_fraction: float,
    keep_count: int | None = None,
) -> Selection:
    """Keep the top ceil(fraction * n) tokens by instruction relevance."""
    alive = video.alive_token_ids()
    n = len(alive)
    if keep_count is None:
        keep_count = min(n, math.ceil(keep_fraction * n))
    rel = relevance(video.alive_embeddings(), instruction.data)
    order = np.lexsort((np.arange(n), -rel.r))
    rows = np.sort(order[:keep_count])
    return Selection([SelectionBlock(alive[rows], [])])
