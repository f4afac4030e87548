"""Diversity-aware token selection via greedy max-determinant inference.

Tokens are scored for instruction relevance, the scores modulate a Gram
kernel on both sides, the kernel splits block-diagonally by segment, and a
greedy selector picks the subset maximizing the kernel subdeterminant one
item at a time.  The incremental-Cholesky formulation in ``_kernels`` makes
each block cost O(n_m k^2) while matching the naive determinant-ratio
greedy exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import BudgetExceeded, SegmentMismatch

RELEVANCE_FLOOR = 1e-4
DIAG_JITTER = 1e-10
_FLAT_EPS = 1e-12


@dataclass
class RelevanceVector:
    """Instruction relevance per token, min-max scaled into [floor, 1]."""

    r: np.ndarray
    logits: np.ndarray  # raw scaled dot products, kept for debugging


@dataclass
class DppKernel:
    """Relevance-modulated Gram kernel, stored per segment block.

    Cross-segment entries are structurally zero and never materialized.
    ``row_sets[m]`` maps block m's local indices to rows of the embedding
    matrix the kernel was built from.
    """

    blocks: list[np.ndarray]
    row_sets: list[np.ndarray]

    @property
    def n_items(self) -> int:
        return sum(len(s) for s in self.row_sets)


@dataclass
class SelectionBlock:
    """Greedy picks for one segment, in selection order."""

    kept: np.ndarray  # row indices into the embedding matrix
    log_det_trace: list  # cumulative log det after each pick; None past breakdown
    breakdown_step: int | None = None


@dataclass
class Selection:
    """Union of per-segment picks; ``kept`` is sorted into original order."""

    blocks: list[SelectionBlock] = field(default_factory=list)

    @property
    def kept(self) -> np.ndarray:
        if not self.blocks:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([b.kept for b in self.blocks]))

    def kept_counts(self) -> list[int]:
        return [len(b.kept) for b in self.blocks]


def relevance(h_v: np.ndarray, h_t: np.ndarray) -> RelevanceVector:
    """Scaled-dot-product relevance of each token to the instruction.

    softmax over (H_t . v_i)/sqrt(d), then min-max scaled to [0, 1] and
    floored at 1e-4 so the weakest token stays selectable on diversity
    grounds.  Constant logits collapse min-max; the convention is r = 1.
    """
    h_v = np.asarray(h_v, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64).reshape(-1)
    if h_v.ndim != 2 or h_v.shape[1] != h_t.shape[0]:
        raise SegmentMismatch(
            f"relevance: embeddings {h_v.shape} vs instruction dim {h_t.shape[0]}"
        )
    d = h_v.shape[1]
    logits = (h_v @ h_t) / math.sqrt(d)
    shifted = logits - logits.max()
    p = np.exp(shifted)
    p /= p.sum()
    span = p.max() - p.min()
    if span < _FLAT_EPS:
        r = np.ones_like(p)
    else:
        r = np.maximum((p - p.min()) / span, RELEVANCE_FLOOR)
    return RelevanceVector(r, logits)


def build_kernel(h_v: np.ndarray, rel: RelevanceVector, row_sets) -> DppKernel:
    """Per-segment blocks of r_i r_j (v_i . v_j) / d.

    ``row_sets`` must partition the rows of ``h_v``; order within a set is
    preserved as the block's local order.
    """
    h_v = np.asarray(h_v, dtype=np.float64)
    n, d = h_v.shape
    row_sets = [np.asarray(s, dtype=np.int64) for s in row_sets]
    seen = np.zeros(n, dtype=bool)
    for s in row_sets:
        if len(s) and (s.min() < 0 or s.max() >= n):
            raise SegmentMismatch(f"row set exceeds [0, {n})")
        if np.any(seen[s]):
            raise SegmentMismatch("row sets overlap")
        seen[s] = True
    if not np.all(seen):
        raise SegmentMismatch("row sets do not cover every token")

    blocks = []
    for s in row_sets:
        v = h_v[s]
        gram = (v @ v.T) / d
        r = rel.r[s]
        block = gram * np.outer(r, r)
        blocks.append(0.5 * (block + block.T))  # exact symmetry
    return DppKernel(blocks, row_sets)


def greedy_map(
    block: np.ndarray,
    k: int,
    relevance_scores: np.ndarray | None = None,
    backend: str | None = None,
) -> SelectionBlock:
    """Greedily select k items maximizing det of the kernel submatrix.

    A jitter of 1e-10 is added to the diagonal for numerical robustness;
    ties go to the lowest index.  If a pivot collapses below 1e-12 before k
    items are chosen (rank deficiency), the remaining picks fall back to
    the highest remaining relevance — or the kernel diagonal when no
    relevance is supplied — and their trace entries are None.
    """
    block = np.asarray(block, dtype=np.float64)
    n = block.shape[0]
    if block.shape != (n, n):
        raise SegmentMismatch(f"kernel block must be square, got {block.shape}")
    if k > n:
        raise BudgetExceeded(f"kept count {k} exceeds block size {n}")
    if k < 0:
        raise BudgetExceeded(f"kept count must be >= 0, got {k}")
    jittered = block + DIAG_JITTER * np.eye(n)
    selected, gains, breakdown = _kernels.greedy_select(jittered, k, backend=backend)

    trace: list = []
    total = 0.0
    n_good = k if breakdown < 0 else breakdown
    for step in range(n_good):
        total += math.log(gains[step])
        trace.append(total)

    if breakdown >= 0:
        kept = list(selected[:breakdown])
        scores = (
            np.asarray(relevance_scores, dtype=np.float64)
            if relevance_scores is not None
            else np.diag(block)
        )
        chosen = np.zeros(n, dtype=bool)
        chosen[np.asarray(kept, dtype=np.int64)] = True
        order = np.lexsort((np.arange(n), -scores))
        for idx in order:
            if len(kept) == k:
                break
            if not chosen[idx]:
                kept.append(int(idx))
                chosen[idx] = True
                trace.append(None)
        return SelectionBlock(
            np.asarray(kept, dtype=np.int64), trace, breakdown_step=int(breakdown)
        )
    return SelectionBlock(selected.astype(np.int64), trace, breakdown_step=None)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def prune_tokens(
    h_v: np.ndarray,
    h_t: np.ndarray,
    row_sets,
    ratios,
    kept_counts: list[int] | None = None,
    backend: str | None = None,
    threads: int = 1,
) -> Selection:
    """Segment-wise diverse selection at per-segment prune ratios.

    Keeps k_m = round_half_up((1 - ratio_m) * n_m) per segment, at least one
    token per nonempty segment; ``kept_counts`` overrides the per-segment
    arithmetic when the caller has already apportioned a stage total.
    Blocks are independent, so results do not depend on processing order or
    thread count.
    """
    rel = relevance(h_v, h_t)
    kernel = build_kernel(h_v, rel, row_sets)
    ratios = np.asarray(getattr(ratios, "ratios", ratios), dtype=np.float64)
    if len(ratios) != len(kernel.blocks):
        raise SegmentMismatch(
            f"{len(ratios)} ratios for {len(kernel.blocks)} segments"
        )
    if kept_counts is None:
        kept_counts = []
        for ratio, rows in zip(ratios, kernel.row_sets):
            n_m = len(rows)
            kept_counts.append(min(n_m, max(1, round_half_up((1.0 - ratio) * n_m))) if n_m else 0)

    def run_block(m: int) -> SelectionBlock:
        rows = kernel.row_sets[m]
        picked = greedy_map(
            kernel.blocks[m], kept_counts[m], rel.r[rows], backend=backend
        )
        picked.kept = rows[picked.kept]
        return picked

    indices = range(len(kernel.blocks))
    if threads > 1 and len(kernel.blocks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run_block, indices))
    else:
        blocks = [run_block(m) for m in indices]
    return Selection(blocks)
