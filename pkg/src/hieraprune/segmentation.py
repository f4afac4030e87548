"""Temporal segmentation from inter-frame token similarity.

A video is cut where the fraction of a frame's grid positions that land in
the global top-K similarity set (the "overlap ratio") drops below a
threshold.  The same top-K mask later drives temporal merging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import BudgetTooLarge, InvalidTensor
from .tensors import NORM_EPS, VideoTokens

DEFAULT_BETA = 0.4


@dataclass
class SimilarityStack:
    """Per-position cosine maps S_t between frame t and t-1, t = 1..T-1."""

    values: np.ndarray  # (T-1, H, W) float64 in [-1, 1]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise InvalidTensor("SimilarityStack: expected (T-1, H, W) values")
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise InvalidTensor("SimilarityStack: non-finite similarity")

    @property
    def n_maps(self) -> int:
        return self.values.shape[0]


@dataclass
class SegmentMap:
    """Contiguous frame segments plus per-segment pooled representations.

    ``segments`` holds (start, end) frame ranges with exclusive ends;
    ``token_sets`` the flat ids of alive tokens per segment at build time;
    ``g`` the float64 mean embedding over those tokens (zeros for a segment
    whose tokens were all merged away).
    """

    boundaries: list[int]
    segments: list[tuple[int, int]]
    g: list[np.ndarray]
    token_sets: list[np.ndarray]

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def token_counts(self) -> list[int]:
        return [len(s) for s in self.token_sets]

    @classmethod
    def from_boundaries(cls, boundaries: list[int], video: VideoTokens) -> "SegmentMap":
        """Build segment ranges, token sets, and pooled means for a video.

        Reusable after merging: token sets reflect the video's current alive
        mask.
        """
        t = video.n_frames
        bounds = sorted(set(int(b) for b in boundaries))
        if not bounds or bounds[0] != 0:
            bounds = [0] + [b for b in bounds if b != 0]
        if any(b < 0 or b >= max(t, 1) for b in bounds):
            raise InvalidTensor(f"SegmentMap: boundary outside [0, {t})")
        segments = []
        for idx, start in enumerate(bounds):
            end = bounds[idx + 1] if idx + 1 < len(bounds) else t
            segments.append((start, end))

        hw = video.height * video.width
        flat_alive = video.alive.reshape(-1)
        emb = video.data.reshape(-1, video.dim)
        token_sets = []
        g = []
        for start, end in segments:
            lo, hi = start * hw, end * hw
            ids = np.flatnonzero(flat_alive[lo:hi]) + lo
            token_sets.append(ids.astype(np.int64))
            if len(ids):
                g.append(emb[ids].astype(np.float64).mean(axis=0))
            else:
                g.append(np.zeros(video.dim, dtype=np.float64))
        return cls(bounds, segments, g, token_sets)


def similarity_stack(video: VideoTokens, backend: str | None = None) -> SimilarityStack:
    """Cosine between corresponding grid positions of consecutive frames.

    Zero-norm positions contribute similarity 0 (degenerate tokens never
    look static).
    """
    values = _kernels.similarity_stack(video.data, NORM_EPS, backend=backend)
    return SimilarityStack(values)


def global_topk_mask(
    stack: SimilarityStack, merge_ratio: float, total_tokens: int | None = None
) -> np.ndarray:
    """Boolean (T, H, W) mask of the K best similarity entries video-wide.

    K = floor(merge_ratio * N) with N the whole-video token count; the K
    largest values across all frames and positions jointly are marked, ties
    broken by ascending (t, i, j).  Frame 0 has no predecessor and is never
    marked.
    """
    if not 0.0 <= merge_ratio < 1.0:
        raise InvalidTensor(f"merge_ratio must be in [0, 1), got {merge_ratio}")
    n_maps, h, w = stack.values.shape
    if total_tokens is None:
        total_tokens = (n_maps + 1) * h * w
    k = int(np.floor(merge_ratio * total_tokens))
    available = n_maps * h * w
    if k > available:
        raise BudgetTooLarge(
            f"top-K budget {k} exceeds {available} rankable entries"
        )
    mask = np.zeros((n_maps + 1, h, w), dtype=bool)
    if k == 0:
        return mask
    flat = stack.values.reshape(-1)
    # Primary key: similarity descending; secondary: flat index ascending,
    # which is exactly lexicographic (t, i, j).
    order = np.lexsort((np.arange(flat.size), -flat))
    marked = order[:k]
    mask.reshape(-1)[marked + h * w] = True  # shift past the unmarked frame 0
    return mask


def overlap_ratio(mask: np.ndarray, t: int) -> float:
    """Fraction of frame t's grid positions marked in the top-K mask."""
    if t < 1 or t >= mask.shape[0]:
        raise InvalidTensor(f"overlap_ratio: frame {t} outside [1, {mask.shape[0]})")
    return float(mask[t].mean())


def segment(
    video: VideoTokens, mask: np.ndarray, beta: float = DEFAULT_BETA
) -> SegmentMap:
    """Cut the video before every frame whose overlap ratio is below beta.

    Frame 0 always opens the first segment.
    """
    if not 0.0 <= beta <= 1.0:
        raise InvalidTensor(f"beta must be in [0, 1], got {beta}")
    if mask.shape != video.data.shape[:3]:
        raise InvalidTensor("segment: mask shape disagrees with video")
    boundaries = [0]
    for t in range(1, video.n_frames):
        if overlap_ratio(mask, t) < beta:
            boundaries.append(t)
    return SegmentMap.from_boundaries(boundaries, video)
