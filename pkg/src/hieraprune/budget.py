"""Per-segment prune-ratio allocation.

Each segment is scored against its temporal context: similarity to what
comes after (representativeness) traded against dissimilarity to what came
before (novelty).  Scores are z-normalized and scaled by a deviation knob
to spread a stage's base prune ratio across segments, conserving the total
token budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroNorm
from .segmentation import SegmentMap
from .tensors import cosine_similarity

DEFAULT_LAMBDA = 0.5
DEFAULT_R_VAR = 0.1
RATIO_CEILING = 0.95
_STD_EPS = 1e-9


@dataclass
class BudgetVector:
    """Prunability scores b_m per segment, clamped to [0, 1]."""

    b: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        self.b = np.asarray(self.b, dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.b.mean())

    @property
    def std(self) -> float:
        # Population std: defined for a single segment, matches the z-score
        # degeneracy rule below.
        return float(self.b.std())


@dataclass
class SegmentRatios:
    """One stage's per-segment prune ratios."""

    base: float
    deviation: float
    ratios: np.ndarray

    def __post_init__(self) -> None:
        self.ratios = np.asarray(self.ratios, dtype=np.float64)


def _safe_cosine(a: np.ndarray, b: np.ndarray) -> float:
    try:
        return cosine_similarity(a, b)
    except ZeroNorm:
        return 0.0


def segment_budgets(segmap: SegmentMap, lam: float = DEFAULT_LAMBDA) -> BudgetVector:
    """Score each segment against the sum of its left and right neighbours.

    b_m = lam * cos(g_m, right_context) + (1 - lam) * (1 - cos(g_m, left_context));
    an empty context contributes similarity 0, so edge segments lean on the
    remaining term alone.  Scores are clamped to [0, 1].
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    g = [np.asarray(v, dtype=np.float64) for v in segmap.g]
    m = len(g)
    b = np.empty(m, dtype=np.float64)
    for idx in range(m):
        left = sum(g[:idx]) if idx > 0 else None
        right = sum(g[idx + 1 :]) if idx < m - 1 else None
        s_right = _safe_cosine(g[idx], right) if right is not None else 0.0
        s_left = _safe_cosine(g[idx], left) if left is not None else 0.0
        b[idx] = lam * s_right + (1.0 - lam) * (1.0 - s_left)
    return BudgetVector(np.clip(b, 0.0, 1.0), lam)


def allocate_ratios(
    budgets: BudgetVector,
    base: float,
    deviation: float,
    sizes,
) -> SegmentRatios:
    """Spread a stage's base prune ratio across segments by budget z-score.

    ``sizes`` gives per-segment token counts (a SegmentMap is accepted); the
    counts weight the conservation constraint:  after clamping raw ratios to
    [0, 0.95], deviations around the token-weighted mean are re-anchored at
    ``base`` and shrunk by a single factor if any segment would leave the
    valid range, so the weighted mean prune ratio equals ``base`` exactly.
    """
    if not 0.0 <= base <= RATIO_CEILING:
        raise ValueError(f"base ratio must be in [0, {RATIO_CEILING}], got {base}")
    if deviation < 0:
        raise ValueError(f"deviation must be >= 0, got {deviation}")
    if isinstance(sizes, SegmentMap):
        sizes = sizes.token_counts()
    sizes = np.asarray(sizes, dtype=np.float64)
    b = budgets.b
    m = len(b)
    if sizes.shape != (m,):
        raise ValueError(f"sizes length {sizes.shape} does not match {m} segments")

    std = budgets.std
    if m == 1 or std < _STD_EPS or deviation == 0.0:
        return SegmentRatios(base, deviation, np.full(m, base))

    z = (b - budgets.mean) / std
    raw = np.clip(base + deviation * z, 0.0, RATIO_CEILING)

    total = sizes.sum()
    if total <= 0:
        return SegmentRatios(base, deviation, np.full(m, base))
    weighted_mean = float((raw * sizes).sum() / total)
    delta = raw - weighted_mean  # token-weighted mean of delta is 0
    scale = 1.0
    for d, hi in ((delta.max(), RATIO_CEILING - base), (-delta.min(), base)):
        if d > 1e-15:
            scale = min(scale, hi / d)
    scale = max(scale, 0.0)
    return SegmentRatios(base, deviation, base + scale * delta)
