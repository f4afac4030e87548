"""Temporal merging of spatially static tokens.

A marked entry (t, i, j) in the top-K mask says position (i, j) barely
changed from frame t-1 to t.  Maximal consecutive marked entries at one
position therefore describe a static stretch; the stretch collapses into a
single token kept at its first frame (the anchor, one frame before the
first marked entry), whose value becomes the mean over the whole stretch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PlanMismatch
from .tensors import VideoTokens


@dataclass
class MergePlan:
    """Per-position merge runs for one video.

    Arrays are parallel over runs: position (row_i, col_j), anchor frame t0,
    run length (anchor plus marked followers), and the float32 mean value
    the anchor token will take.  ``dropped_ids`` are the flat token ids of
    the non-anchor run members, i.e. exactly the marked mask entries.
    """

    video_shape: tuple[int, int, int, int]
    row_i: np.ndarray
    col_j: np.ndarray
    t0: np.ndarray
    length: np.ndarray
    values: np.ndarray  # (n_runs, d) float32
    dropped_ids: np.ndarray

    @property
    def n_runs(self) -> int:
        return len(self.t0)

    @property
    def n_dropped(self) -> int:
        return len(self.dropped_ids)

    def stats(self) -> dict:
        n = self.video_shape[0] * self.video_shape[1] * self.video_shape[2]
        lengths = self.length
        return {
            "run_count": int(self.n_runs),
            "dropped_count": int(self.n_dropped),
            "survivor_count": int(n - self.n_dropped),
            "mean_run_length": float(lengths.mean()) if self.n_runs else 0.0,
            "max_run_length": int(lengths.max()) if self.n_runs else 0,
        }


def plan_merge(video: VideoTokens, mask: np.ndarray) -> MergePlan:
    """Derive merge runs from a global top-K mask over (t, i, j).

    Runs may span segment boundaries; merging operates over the whole video.
    """
    t, h, w, d = video.data.shape
    if mask.shape != (t, h, w):
        raise PlanMismatch(f"mask shape {mask.shape} vs video {(t, h, w)}")

    # Position-major layout so each row scans one grid position through time.
    per_pos = np.ascontiguousarray(mask.transpose(1, 2, 0)).reshape(h * w, t)
    prev = np.zeros_like(per_pos)
    prev[:, 1:] = per_pos[:, :-1]
    nxt = np.zeros_like(per_pos)
    nxt[:, :-1] = per_pos[:, 1:]
    start_flat = np.flatnonzero(per_pos & ~prev)  # first marked entry per run
    end_flat = np.flatnonzero(per_pos & ~nxt)  # last marked entry per run

    pos = start_flat // t
    ts = start_flat % t
    te = end_flat % t
    t0 = ts - 1  # anchor: the frame a run's first marked entry points back to
    length = te - ts + 2
    row_i = pos // w
    col_j = pos % w

    if len(t0):
        csum = np.zeros((t + 1, h, w, d), dtype=np.float64)
        np.cumsum(video.data, axis=0, dtype=np.float64, out=csum[1:])
        sums = csum[te + 1, row_i, col_j] - csum[t0, row_i, col_j]
        values = (sums / length[:, None]).astype(np.float32)
    else:
        values = np.zeros((0, d), dtype=np.float32)

    dropped = np.flatnonzero(mask.reshape(-1)).astype(np.int64)
    return MergePlan(
        video_shape=(t, h, w, d),
        row_i=row_i.astype(np.int64),
        col_j=col_j.astype(np.int64),
        t0=t0.astype(np.int64),
        length=length.astype(np.int64),
        values=values,
        dropped_ids=dropped,
    )


def apply_merge(video: VideoTokens, plan: MergePlan) -> VideoTokens:
    """Replace each run's anchor with the run mean and drop the followers.

    Survivor count is exactly N minus the number of marked mask entries.
    """
    if plan.video_shape != video.data.shape:
        raise PlanMismatch(
            f"plan shape {plan.video_shape} vs video {video.data.shape}"
        )
    merged = video.copy()
    if plan.n_runs:
        merged.data[plan.t0, plan.row_i, plan.col_j] = plan.values
    if plan.n_dropped:
        merged.alive.reshape(-1)[plan.dropped_ids] = False
    return merged
