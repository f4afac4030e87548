"""Hot numeric kernels with two interchangeable backends.

The numba backend (default when numba imports) JIT-compiles the greedy
max-determinant selection loop and the per-position similarity map; the
pure-numpy backend expresses the same arithmetic with vectorized ops.
Selection is controlled by the HIERAPRUNE_BACKEND environment variable
("numba" or "numpy"), read at call time so tests can switch per-case.

Both backends implement identical tie rules (first index wins) and the same
pivot threshold, so selections agree except on differences at the level of
float rounding. ``benchmarks/bench_backends.py`` times them side by side.
"""

from __future__ import annotations

import math
import os

import numpy as np

PIVOT_EPS = 1e-12

_NUMBA_STATE = {"checked": False, "available": False}


def numba_available() -> bool:
    if not _NUMBA_STATE["checked"]:
        try:
            import numba  # noqa: F401

            _NUMBA_STATE["available"] = True
        except ImportError:
            _NUMBA_STATE["available"] = False
        _NUMBA_STATE["checked"] = True
    return _NUMBA_STATE["available"]


def active_backend() -> str:
    """Resolve the backend name from HIERAPRUNE_BACKEND or availability."""
    raw = os.environ.get("HIERAPRUNE_BACKEND", "").strip().lower()
    if raw in ("numba", "numpy"):
        if raw == "numba" and not numba_available():
            raise ValueError("HIERAPRUNE_BACKEND=numba but numba is not importable")
        return raw
    if raw:
        raise ValueError(f"HIERAPRUNE_BACKEND: unknown backend {raw!r}")
    return "numba" if numba_available() else "numpy"


# ---------------------------------------------------------------------------
# Greedy max-determinant selection (incremental Cholesky)
#
# Maintains, for every candidate i, the squared marginal gain d2[i] =
# conditional variance of item i given the current selection, plus the
# partial Cholesky row c[i, :step]. Picking j and updating
#   e_i = (K[j, i] - c[j] . c[i]) / sqrt(d2[j]);  d2[i] -= e_i^2
# reproduces exactly the determinant-ratio greedy at O(n k^2) total cost.
# ---------------------------------------------------------------------------


def _greedy_select_numpy(kernel: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, int]:
    n = kernel.shape[0]
    cis = np.zeros((k, n), dtype=np.float64)
    d2 = np.array(np.diag(kernel), dtype=np.float64)
    chosen = np.zeros(n, dtype=bool)
    selected = np.full(k, -1, dtype=np.int64)
    gains = np.full(k, np.nan, dtype=np.float64)
    for step in range(k):
        live = np.where(chosen, -np.inf, d2)
        j = int(np.argmax(live))  # argmax returns the first (lowest) index on ties
        best = live[j]
        if not best > PIVOT_EPS:
            return selected, gains, step
        dj = math.sqrt(best)
        eis = (kernel[j] - cis[:step, j] @ cis[:step]) / dj
        cis[step] = eis
        d2 -= eis * eis
        selected[step] = j
        gains[step] = best
        chosen[j] = True
    return selected, gains, -1


_NUMBA_IMPLS = {}


def _build_numba_impls():
    from numba import njit

    @njit(cache=True, nogil=True)
    def greedy_select(kernel, k):  # pragma: no cover - exercised via dispatch
        n = kernel.shape[0]
        cis = np.zeros((n, k), dtype=np.float64)  # row-per-item for locality
        d2 = np.empty(n, dtype=np.float64)
        for i in range(n):
            d2[i] = kernel[i, i]
        chosen = np.zeros(n, dtype=np.bool_)
        selected = np.full(k, -1, dtype=np.int64)
        gains = np.full(k, np.nan, dtype=np.float64)
        for step in range(k):
            j = -1
            best = -np.inf
            for i in range(n):
                if not chosen[i] and d2[i] > best:
                    best = d2[i]
                    j = i
            if j < 0 or not best > PIVOT_EPS:
                return selected, gains, step
            dj = np.sqrt(best)
            for i in range(n):
                acc = kernel[j, i]
                for s in range(step):
                    acc -= cis[j, s] * cis[i, s]
                e = acc / dj
                cis[i, step] = e
                d2[i] -= e * e
            selected[step] = j
            gains[step] = best
            chosen[j] = True
        return selected, gains, -1

    @njit(cache=True, nogil=True)
    def similarity_map(prev, cur, eps):  # pragma: no cover - exercised via dispatch
        h, w, d = prev.shape
        out = np.zeros((h, w), dtype=np.float64)
        for i in range(h):
            for j in range(w):
                dot = 0.0
                na = 0.0
                nb = 0.0
                for c in range(d):
                    a = float(cur[i, j, c])
                    b = float(prev[i, j, c])
                    dot += a * b
                    na += a * a
                    nb += b * b
                na = np.sqrt(na)
                nb = np.sqrt(nb)
                if na < eps or nb < eps:
                    out[i, j] = 0.0
                else:
                    v = dot / (na * nb)
                    if v > 1.0:
                        v = 1.0
                    elif v < -1.0:
                        v = -1.0
                    out[i, j] = v
        return out

    _NUMBA_IMPLS["greedy_select"] = greedy_select
    _NUMBA_IMPLS["similarity_map"] = similarity_map


def _numba_impl(name: str):
    if not _NUMBA_IMPLS:
        _build_numba_impls()
    return _NUMBA_IMPLS[name]


def greedy_select(kernel: np.ndarray, k: int, backend: str | None = None):
    """Pick k indices greedily maximizing the kernel subdeterminant.

    Returns (selected, gains, breakdown_step): ``selected`` holds -1 past a
    pivot collapse, ``gains`` the squared pivot per step, and
    ``breakdown_step`` the step at which the pivot fell to <= 1e-12
    (-1 when the full budget was met).
    """
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if backend is None:
        backend = active_backend()
    if k == 0:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
            -1,
        )
    if backend == "numba":
        return _numba_impl("greedy_select")(kernel, k)
    return _greedy_select_numpy(kernel, k)


# ---------------------------------------------------------------------------
# Per-position cosine similarity between consecutive frames
# ---------------------------------------------------------------------------


def _similarity_stack_numpy(data: np.ndarray, eps: float) -> np.ndarray:
    cur = data[1:].astype(np.float64)
    prev = data[:-1].astype(np.float64)
    dots = np.einsum("thwc,thwc->thw", cur, prev)
    ncur = np.sqrt(np.einsum("thwc,thwc->thw", cur, cur))
    nprev = np.sqrt(np.einsum("thwc,thwc->thw", prev, prev))
    out = np.zeros_like(dots)
    ok = (ncur >= eps) & (nprev >= eps)
    out[ok] = np.clip(dots[ok] / (ncur[ok] * nprev[ok]), -1.0, 1.0)
    return out


def similarity_stack(data: np.ndarray, eps: float, backend: str | None = None) -> np.ndarray:
    """(T-1, H, W) cosine map between each frame and its predecessor.

    Positions where either vector has norm below ``eps`` yield 0.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    t = data.shape[0]
    if t <= 1:
        return np.zeros((0,) + data.shape[1:3], dtype=np.float64)
    if backend is None:
        backend = active_backend()
    if backend == "numba":
        impl = _numba_impl("similarity_map")
        out = np.empty((t - 1,) + data.shape[1:3], dtype=np.float64)
        for idx in range(1, t):
            out[idx - 1] = impl(data[idx - 1], data[idx], eps)
        return out
    return _similarity_stack_numpy(data, eps)
