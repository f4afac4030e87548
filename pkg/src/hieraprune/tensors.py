"""Core token containers and the HVTK binary tensor format.

Embeddings are stored as 32-bit floats (the on-disk precision); every
reduction over them (dot products, means) accumulates in 64-bit.

HVTK layout, little-endian, no padding::

    magic   4 bytes   b"HVTK"
    version u16       1
    kind    u8        0 = token grid, 1 = video, 2 = vector
    rank    u8        3 for grids, 4 for videos, 1 for vectors
    dims    rank*u32  grid: [H, W, d]; video: [T, H, W, d]; vector: [d]
    payload prod(dims) * f32
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadKind,
    BadMagic,
    BadVersion,
    InvalidTensor,
    IoFailure,
    ShapeOverflow,
    TruncatedPayload,
    ZeroNorm,
)

MAGIC = b"HVTK"
VERSION = 1
KIND_GRID = 0
KIND_VIDEO = 1
KIND_VECTOR = 2

_RANK_FOR_KIND = {KIND_GRID: 3, KIND_VIDEO: 4, KIND_VECTOR: 1}
# Refuse payloads beyond 2^31 scalars (8 GiB of f32); anything larger is a
# corrupt header in this artifact's scale.
_MAX_ELEMENTS = 2**31

NORM_EPS = 1e-12


def _require_finite(arr: np.ndarray, what: str) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        raise InvalidTensor(f"{what}: non-finite values rejected at construction")


@dataclass
class TokenGrid:
    """One frame's visual tokens as an (H, W, d) grid of embeddings."""

    frame_index: int
    data: np.ndarray  # (H, W, d) float32

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.frame_index < 0:
            raise InvalidTensor("TokenGrid: frame_index must be non-negative")
        if self.data.ndim != 3:
            raise InvalidTensor(
                f"TokenGrid: expected (H, W, d) data, got ndim={self.data.ndim}"
            )
        _require_finite(self.data, "TokenGrid")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class InstructionEmbedding:
    """Embedding of the final instruction token."""

    data: np.ndarray  # (d,) float32

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 1:
            raise InvalidTensor("InstructionEmbedding: expected a 1-D vector")
        _require_finite(self.data, "InstructionEmbedding")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


@dataclass
class VideoTokens:
    """Ordered token stream for a whole video.

    ``data`` keeps the dense (T, H, W, d) grid; ``alive`` marks which tokens
    are still present (merging and pruning clear entries, construction never
    does).  Token identity is the flat row-major index ``t*H*W + i*W + j``,
    which doubles as provenance.
    """

    data: np.ndarray  # (T, H, W, d) float32
    alive: np.ndarray = field(default=None)  # (T, H, W) bool

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise InvalidTensor(
                f"VideoTokens: expected (T, H, W, d) data, got ndim={self.data.ndim}"
            )
        _require_finite(self.data, "VideoTokens")
        if self.alive is None:
            self.alive = np.ones(self.data.shape[:3], dtype=bool)
        else:
            self.alive = np.asarray(self.alive, dtype=bool)
            if self.alive.shape != self.data.shape[:3]:
                raise InvalidTensor("VideoTokens: alive mask shape mismatch")

    @classmethod
    def from_grids(cls, grids: list[TokenGrid]) -> "VideoTokens":
        if not grids:
            raise InvalidTensor("VideoTokens.from_grids: needs at least one frame")
        shape = grids[0].data.shape
        for g in grids:
            if g.data.shape != shape:
                raise InvalidTensor(
                    "VideoTokens.from_grids: all frames must share (H, W, d)"
                )
        return cls(np.stack([g.data for g in grids]))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dim(self) -> int:
        return self.data.shape[3]

    @property
    def total_tokens(self) -> int:
        """Token count before any merge: T * H * W."""
        return self.data.shape[0] * self.data.shape[1] * self.data.shape[2]

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())

    def alive_token_ids(self) -> np.ndarray:
        """Flat ids of alive tokens, ascending (= lexicographic (t, i, j))."""
        return np.flatnonzero(self.alive.reshape(-1))

    def alive_embeddings(self) -> np.ndarray:
        """(n_alive, d) float32 view of alive token embeddings, in id order."""
        return self.data.reshape(-1, self.dim)[self.alive.reshape(-1)]

    def provenance(self, token_id: int) -> tuple[int, int, int]:
        """(frame, row, col) for a flat token id."""
        hw = self.height * self.width
        t, rem = divmod(int(token_id), hw)
        i, j = divmod(rem, self.width)
        return t, i, j

    def copy(self) -> "VideoTokens":
        return VideoTokens(self.data.copy(), self.alive.copy())


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Accumulates in float64 regardless of input dtype.  Raises ZeroNorm when
    either norm is below 1e-12; callers that prefer a neutral value catch it
    and substitute 0.
    """
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise InvalidTensor(
            f"cosine_similarity: dim mismatch {av.shape[0]} vs {bv.shape[0]}"
        )
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na < NORM_EPS or nb < NORM_EPS:
        raise ZeroNorm(f"cosine_similarity: degenerate norm ({na:.3e}, {nb:.3e})")
    return float(np.clip(float(av @ bv) / (na * nb), -1.0, 1.0))


def _kind_and_dims(tensor) -> tuple[int, tuple[int, ...], np.ndarray]:
    if isinstance(tensor, TokenGrid):
        return KIND_GRID, tensor.data.shape, tensor.data
    if isinstance(tensor, VideoTokens):
        return KIND_VIDEO, tensor.data.shape, tensor.data
    if isinstance(tensor, InstructionEmbedding):
        return KIND_VECTOR, tensor.data.shape, tensor.data
    raise InvalidTensor(f"write_tensor_file: unsupported type {type(tensor).__name__}")


def write_tensor_file(tensor, path) -> None:
    """Serialize a tensor to HVTK. Deterministic and atomic (temp + rename).

    The alive mask of a VideoTokens is not part of the format; only dense
    payloads round-trip.
    """
    kind, dims, payload = _kind_and_dims(tensor)
    header = struct.pack("<4sHBB", MAGIC, VERSION, kind, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    path = os.fspath(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(header)
                fh.write(body)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"write_tensor_file: {path}: {exc}") from exc


def read_tensor_file(path):
    """Deserialize an HVTK file into its tensor type.

    Header errors name the offending field: BadMagic, BadVersion, BadKind,
    ShapeOverflow (dims), TruncatedPayload (payload length).
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"read_tensor_file: {path}: {exc}") from exc

    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagic(f"magic: expected {MAGIC!r}, got {raw[:4]!r}")
    version, kind, rank = struct.unpack_from("<HBB", raw, 4)
    if version != VERSION:
        raise BadVersion(f"version: expected {VERSION}, got {version}")
    if kind not in _RANK_FOR_KIND:
        raise BadKind(f"kind: unknown value {kind}")
    if rank != _RANK_FOR_KIND[kind]:
        raise BadKind(f"rank: kind {kind} requires rank {_RANK_FOR_KIND[kind]}, got {rank}")
    dims_end = 8 + 4 * rank
    if len(raw) < dims_end:
        raise TruncatedPayload("dims: header ends before all dims are present")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    n_elements = 1
    for d in dims:
        n_elements *= d
    if n_elements > _MAX_ELEMENTS:
        raise ShapeOverflow(f"dims: {dims} describe {n_elements} scalars")
    expected = n_elements * 4
    actual = len(raw) - dims_end
    if actual != expected:
        raise TruncatedPayload(f"payload: expected {expected} bytes, found {actual}")
    values = np.frombuffer(raw, dtype="<f4", offset=dims_end).reshape(dims)
    values = values.astype(np.float32, copy=True)

    if kind == KIND_GRID:
        return TokenGrid(frame_index=0, data=values)
    if kind == KIND_VIDEO:
        return VideoTokens(values)
    return InstructionEmbedding(values)
