"""Rotary position embedding over paired-adjacent 2D chunks.

A head vector of even width splits into chunks (v[2i], v[2i+1]); chunk i
turns by angle position * theta_i where the theta follow a geometric
schedule. Rotating queries and keys by their own absolute positions makes
their dot product depend only on the position difference, which is what lets
rotated keys be cached once and reused at every later decode step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import SelectionError, ShapeError, ValidationError


@dataclass(frozen=True)
class RopeParams:
    """Frequency schedule for one attention head: theta_i = base**(-2i/head_dim)."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValidationError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not self.base > 1.0:
            raise ValidationError(f"rope base must be > 1, got {self.base}")

    @property
    def n_chunks(self) -> int:
        return self.head_dim // 2


@dataclass(frozen=True)
class ChunkSet:
    """Strictly increasing, duplicate-free set of rotation-chunk indices."""

    indices: tuple[int, ...] = ()

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if any(i < 0 for i in idx):
            raise SelectionError(f"negative chunk index in {idx}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise SelectionError(f"chunk indices must be strictly increasing: {idx}")

    @classmethod
    def of(cls, indices: Iterable[int]) -> "ChunkSet":
        idx = sorted(int(i) for i in indices)
        return cls(tuple(idx))

    @classmethod
    def full(cls, head_dim: int) -> "ChunkSet":
        return cls(tuple(range(head_dim // 2)))

    @classmethod
    def empty(cls) -> "ChunkSet":
        return cls(())

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __contains__(self, i: int) -> bool:
        return i in self.indices

    def check_bound(self, head_dim: int) -> None:
        if self.indices and self.indices[-1] >= head_dim // 2:
            raise SelectionError(
                f"chunk index {self.indices[-1]} out of range for head_dim {head_dim}"
            )

    def complement(self, head_dim: int) -> "ChunkSet":
        self.check_bound(head_dim)
        missing = tuple(i for i in range(head_dim // 2) if i not in self.indices)
        return ChunkSet(missing)


def frequencies(params: RopeParams) -> np.ndarray:
    """Per-chunk angular frequencies, strictly decreasing from theta_0 = 1."""
    i = np.arange(params.n_chunks, dtype=np.float64)
    return params.base ** (-2.0 * i / params.head_dim)


def _head_vec(v, head_dim: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != head_dim:
        raise ShapeError(f"{name}: expected length {head_dim}, got shape {arr.shape}")
    return arr


def rotate(vec, position: float, chunks: ChunkSet, params: RopeParams) -> np.ndarray:
    """Rotate the selected chunks of a head vector by position * theta_i.

    Coordinates in unselected chunks pass through untouched.
    """
    arr = _head_vec(vec, params.head_dim, "vec")
    return rotate_block(arr[None, :], np.asarray([position], dtype=np.float64), chunks, params)[0]


def rotate_block(block, positions, chunks: ChunkSet, params: RopeParams) -> np.ndarray:
    """Rotate each row of (T, head_dim) at its own position; returns a copy."""
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != params.head_dim:
        raise ShapeError(f"block: expected (T, {params.head_dim}), got {arr.shape}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (arr.shape[0],):
        raise ShapeError("positions must match the number of rows")
    out = arr.copy()
    if len(chunks) == 0:
        return out
    chunks.check_bound(params.head_dim)
    idx = np.fromiter(chunks, dtype=np.intp)
    theta = frequencies(params)[idx]
    ang = pos[:, None] * theta[None, :]
    c = np.cos(ang)
    s = np.sin(ang)
    x = out[:, 2 * idx]
    y = out[:, 2 * idx + 1]
    out[:, 2 * idx] = x * c - y * s
    out[:, 2 * idx + 1] = x * s + y * c
    return out


def relative_score(q, k, m: float, n: float, chunks: ChunkSet, params: RopeParams) -> float:
    """Mixed rotary score in relative form.

    Selected chunks contribute q_i R((m - n) theta_i) k_i^T; unselected
    chunks contribute the plain dot product. Equals rotating q at m and k at
    n absolutely and taking the dot product.
    """
    qv = _head_vec(q, params.head_dim, "q")
    kv = _head_vec(k, params.head_dim, "k")
    chunks.check_bound(params.head_dim)
    qx, qy = qv[0::2], qv[1::2]
    kx, ky = kv[0::2], kv[1::2]
    dots = qx * kx + qy * ky
    crosses = qx * ky - qy * kx
    sel = np.zeros(params.n_chunks, dtype=bool)
    if len(chunks):
        sel[np.fromiter(chunks, dtype=np.intp)] = True
    ang = (float(m) - float(n)) * frequencies(params)
    per_chunk = np.where(sel, np.cos(ang) * dots + np.sin(ang) * crosses, dots)
    return float(per_chunk.sum())
