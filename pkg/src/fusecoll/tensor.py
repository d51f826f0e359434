"""Dense tensor helpers used by the layer equations.

Tensors are plain float64 numpy arrays laid out as (batch, sequence, feature);
attention tensors carry an extra head axis as (batch, heads, sequence, head_dim).
Every helper checks shapes strictly and never broadcasts, so a wrong slice index
shows up as an error instead of a silently reshaped result.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray
Matrix = np.ndarray

SEQ_AXIS = 1


def as_tensor(x, ndim: int | None = None) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a rank-{ndim} tensor, got shape {arr.shape}")
    return arr


def matmul(x: Tensor, w: Matrix) -> Tensor:
    """Apply ``w`` (Din, Dout) to the feature axis of ``x`` (B, S, Din)."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"matmul expects (B,S,Din) @ (Din,Dout), got {x.shape} @ {w.shape}")
    if x.shape[2] != w.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {x.shape} @ {w.shape}")
    return x @ w


def softmax_rows(scores: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    scores = as_tensor(scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def split_seq(x: Tensor, n: int, axis: int = SEQ_AXIS) -> list[Tensor]:
    """Split ``x`` into ``n`` equal contiguous slices along the sequence axis."""
    x = as_tensor(x)
    if n < 1:
        raise ValueError(f"split count must be >= 1, got {n}")
    s = x.shape[axis]
    if s % n:
        raise ShapeError(f"sequence length S={s} is not divisible by n={n}")
    step = s // n
    index = [slice(None)] * x.ndim
    parts = []
    for i in range(n):
        index[axis] = slice(i * step, (i + 1) * step)
        parts.append(x[tuple(index)].copy())
    return parts


def _concat(parts: Sequence[Tensor], axis: int, what: str) -> Tensor:
    if not parts:
        raise ShapeError(f"{what}: nothing to concatenate")
    arrs = [as_tensor(p) for p in parts]
    ref = arrs[0]
    ax = axis % ref.ndim
    for p in arrs[1:]:
        if p.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(p.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"{what}: shape {p.shape} does not match {ref.shape} off axis {ax}")
    return np.concatenate(arrs, axis=ax)


def concat_seq(parts: Sequence[Tensor], axis: int = SEQ_AXIS) -> Tensor:
    return _concat(parts, axis, "concat_seq")


def concat_feat(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, -1, "concat_feat")


def accumulate(dst: Tensor, src: Tensor) -> Tensor:
    """Element-wise ``dst + src`` into a new tensor; shapes must match exactly."""
    dst = as_tensor(dst)
    src = as_tensor(src)
    if dst.shape != src.shape:
        raise ShapeError(f"accumulate shape mismatch: {dst.shape} vs {src.shape}")
    return dst + src


def randint_fill(shape: Sequence[int], lo: int, hi: int, seed: int) -> Tensor:
    """Deterministic integer-valued float64 tensor with entries in ``[lo, hi)``.

    Keep ``lo``/``hi`` small: exact-equality checks across schedules rely on every
    partial sum staying an exactly representable integer.
    """
    if not lo < hi:
        raise ValueError(f"invalid range [{lo}, {hi})")
    rng = np.random.default_rng(seed)
    return rng.integers(lo, hi, size=tuple(shape)).astype(np.float64)


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, S, Dh) -> (B, S, H*Dh), heads laid out contiguously in order."""
    x = as_tensor(x, 4)
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, S, H*Dh) -> (B, H, S, Dh)."""
    x = as_tensor(x, 3)
    b, s, d = x.shape
    if d % heads:
        raise ShapeError(f"feature width {d} is not divisible by heads={heads}")
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)
