"""Tensor-parallel layers built on the fused collectives, plus single-device references.

Per-rank entry points take the rank's ``RankEndpoint`` as their first argument
and are meant to run inside ``RankGroup.run``. Shapes follow the usual TPSP
layout: activations between layers are sharded along the sequence axis,
weights are sharded by columns (up/QKV projections) or rows (down/output
projections), and attention tensors are ``(B, heads, S, head_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .collectives import (
    Schedule,
    ScheduleKind,
    build_schedule,
    fuse_all_gather,
    fuse_all_to_all,
    fuse_reduce_scatter,
)
from .errors import ShapeError
from .fabric import RankEndpoint, all_to_all
from .tensor import Matrix, Tensor, as_tensor, concat_feat, concat_seq, matmul, merge_heads, softmax_rows

Activation = Callable[[Tensor], Tensor]


def square(x: Tensor) -> Tensor:
    return x * x


def identity(x: Tensor) -> Tensor:
    return x


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


ACTIVATIONS: dict[str, Activation] = {"square": square, "identity": identity, "gelu": gelu}


@dataclass
class ShardedLinear:
    """A full weight (D_in, D_out) and its ``size`` row or column shards."""

    weight: Matrix
    kind: str
    size: int
    shards: list[Matrix] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.weight = as_tensor(self.weight, 2)
        if self.kind not in ("row", "column"):
            raise ValueError(f"kind must be 'row' or 'column', got {self.kind!r}")
        axis = 0 if self.kind == "row" else 1
        dim = self.weight.shape[axis]
        if dim % self.size:
            raise ShapeError(f"{self.kind} sharding: dimension {dim} not divisible by {self.size}")
        self.shards = [s.copy() for s in np.split(self.weight, self.size, axis=axis)]

    def shard(self, rank: int) -> Matrix:
        return self.shards[rank]

    def stacked(self) -> Matrix:
        return np.concatenate(self.shards, axis=0 if self.kind == "row" else 1)


def _resolve_schedule(schedule: "Schedule | ScheduleKind | str | None", n: int, m: int = 1) -> Schedule:
    if isinstance(schedule, Schedule):
        return schedule
    return build_schedule(schedule or ScheduleKind.RING, n, m)


def column_parallel_forward(ep: RankEndpoint, x_r: Tensor, w_shard: Matrix, m: int = 1) -> Tensor:
    """Fused all-gather + column-shard projection: ``all_gather(x) @ W[:, cols_r]``."""
    w_shard = as_tensor(w_shard, 2)
    return fuse_all_gather(ep, as_tensor(x_r, 3), lambda chunk, _: matmul(chunk, w_shard), m)


def row_parallel_forward(
    ep: RankEndpoint,
    x_r: Tensor,
    w_shard: Matrix,
    schedule: "Schedule | ScheduleKind | str | None" = None,
    m: int = 1,
) -> Tensor:
    """Row-shard projection + fused reduce-scatter: slice ``r`` of ``sum_q x_q @ W[rows_q]``."""
    w_shard = as_tensor(w_shard, 2)
    sched = _resolve_schedule(schedule, ep.size, m)
    return fuse_reduce_scatter(ep, as_tensor(x_r, 3), lambda chunk, _: matmul(chunk, w_shard), sched)


def tpsp_mlp_forward(
    ep: RankEndpoint,
    x_r: Tensor,
    up_shard: Matrix,
    down_shard: Matrix,
    activation: Activation = square,
    schedule: "Schedule | ScheduleKind | str | None" = None,
    m: int = 1,
) -> Tensor:
    """Sequence-sharded MLP: fused all-gather up-projection, activation, fused reduce-scatter down."""
    h = activation(column_parallel_forward(ep, x_r, up_shard, m))
    return row_parallel_forward(ep, h, down_shard, schedule, m)


def attention_heads(q: Tensor, k: Tensor, v: Tensor, scale: bool = True) -> Tensor:
    """Non-causal attention per head: (B,H,Sq,Dh) x (B,H,Sk,Dh) -> (B,H,Sq,Dh)."""
    q, k, v = as_tensor(q, 4), as_tensor(k, 4), as_tensor(v, 4)
    if k.shape != v.shape or q.shape[:2] != k.shape[:2] or q.shape[3] != k.shape[3]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = q @ k.transpose(0, 1, 3, 2)
    if scale:
        scores = scores / math.sqrt(q.shape[3])
    return softmax_rows(scores) @ v


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, n: int) -> None:
    if not q.shape == k.shape == v.shape:
        raise ShapeError(f"Q, K, V must share a shape: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[2] % n:
        raise ShapeError(f"sequence length S={q.shape[2]} is not divisible by n={n}")


def query_split_attention(
    ep: RankEndpoint,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w_o_shard: Matrix,
    schedule: "Schedule | ScheduleKind | str | None" = None,
    scale: bool = True,
    m: int = 1,
) -> Tensor:
    """Attention over this rank's head group, one query slice per iteration, with
    the row-shard output projection and a fused reduce-scatter of the results.

    ``q, k, v`` are ``(B, a/T, S, Dh)``; ``w_o_shard`` is ``(a/T * Dh, D)``.
    Returns ``(B, S/T, D)``.
    """
    q, k, v = as_tensor(q, 4), as_tensor(k, 4), as_tensor(v, 4)
    _check_qkv(q, k, v, ep.size)
    w_o_shard = as_tensor(w_o_shard, 2)
    if w_o_shard.shape[0] != q.shape[1] * q.shape[3]:
        raise ShapeError(f"output shard {w_o_shard.shape} does not match {q.shape[1]} heads x {q.shape[3]}")

    def partial(q_slice: Tensor, _: int) -> Tensor:
        return matmul(merge_heads(attention_heads(q_slice, k, v, scale)), w_o_shard)

    return fuse_reduce_scatter(ep, q, partial, _resolve_schedule(schedule, ep.size, m), axis=2)


def fuse_all_to_all_attention(
    ep: RankEndpoint, q: Tensor, k: Tensor, v: Tensor, scale: bool = True
) -> Tensor:
    """Ulysses attention output redistribution fused with per-query-slice compute.

    Input is the post-scatter layout ``(B, a/T, S, Dh)`` (full sequence, this
    rank's heads). Returns ``(B, S/T, a*Dh)``: sequence slice ``r`` across all
    heads, head groups concatenated by source rank. No output projection.
    """
    q, k, v = as_tensor(q, 4), as_tensor(k, 4), as_tensor(v, 4)
    _check_qkv(q, k, v, ep.size)
    parts = fuse_all_to_all(ep, q, lambda q_slice, _: attention_heads(q_slice, k, v, scale), axis=2)
    return concat_feat([merge_heads(p) for p in parts])


def ulysses_scatter_heads(ep: RankEndpoint, x_seq: Tensor) -> Tensor:
    """First Ulysses all-to-all: (B, a, S/T, Dh) sequence shard -> (B, a/T, S, Dh) head shard."""
    x_seq = as_tensor(x_seq, 4)
    n = ep.size
    if x_seq.shape[1] % n:
        raise ShapeError(f"head count a={x_seq.shape[1]} is not divisible by T={n}")
    groups = np.split(x_seq, n, axis=1)
    return concat_seq(all_to_all(ep, groups), axis=2)


def ulysses_attention(ep: RankEndpoint, q_seq: Tensor, k_seq: Tensor, v_seq: Tensor, scale: bool = True) -> Tensor:
    """Full Ulysses attention from sequence-sharded, all-head inputs."""
    q, k, v = (ulysses_scatter_heads(ep, t) for t in (q_seq, k_seq, v_seq))
    return fuse_all_to_all_attention(ep, q, k, v, scale)


def shard_heads(x: Tensor, n: int) -> list[Tensor]:
    """Split (B, a, S, Dh) into ``n`` contiguous head groups."""
    x = as_tensor(x, 4)
    if x.shape[1] % n:
        raise ShapeError(f"head count a={x.shape[1]} is not divisible by T={n}")
    return [g.copy() for g in np.split(x, n, axis=1)]


def reference_mlp(x: Tensor, w_up: Matrix, w_down: Matrix, activation: Activation = square) -> Tensor:
    return matmul(activation(matmul(x, w_up)), w_down)


def reference_attention(
    q: Tensor, k: Tensor, v: Tensor, w_o: Matrix | None = None, scale: bool = True
) -> Tensor:
    """Single-device multi-head attention: (B, a, S, Dh) inputs -> (B, S, a*Dh) or projected."""
    out = merge_heads(attention_heads(q, k, v, scale))
    return out if w_o is None else matmul(out, w_o)
