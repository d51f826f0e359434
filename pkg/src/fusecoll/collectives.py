"""Fused collectives: all-gather, reduce-scatter and all-to-all decomposed into
point-to-point transfers with the per-slice compute interleaved.

The compute callback ``f(chunk, index)`` returns the partial output for one
sequence chunk; ``index`` is the global chunk id in ``[0, n*m)``. Callbacks must
be pure, since the schedule decides the order in which they run.

Ordering rules that remove the communication tail:

* all-gather computes the rank's own slice first, while the first transfer is
  in flight, then each received slice as it arrives;
* reduce-scatter computes the slice that stays on this rank last, so nothing is
  left to send once the final compute finishes.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Callable

from .errors import ShapeError, UnsupportedConfigError
from .fabric import PendingOp, RankEndpoint
from .tensor import SEQ_AXIS, Tensor, as_tensor, concat_seq, split_seq

PartialComputeFn = Callable[[Tensor, int], Tensor]


class ScheduleKind(str, enum.Enum):
    RING = "ring"
    PAIRWISE = "pairwise"
    CIRCULAR_SLICES = "circular-slices"

    @classmethod
    def parse(cls, value: "str | ScheduleKind") -> "ScheduleKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown schedule {value!r}; choose one of: {choices}") from None


def _check_index(r: int, i: int, n: int) -> None:
    if n < 1 or not (0 <= r < n and 0 <= i < n):
        raise ValueError(f"need 0 <= r, i < n; got r={r}, i={i}, n={n}")


def ring_indices_ag(r: int, i: int, n: int) -> tuple[int, int, int]:
    """(send peer, recv peer, computed slice) for all-gather iteration ``i``."""
    _check_index(r, i, n)
    return (r + 1) % n, (r - 1 + n) % n, (r - i + n) % n


def ring_indices_rs(r: int, i: int, n: int) -> tuple[int, int, int]:
    """(send peer, recv peer, computed slice) for reduce-scatter iteration ``i``."""
    _check_index(r, i, n)
    return (r + 1) % n, (r - 1 + n) % n, (r - i - 1 + n) % n


def a2a_indices(r: int, i: int, n: int) -> tuple[int, int, int]:
    """(send peer, recv peer, computed slice) for all-to-all iteration ``i``."""
    _check_index(r, i, n)
    j = (r + i + 1) % n
    return j, (r - i - 1 + n) % n, j


def round_robin_partner(r: int, t: int, n: int) -> int:
    """Partner of rank ``r`` in round ``t`` (1..n-1) of a circle-method tournament.

    Rank 0 stays fixed and meets rank ``t``; the others pair up so that their
    labels sum to ``2t`` modulo ``n-1``. Requires even ``n``.
    """
    if n % 2:
        raise UnsupportedConfigError(f"pairwise exchange needs an even rank count, got {n}")
    if not 1 <= t < n:
        raise ValueError(f"round {t} out of range for n={n}")
    if r == 0:
        return t
    if r == t:
        return 0
    return (2 * t - r - 1) % (n - 1) + 1


@dataclass(frozen=True)
class Step:
    send_peer: int
    recv_peer: int
    compute_slice: int


@dataclass
class Schedule:
    """Resolved reduce-scatter plan.

    ``steps[r]`` lists rank ``r``'s communicating iterations in order; each
    computes the partial for ``compute_slice``, folds in whatever arrived during
    the previous iteration, then sends the accumulated chunk and posts one
    receive. ``tail[r]`` lists the chunks kept on rank ``r``; they are computed
    after the last transfer is posted. Chunk ids live in ``[0, n*m)`` and chunk
    ``c`` belongs to rank ``c // m``.
    """

    kind: ScheduleKind
    n: int
    m: int
    steps: list[list[Step]]
    tail: list[list[int]]

    @property
    def num_chunks(self) -> int:
        return self.n * self.m

    def owner(self, chunk: int) -> int:
        return chunk // self.m

    def rounds(self) -> list[list[Step]]:
        """Steps regrouped by iteration: ``rounds()[i][r]``."""
        return [list(col) for col in zip(*self.steps)] if self.steps and self.steps[0] else []


def _base_steps(kind: ScheduleKind, r: int, n: int) -> list[Step]:
    if kind is ScheduleKind.RING:
        return [Step(*ring_indices_rs(r, i, n)) for i in range(n - 1)]
    if kind is ScheduleKind.PAIRWISE:
        steps = []
        for t in range(1, n):
            p = round_robin_partner(r, t, n)
            steps.append(Step(p, p, p))
        return steps
    # Direct sends at growing ring distance: distance 1 is a ring transfer,
    # distance n/2 a pairwise swap. The compute walks the slices contiguously
    # starting right after the rank's own slice, which is done last.
    return [Step((r + t) % n, (r - t) % n, (r + t) % n) for t in range(1, n)]


def build_schedule(kind: "ScheduleKind | str", n: int, m: int = 1) -> Schedule:
    kind = ScheduleKind.parse(kind)
    if n < 1:
        raise ValueError(f"rank count must be >= 1, got {n}")
    if m < 1:
        raise ValueError(f"granularity must be >= 1, got {m}")
    if kind is ScheduleKind.PAIRWISE and n % 2 and n > 1:
        raise UnsupportedConfigError(f"pairwise schedule requires an even rank count, got {n}")
    steps, tail = [], []
    for r in range(n):
        base = _base_steps(kind, r, n) if n > 1 else []
        steps.append(
            [Step(s.send_peer, s.recv_peer, s.compute_slice * m + c) for s in base for c in range(m)]
        )
        tail.append([r * m + c for c in range(m)])
    return Schedule(kind, n, m, steps, tail)


def validate_schedule(schedule: Schedule) -> None:
    """Symbolically execute ``schedule``; raise ``ValueError`` on any violation.

    Every partial is tracked as a multiset of (source rank, chunk) contributions,
    routed exactly the way ``fuse_reduce_scatter`` routes tensors. Checks that
    sends and receives pair up within each iteration, that every rank sends and
    receives ``m*(n-1)`` chunks, and that each rank finishes holding every
    contribution to each of its own chunks exactly once.
    """
    n, m = schedule.n, schedule.m
    if len(schedule.steps) != n or len(schedule.tail) != n:
        raise ValueError("schedule must have one step list and one tail per rank")
    counts = {len(s) for s in schedule.steps}
    if len(counts) != 1:
        raise ValueError(f"ranks disagree on iteration count: {sorted(counts)}")
    want = m * (n - 1)
    if counts.pop() != want:
        raise ValueError(f"each rank must send/receive {want} chunks")
    acc: list[dict[int, Counter]] = [{} for _ in range(n)]
    inbox: list[list[tuple[int, Counter]]] = [[] for _ in range(n)]

    def add(r: int, chunk: int, c: Counter) -> None:
        acc[r][chunk] = acc[r].get(chunk, Counter()) + c

    for i, col in enumerate(zip(*schedule.steps)):
        sent: dict[tuple[int, int], tuple[int, Counter]] = {}
        for r, step in enumerate(col):
            if step.send_peer == r or step.recv_peer == r:
                raise ValueError(f"rank {r} talks to itself in iteration {i}")
            add(r, step.compute_slice, Counter({(r, step.compute_slice): 1}))
            for chunk, c in inbox[r]:
                add(r, chunk, c)
            inbox[r] = []
            sent[(r, step.send_peer)] = (step.compute_slice, acc[r].pop(step.compute_slice))
        for r, step in enumerate(col):
            key = (step.recv_peer, r)
            if key not in sent:
                raise ValueError(f"iteration {i}: rank {r} receives from {step.recv_peer} which sends elsewhere")
            inbox[r].append(sent.pop(key))
        if sent:
            raise ValueError(f"iteration {i}: unmatched sends {sorted(sent)}")
    for r in range(n):
        for chunk in schedule.tail[r]:
            add(r, chunk, Counter({(r, chunk): 1}))
        for chunk, c in inbox[r]:
            add(r, chunk, c)
        if sorted(acc[r]) != sorted(schedule.tail[r]):
            raise ValueError(f"rank {r} ends with chunks {sorted(acc[r])}, expected {schedule.tail[r]}")
        for chunk, c in acc[r].items():
            if schedule.owner(chunk) != r:
                raise ValueError(f"chunk {chunk} ends on rank {r}, owner is {schedule.owner(chunk)}")
            expected = Counter({(q, chunk): 1 for q in range(n)})
            if c != expected:
                raise ValueError(f"rank {r} chunk {chunk}: contributions {dict(c)} != exactly-once")


def fuse_all_gather(
    ep: RankEndpoint,
    x: Tensor,
    f: PartialComputeFn,
    m: int = 1,
    axis: int = SEQ_AXIS,
    out_axis: int | None = None,
) -> Tensor:
    """All-gather ``x`` along the sequence axis while computing ``f`` on every chunk.

    Returns the concatenation, in global chunk order, of ``f`` applied to every
    rank's chunks. With ``m > 1`` each rank's slice travels as ``m`` chunks on
    ``m`` interleaved rings.
    """
    if m < 1:
        raise ValueError(f"granularity must be >= 1, got {m}")
    x = as_tensor(x)
    n, r = ep.size, ep.rank
    buf = split_seq(x, m, axis)
    out: list[Tensor | None] = [None] * (n * m)
    for i in range(n * m):
        hop, c = divmod(i, m)
        nxt, prv, src = ring_indices_ag(r, hop, n)
        ops: list[PendingOp] = []
        recv = None
        if hop < n - 1:
            ops.append(ep.send_async(nxt, buf[c]))
            recv = ep.recv_async(prv)
            ops.append(recv)
        l = src * m + c
        out[l] = f(buf[c], l)
        for op in ops:
            got = op.wait()
            if op is recv:
                if got.shape != buf[c].shape:
                    raise ShapeError(f"fuse_all_gather: rank {r} holds {buf[c].shape}, got {got.shape}")
                buf[c] = got
    return concat_seq(out, axis if out_axis is None else out_axis)


def fuse_reduce_scatter(
    ep: RankEndpoint,
    x: Tensor,
    f: PartialComputeFn,
    schedule: Schedule | None = None,
    axis: int = SEQ_AXIS,
    out_axis: int = SEQ_AXIS,
) -> Tensor:
    """Reduce-scatter the per-chunk outputs of ``f`` over ``x``'s sequence chunks.

    Rank ``r`` returns the sum over all ranks of ``f`` applied to the chunks that
    belong to slice ``r``. ``axis`` is the sequence axis of ``x`` and
    ``out_axis`` that of ``f``'s output. Defaults to the ring schedule, ``m = 1``.
    """
    n, r = ep.size, ep.rank
    if schedule is None:
        schedule = build_schedule(ScheduleKind.RING, n)
    if schedule.n != n:
        raise ValueError(f"schedule built for {schedule.n} ranks, group has {n}")
    x = as_tensor(x)
    chunks = split_seq(x, schedule.num_chunks, axis)
    acc: dict[int, Tensor] = {}
    inflight: list[PendingOp] = []
    sends: list[PendingOp] = []

    def compute(l: int) -> None:
        partial = f(chunks[l], l)
        acc[l] = acc[l] + partial if l in acc else partial

    def fold() -> None:
        for op in inflight:
            got = op.wait()
            if op.tag in acc:
                if got.shape != acc[op.tag].shape:
                    raise ShapeError(f"rank {r}: chunk {op.tag} is {acc[op.tag].shape}, got {got.shape}")
                acc[op.tag] = got + acc[op.tag]
            else:
                acc[op.tag] = got
        inflight.clear()

    for step in schedule.steps[r]:
        compute(step.compute_slice)
        fold()
        sends.append(ep.send_async(step.send_peer, acc.pop(step.compute_slice), tag=step.compute_slice))
        inflight.append(ep.recv_async(step.recv_peer))
    for l in schedule.tail[r]:
        compute(l)
        fold()
    for op in sends:
        op.wait()
    return concat_seq([acc[l] for l in schedule.tail[r]], out_axis)


def fuse_all_to_all(
    ep: RankEndpoint, x: Tensor, f: PartialComputeFn, axis: int = SEQ_AXIS
) -> list[Tensor]:
    """All-to-all of ``f``'s per-slice outputs, each slice sent as soon as it is computed.

    Iteration ``i`` computes the slice for rank ``(r+i+1) % n``; the last
    iteration computes the rank's own slice, which never leaves. Returns a list
    indexed by source rank: element ``k`` is rank ``k``'s output for slice ``r``.
    """
    n, r = ep.size, ep.rank
    slices = split_seq(x, n, axis)
    out: list[Tensor | None] = [None] * n
    sends: list[PendingOp] = []
    recvs: list[tuple[int, PendingOp]] = []
    for i in range(n):
        j, k, l = a2a_indices(r, i, n)
        o = f(slices[l], l)
        if i < n - 1:
            sends.append(ep.send_async(j, o))
            recvs.append((k, ep.recv_async(k)))
        else:
            out[l] = o
    for k, op in recvs:
        out[k] = op.wait()
    for op in sends:
        op.wait()
    return out
