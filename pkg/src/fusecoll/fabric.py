"""In-process tensor-parallel group: one thread per rank, FIFO channels between ranks.

Each directed (sender, receiver) pair owns an unbounded FIFO queue, so ``send``
never blocks and messages between a fixed pair arrive in send order. Payloads
are copied on send and frozen, which plays the role of the explicit send buffer.

An optional per-message delay models transfer time. The sender stamps every
message with an arrival time; transfers on one link are serialised, so a message
posted while the link is still busy arrives ``delay`` after the previous one.
Receivers sleep until the stamped arrival, which lets the delay overlap with
whatever the receiver computes between posting and waiting.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Sequence, Union

import numpy as np

from .errors import GroupError, GroupTimeout, ShapeError, UsageError
from .tensor import Tensor, as_tensor, concat_seq, split_seq

log = logging.getLogger(__name__)

DelaySpec = Union[float, Callable[[np.ndarray], float]]

_POLL_S = 0.02


class _Aborted(Exception):
    """Raised inside a rank when another rank has already failed."""


@dataclass
class _Message:
    payload: np.ndarray
    tag: Any
    arrival: float


class PendingOp:
    """Handle for an asynchronous send or receive; ``wait()`` exactly once."""

    def __init__(self, ep: "RankEndpoint", kind: str, peer: int, buffer=None, message=None):
        self.kind = kind
        self.peer = peer
        self.tag = None
        self.arrival: float | None = None if message is None else message.arrival
        self._ep = ep
        self._buffer = buffer
        self._message = message
        self._done = False

    def wait(self, sleep: bool = True) -> Tensor | None:
        """Complete the op. With ``sleep=False`` the modelled transfer time is not
        waited out; ``arrival`` still records when the data would have landed."""
        if self._done:
            raise UsageError(f"{self.kind} op with peer {self.peer} was already waited on")
        self._done = True
        if self.kind == "send":
            if sleep:
                sleep_until(self._message.arrival)
            return None
        msg = self._ep._take(self.peer)
        if sleep:
            sleep_until(msg.arrival)
        self.arrival = msg.arrival
        self.tag = msg.tag
        if self._buffer is not None:
            if self._buffer.shape != msg.payload.shape:
                raise ShapeError(
                    f"receive buffer {self._buffer.shape} does not fit message {msg.payload.shape}"
                )
            self._buffer[...] = msg.payload
            return self._buffer
        return msg.payload

    @property
    def done(self) -> bool:
        return self._done


def sleep_until(t: float) -> None:
    """Sleep until ``time.perf_counter()`` reaches ``t``."""
    remaining = t - time.perf_counter()
    if remaining > 0:
        time.sleep(remaining)


class RankEndpoint:
    """One rank's view of the group. Only that rank's worker may use it."""

    def __init__(self, group: "RankGroup", rank: int):
        self.group = group
        self.rank = rank
        self.size = group.size
        self.sends_posted = 0
        self.recvs_posted = 0
        self.ops: list[tuple[str, int]] = []
        self._link_free = [0.0] * group.size

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.size:
            raise ValueError(f"peer {peer} out of range for group of size {self.size}")
        if peer == self.rank:
            raise ValueError(f"rank {self.rank} cannot send to or receive from itself")

    def send_async(self, to: int, chunk, tag: Any = None, not_before: float | None = None) -> PendingOp:
        """Post a send. ``not_before`` overrides the transfer start time (a
        ``time.perf_counter`` value), for modelling a copy engine that forwards
        data the moment it lands rather than when this thread gets to it."""
        self._check_peer(to)
        payload = np.array(chunk, dtype=np.float64, copy=True)
        payload.setflags(write=False)
        delay = self.group.delay_for(payload)
        now = time.perf_counter() if not_before is None else not_before
        start = max(now, self._link_free[to])
        arrival = start + delay
        self._link_free[to] = arrival
        msg = _Message(payload, tag, arrival)
        self.group._channels[(self.rank, to)].put(msg)
        self.sends_posted += 1
        self.ops.append(("send", to))
        return PendingOp(self, "send", to, message=msg)

    def recv_async(self, frm: int, buffer: np.ndarray | None = None) -> PendingOp:
        self._check_peer(frm)
        self.recvs_posted += 1
        self.ops.append(("recv", frm))
        return PendingOp(self, "recv", frm, buffer=buffer)

    def send(self, to: int, chunk, tag: Any = None) -> None:
        self.send_async(to, chunk, tag).wait()

    def recv(self, frm: int) -> Tensor:
        return self.recv_async(frm).wait()

    def _take(self, frm: int) -> _Message:
        q = self.group._channels[(frm, self.rank)]
        while True:
            if self.group._abort.is_set():
                raise _Aborted()
            try:
                return q.get(timeout=_POLL_S)
            except queue.Empty:
                continue


class RankGroup:
    """A group of ``size`` simulated ranks.

    ``delay`` is either a fixed number of seconds per message or a callable
    mapping the payload to seconds. ``timeout`` is the watchdog for ``run``.
    """

    def __init__(self, size: int, delay: DelaySpec = 0.0, timeout: float | None = 60.0):
        if size < 1:
            raise ValueError(f"group size must be >= 1, got {size}")
        self.size = size
        self.delay = delay
        self.timeout = timeout
        self.endpoints: list[RankEndpoint] = []
        self._channels: dict[tuple[int, int], queue.Queue] = {}
        self._abort = threading.Event()
        self._reset()

    def _reset(self) -> None:
        self._channels = {
            (a, b): queue.Queue() for a in range(self.size) for b in range(self.size) if a != b
        }
        self._abort = threading.Event()
        self.endpoints = [RankEndpoint(self, r) for r in range(self.size)]

    def delay_for(self, payload: np.ndarray) -> float:
        if callable(self.delay):
            return float(self.delay(payload))
        return float(self.delay)

    def run(self, body: Callable[[RankEndpoint], Any], timeout: float | None = None) -> list:
        """Run ``body(endpoint)`` on every rank concurrently; results by rank."""
        self._reset()
        timeout = self.timeout if timeout is None else timeout
        results: list[Any] = [None] * self.size
        failures: list[tuple[float, int, BaseException]] = []
        lock = threading.Lock()

        def worker(ep: RankEndpoint) -> None:
            try:
                results[ep.rank] = body(ep)
            except _Aborted:
                pass
            except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
                with lock:
                    failures.append((time.perf_counter(), ep.rank, exc))
                self._abort.set()

        if self.size == 1:
            worker(self.endpoints[0])
        else:
            threads = [
                threading.Thread(target=worker, args=(ep,), name=f"rank-{ep.rank}", daemon=True)
                for ep in self.endpoints
            ]
            for t in threads:
                t.start()
            deadline = None if timeout is None else time.perf_counter() + timeout
            for t in threads:
                t.join(None if deadline is None else max(0.0, deadline - time.perf_counter()))
            if any(t.is_alive() for t in threads):
                self._abort.set()
                for t in threads:
                    t.join(1.0)
                raise GroupTimeout(f"rank group of size {self.size} did not finish in {timeout}s")
        if failures:
            _, rank, exc = min(failures, key=lambda f: f[0])
            raise GroupError(rank, exc) from exc
        return results


GroupLike = Union[RankGroup, int]


def _as_group(group: GroupLike) -> RankGroup:
    return group if isinstance(group, RankGroup) else RankGroup(group)


def spawn_group(t: int, body: Callable[[RankEndpoint], Any], **kwargs) -> list:
    return RankGroup(t, **kwargs).run(body)


# Reference collectives: plain ring algorithms with no compute interleaved.
# They run inside a rank body; the ``ref_*`` wrappers drive a whole group.


def all_gather(ep: RankEndpoint, x: Tensor) -> Tensor:
    """Ring all-gather along the sequence axis; every rank gets the rank-order concat."""
    x = as_tensor(x)
    n, r = ep.size, ep.rank
    slots: list[Tensor | None] = [None] * n
    slots[r] = x
    nxt, prv = (r + 1) % n, (r - 1) % n
    cur = x
    for step in range(n - 1):
        send = ep.send_async(nxt, cur)
        got = ep.recv_async(prv).wait()
        send.wait()
        if got.shape != x.shape:
            raise ShapeError(f"all_gather: rank {r} holds {x.shape}, received {got.shape}")
        slots[(r - step - 1) % n] = got
        cur = got
    return concat_seq(slots)


def reduce_scatter(ep: RankEndpoint, x: Tensor) -> Tensor:
    """Ring reduce-scatter (sum); rank ``r`` ends with sequence slice ``r`` reduced."""
    n, r = ep.size, ep.rank
    acc = split_seq(x, n)
    nxt, prv = (r + 1) % n, (r - 1) % n
    for step in range(n - 1):
        out_idx = (r - step - 1) % n
        in_idx = (r - step - 2) % n
        send = ep.send_async(nxt, acc[out_idx])
        got = ep.recv_async(prv).wait()
        send.wait()
        if got.shape != acc[in_idx].shape:
            raise ShapeError(f"reduce_scatter: rank {r} expected {acc[in_idx].shape}, got {got.shape}")
        acc[in_idx] = got + acc[in_idx]
    return acc[r]


def all_to_all(ep: RankEndpoint, parts: Sequence[Tensor]) -> list[Tensor]:
    """Rank ``r`` sends ``parts[j]`` to rank ``j``; output ``[k]`` is what rank ``k`` sent here."""
    n, r = ep.size, ep.rank
    if len(parts) != n:
        raise ShapeError(f"all_to_all expects {n} parts, got {len(parts)}")
    out: list[Tensor | None] = [None] * n
    out[r] = as_tensor(parts[r]).copy()
    sends = [ep.send_async((r + i) % n, parts[(r + i) % n]) for i in range(1, n)]
    for i in range(1, n):
        src = (r - i) % n
        out[src] = ep.recv_async(src).wait()
    for s in sends:
        s.wait()
    return out


def _check_same_shapes(xs: Sequence[Tensor], what: str) -> None:
    shapes = {np.shape(x) for x in xs}
    if len(shapes) > 1:
        raise ShapeError(f"{what}: ranks disagree on shape: {sorted(shapes)}")


def ref_all_gather(group: GroupLike, xs: Sequence[Tensor]) -> list[Tensor]:
    group = _as_group(group)
    if len(xs) != group.size:
        raise ShapeError(f"expected {group.size} per-rank inputs, got {len(xs)}")
    _check_same_shapes(xs, "ref_all_gather")
    return group.run(lambda ep: all_gather(ep, xs[ep.rank]))


def ref_reduce_scatter(group: GroupLike, xs: Sequence[Tensor]) -> list[Tensor]:
    group = _as_group(group)
    if len(xs) != group.size:
        raise ShapeError(f"expected {group.size} per-rank inputs, got {len(xs)}")
    _check_same_shapes(xs, "ref_reduce_scatter")
    s = np.shape(xs[0])[1]
    if s % group.size:
        raise ShapeError(f"sequence length S={s} is not divisible by n={group.size}")
    return group.run(lambda ep: reduce_scatter(ep, xs[ep.rank]))


def ref_all_to_all(group: GroupLike, parts: Sequence[Sequence[Tensor]]) -> list[list[Tensor]]:
    group = _as_group(group)
    n = group.size
    if len(parts) != n or any(len(p) != n for p in parts):
        raise ShapeError(f"ref_all_to_all expects {n} ranks x {n} parts")
    for j in range(n):
        _check_same_shapes([parts[r][j] for r in range(n)], f"ref_all_to_all part {j}")
    return group.run(lambda ep: all_to_all(ep, parts[ep.rank]))
