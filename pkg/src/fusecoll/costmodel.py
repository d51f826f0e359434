"""Latency models for three ways of pairing a sharded compute with its collective.

Time is measured in per-chunk units: ``c`` is the compute time of one of the
``n`` sequence chunks and ``d`` the time to move one chunk one hop. A ring
collective over the full output is ``n - 1`` hops.

* ``baseline``: compute everything, then run the collective.
* ``slicing``: split the work into ``chunks`` pieces and launch each piece's
  collective as soon as its compute finishes; the last piece's collective is
  the exposed tail.
* ``fused``: the ring reduce-scatter with interleaved per-chunk compute.

``analytic_latency`` gives closed forms and ``simulate_timeline`` replays the
same schedules event by event; the two must agree on the makespan.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass
from typing import IO, Iterable

from .errors import TimelineError

_EPS = 1e-9


class Strategy(str, enum.Enum):
    BASELINE = "baseline"
    DATA_SLICING = "slicing"
    FUSED = "fused"


@dataclass(frozen=True)
class CostParams:
    n: int
    c: float
    d: float
    chunks: int = 1

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.chunks < 1:
            raise ValueError(f"chunks must be >= 1, got {self.chunks}")
        for name in ("c", "d"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


# Fitted to a measured n=4 MLP forward: 78.5 ms of compute over 4 chunks and
# 43.8 ms of exposed ring overhead. The slicing piece count is a free choice.
MEASURED_FIT = CostParams(n=4, c=78.5 / 4, d=43.8 / 3, chunks=6)


@dataclass
class CostReport:
    strategy: str
    n: int
    c: float
    d: float
    chunks: int
    compute_ms: float
    overhead_ms: float
    end_to_end_ms: float
    overhead_reduction_pct: float
    latency_reduction_pct: float

    def to_row(self) -> dict:
        return asdict(self)


CSV_FIELDS = [
    "strategy",
    "n",
    "c",
    "d",
    "chunks",
    "compute_ms",
    "overhead_ms",
    "end_to_end_ms",
    "overhead_reduction_pct",
    "latency_reduction_pct",
]


def _end_to_end(strategy: Strategy, p: CostParams) -> float:
    n, c, d = p.n, p.c, p.d
    if strategy is Strategy.BASELINE:
        return n * c + (n - 1) * d
    if strategy is Strategy.DATA_SLICING:
        piece_comp = n * c / p.chunks
        piece_comm = (n - 1) * d / p.chunks
        # The comm stream is serial: the tail is one piece when comm keeps up,
        # otherwise comm is the bottleneck after the first piece's compute.
        return max(p.chunks * piece_comp + piece_comm, piece_comp + p.chunks * piece_comm)
    return n * c + (n - 1) * max(0.0, d - c)


def reduction_pct(base: float, value: float) -> float:
    """``(base - value) / base * 100``; zero when there is nothing to reduce."""
    return 0.0 if base == 0 else (base - value) / base * 100.0


def analytic_latency(strategy: "Strategy | str", p: CostParams) -> CostReport:
    strategy = Strategy(strategy)
    compute = p.n * p.c
    e2e = _end_to_end(strategy, p)
    overhead = max(0.0, e2e - compute)
    base_e2e = _end_to_end(Strategy.BASELINE, p)
    base_overhead = base_e2e - compute
    return CostReport(
        strategy=strategy.value,
        n=p.n,
        c=p.c,
        d=p.d,
        chunks=p.chunks,
        compute_ms=compute,
        overhead_ms=overhead,
        end_to_end_ms=compute + overhead,
        overhead_reduction_pct=reduction_pct(base_overhead, overhead),
        latency_reduction_pct=reduction_pct(base_e2e, compute + overhead),
    )


@dataclass(frozen=True)
class Interval:
    rank: int
    kind: str
    start: float
    end: float
    label: str = ""


@dataclass
class Timeline:
    n: int
    intervals: list[Interval]

    def for_rank(self, rank: int, kind: str | None = None) -> list[Interval]:
        out = [iv for iv in self.intervals if iv.rank == rank and (kind is None or iv.kind == kind)]
        return sorted(out, key=lambda iv: (iv.start, iv.end))

    @property
    def makespan(self) -> float:
        return max((iv.end for iv in self.intervals), default=0.0)

    def validate(self) -> None:
        for iv in self.intervals:
            if iv.kind not in ("compute", "comm"):
                raise TimelineError(f"unknown interval kind {iv.kind!r}")
            if not 0 <= iv.rank < self.n:
                raise TimelineError(f"interval rank {iv.rank} outside [0, {self.n})")
            if not (math.isfinite(iv.start) and math.isfinite(iv.end)) or iv.end < iv.start:
                raise TimelineError(f"bad interval bounds {iv}")
        for r in range(self.n):
            if not self.for_rank(r, "compute"):
                raise TimelineError(f"rank {r} has no compute interval")
            for kind in ("compute", "comm"):
                ivs = self.for_rank(r, kind)
                for a, b in zip(ivs, ivs[1:]):
                    if b.start < a.end - _EPS:
                        raise TimelineError(f"rank {r}: overlapping {kind} intervals {a} and {b}")

    def compute_gaps(self, rank: int) -> list[float]:
        ivs = self.for_rank(rank, "compute")
        return [b.start - a.end for a, b in zip(ivs, ivs[1:])]


def _simulate_fused(p: CostParams) -> list[Interval]:
    n, c, d = p.n, p.c, p.d
    ivs: list[Interval] = []
    ready = [0.0] * n
    send_end = [[0.0] * n for _ in range(n)]
    for i in range(n):
        agg = [0.0] * n
        for r in range(n):
            cs = ready[r]
            ivs.append(Interval(r, "compute", cs, cs + c, f"chunk {(r - i - 1) % n}"))
            # Aggregation needs the partial the previous rank sent last iteration.
            agg[r] = cs + c if i == 0 else max(cs + c, send_end[(r - 1) % n][i - 1])
        for r in range(n):
            if i < n - 1:
                # Sends on one link are serial; the previous one has always
                # landed by the time this rank has aggregated.
                start = agg[r]
                send_end[r][i] = start + d
                ivs.append(Interval(r, "comm", start, start + d, f"send to {(r + 1) % n}"))
            ready[r] = agg[r]
    return ivs


def _simulate_slicing(p: CostParams) -> list[Interval]:
    n = p.n
    piece_comp = n * p.c / p.chunks
    hop = p.d / p.chunks
    ivs: list[Interval] = []
    for r in range(n):
        comm_free = 0.0
        for k in range(p.chunks):
            cs = k * piece_comp
            ivs.append(Interval(r, "compute", cs, cs + piece_comp, f"piece {k}"))
            t = max(cs + piece_comp, comm_free)
            for h in range(n - 1):
                ivs.append(Interval(r, "comm", t, t + hop, f"piece {k} hop {h}"))
                t += hop
            comm_free = t
    return ivs


def _simulate_baseline(p: CostParams) -> list[Interval]:
    n, c, d = p.n, p.c, p.d
    ivs: list[Interval] = []
    for r in range(n):
        for i in range(n):
            ivs.append(Interval(r, "compute", i * c, (i + 1) * c, f"chunk {i}"))
        for h in range(n - 1):
            t = n * c + h * d
            ivs.append(Interval(r, "comm", t, t + d, f"hop {h}"))
    return ivs


def simulate_timeline(strategy: "Strategy | str", p: CostParams) -> Timeline:
    strategy = Strategy(strategy)
    sim = {
        Strategy.BASELINE: _simulate_baseline,
        Strategy.DATA_SLICING: _simulate_slicing,
        Strategy.FUSED: _simulate_fused,
    }[strategy]
    return Timeline(p.n, sim(p))


def no_tail_check(t: Timeline) -> bool:
    """True iff no rank has communication still running after its last compute ends."""
    t.validate()
    for r in range(t.n):
        last_compute = max(iv.end for iv in t.for_rank(r, "compute"))
        if any(iv.end > last_compute + _EPS for iv in t.for_rank(r, "comm")):
            return False
    return True


def model_grid(
    ns: Iterable[int], cs: Iterable[float], ds: Iterable[float], chunks: Iterable[int], include_fit: bool = True
) -> list[CostReport]:
    """Analytic reports for every combination, all three strategies per point."""
    points = [CostParams(n, c, d, k) for n in ns for c in cs for d in ds for k in chunks]
    if include_fit and MEASURED_FIT not in points:
        points.append(MEASURED_FIT)
    return [analytic_latency(s, p) for p in points for s in Strategy]


def write_csv(reports: Iterable[CostReport], fh: IO[str], extra: dict | None = None) -> None:
    extra = extra or {}
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS + list(extra), lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        row = {k: _fmt(v) for k, v in rep.to_row().items()}
        row.update({k: _fmt(v) for k, v in extra.items()})
        writer.writerow(row)


def _fmt(v):
    # Fixed-point keeps the CSV free of exponents and locale formatting.
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
