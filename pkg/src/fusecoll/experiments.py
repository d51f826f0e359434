"""Experiment drivers behind the CLI: oracle verification and wall-clock benchmarks."""

from __future__ import annotations

import math
import statistics
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Any, Callable

import numpy as np

from .collectives import ScheduleKind, build_schedule, fuse_all_gather, fuse_all_to_all, fuse_reduce_scatter
from .fabric import RankEndpoint, RankGroup, ref_all_gather, ref_all_to_all, sleep_until
from .layers import (
    ACTIVATIONS,
    ShardedLinear,
    attention_heads,
    column_parallel_forward,
    fuse_all_to_all_attention,
    merge_heads,
    query_split_attention,
    reference_attention,
    reference_mlp,
    row_parallel_forward,
    shard_heads,
    tpsp_mlp_forward,
    ulysses_attention,
)
from .tensor import concat_feat, concat_seq, matmul, randint_fill, split_seq

LAYERS = ("mlp", "attention", "ulysses", "rs", "ag")
STRATEGIES = ("compute", "no-overlap", "slicing", "fused")
FFN_MULT = 4


class ConfigError(ValueError):
    """An experiment configuration violates one of its invariants."""


@dataclass
class ExperimentConfig:
    tp_size: int = 4
    batch: int = 2
    seq: int = 64
    d_model: int = 32
    heads: int = 8
    granularity: int = 1
    schedule: str = "ring"
    layer: str = "mlp"
    seed: int = 0
    delay_ms: float = 0.0
    delay_ratio: float | None = None
    reps: int = 10
    chunks: int = 4

    def validate(self) -> "ExperimentConfig":
        t, m = self.tp_size, self.granularity
        if t < 1:
            raise ConfigError(f"tp_size must be >= 1 (got {t})")
        if m < 1:
            raise ConfigError(f"granularity must be >= 1 (got {m})")
        if min(self.batch, self.seq, self.d_model, self.heads) < 1:
            raise ConfigError("batch, seq, d_model and heads must be >= 1")
        if self.seq % (t * m):
            raise ConfigError(f"seq must be divisible by tp_size*granularity ({self.seq} % {t * m} != 0)")
        if self.heads % t:
            raise ConfigError(f"heads must be divisible by tp_size ({self.heads} % {t} != 0)")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model must be divisible by heads ({self.d_model} % {self.heads} != 0)")
        if self.d_model % t:
            raise ConfigError(f"d_model must be divisible by tp_size ({self.d_model} % {t} != 0)")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1 (got {self.reps})")
        if self.chunks < 1:
            raise ConfigError(f"chunks must be >= 1 (got {self.chunks})")
        if self.delay_ms < 0 or (self.delay_ratio is not None and self.delay_ratio < 0):
            raise ConfigError("delay must be >= 0")
        if self.layer not in LAYERS:
            raise ConfigError(f"layer must be one of {', '.join(LAYERS)} (got {self.layer!r})")
        try:
            kind = ScheduleKind.parse(self.schedule)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if kind is ScheduleKind.PAIRWISE and t % 2 and t > 1:
            raise ConfigError(f"pairwise schedule requires an even tp_size (got {t})")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------------------- verify


@dataclass
class Check:
    name: str
    max_dev: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_dev <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} max_dev={self.max_dev:.3e} tol={self.tol:.0e}"


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {sum(c.passed for c in self.checks)}/{len(self.checks)} checks")
        return "\n".join(lines)


def max_abs_dev(got: list[np.ndarray], want: list[np.ndarray]) -> float:
    if len(got) != len(want):
        return math.inf
    dev = 0.0
    for a, b in zip(got, want):
        if np.shape(a) != np.shape(b):
            return math.inf
        if np.size(a):
            dev = max(dev, float(np.max(np.abs(np.asarray(a) - np.asarray(b)))))
    return dev


def max_rel_dev(got: list[np.ndarray], want: list[np.ndarray]) -> float:
    """Largest absolute deviation scaled by the largest reference magnitude."""
    scale = max((float(np.max(np.abs(w))) for w in want if np.size(w)), default=0.0)
    dev = max_abs_dev(got, want)
    return dev if scale == 0 else dev / scale


def applicable_schedules(t: int) -> list[ScheduleKind]:
    return [k for k in ScheduleKind if not (k is ScheduleKind.PAIRWISE and t % 2 and t > 1)]


def _int_data(cfg: ExperimentConfig):
    rng_seed = cfg.seed
    b, s, d = cfg.batch, cfg.seq, cfg.d_model
    x = randint_fill((b, s, d), -3, 4, rng_seed)
    w_up = randint_fill((d, FFN_MULT * d), -2, 3, rng_seed + 1)
    w_down = randint_fill((FFN_MULT * d, d), -2, 3, rng_seed + 2)
    return x, w_up, w_down


def _corrupt(w: np.ndarray) -> np.ndarray:
    w = w.copy()
    w.flat[0] += 1.0
    return w


def verify(cfg: ExperimentConfig, corrupt: bool = False) -> VerifyReport:
    """Run the oracle-equivalence checks for ``cfg.layer`` across every applicable schedule.

    ``corrupt`` perturbs one weight shard on the fused path only, as a fault
    injection hook: every fused check must then fail.
    """
    cfg.validate()
    t, m = cfg.tp_size, cfg.granularity
    group = RankGroup(t)
    report = VerifyReport()
    kinds = applicable_schedules(t)
    x, w_up, w_down = _int_data(cfg)
    x_slices = split_seq(x, t)

    if cfg.layer == "ag":
        col = ShardedLinear(w_up, "column", t)
        shards = [_corrupt(s) if corrupt and r == 0 else s for r, s in enumerate(col.shards)]
        got = group.run(lambda ep: column_parallel_forward(ep, x_slices[ep.rank], shards[ep.rank], m))
        gathered = ref_all_gather(group, x_slices)
        oracle = [matmul(gathered[r], col.shard(r)) for r in range(t)]
        report.checks.append(Check(f"ag/column-parallel m={m} vs all_gather+matmul", max_abs_dev(got, oracle), 0.0))
        single = [matmul(x, col.shard(r)) for r in range(t)]
        report.checks.append(Check(f"ag/column-parallel m={m} vs single-device", max_abs_dev(got, single), 0.0))
        return report

    if cfg.layer in ("rs", "mlp"):
        if cfg.layer == "rs":
            row = ShardedLinear(w_down, "row", t)
            h = randint_fill((cfg.batch, cfg.seq, FFN_MULT * cfg.d_model), -3, 4, cfg.seed + 3)
            h_cols = np.split(h, t, axis=2)
            want = split_seq(matmul(h, w_down), t)
        else:
            up = ShardedLinear(w_up, "column", t)
            row = ShardedLinear(w_down, "row", t)
            want = split_seq(reference_mlp(x, w_up, w_down, ACTIVATIONS["square"]), t)
        shards = [_corrupt(s) if corrupt and r == 0 else s for r, s in enumerate(row.shards)]
        for kind in kinds:
            sched = build_schedule(kind, t, m)
            if cfg.layer == "rs":
                got = group.run(lambda ep: row_parallel_forward(ep, h_cols[ep.rank], shards[ep.rank], sched))
            else:
                got = group.run(
                    lambda ep: tpsp_mlp_forward(
                        ep, x_slices[ep.rank], up.shard(ep.rank), shards[ep.rank], ACTIVATIONS["square"], sched, m
                    )
                )
            name = "rs/row-parallel" if cfg.layer == "rs" else "mlp/tpsp"
            report.checks.append(Check(f"{name} schedule={kind.value} m={m} vs single-device", max_abs_dev(got, want), 0.0))
        return report

    # Attention paths use real-valued data and a relative tolerance.
    rng = np.random.default_rng(cfg.seed)
    a, dh = cfg.heads, cfg.d_model // cfg.heads
    q, k, v = (rng.standard_normal((cfg.batch, a, cfg.seq, dh)) for _ in range(3))
    tol = 1e-10
    if cfg.layer == "attention":
        w_o = rng.standard_normal((cfg.d_model, cfg.d_model))
        row = ShardedLinear(w_o, "row", t)
        shards = [_corrupt(s) if corrupt and r == 0 else s for r, s in enumerate(row.shards)]
        qh, kh, vh = shard_heads(q, t), shard_heads(k, t), shard_heads(v, t)
        want = split_seq(reference_attention(q, k, v, w_o), t)
        for kind in kinds:
            sched = build_schedule(kind, t, m)
            got = group.run(
                lambda ep: query_split_attention(ep, qh[ep.rank], kh[ep.rank], vh[ep.rank], shards[ep.rank], sched, m=m)
            )
            report.checks.append(
                Check(f"attention/query-split schedule={kind.value} m={m} vs single-device", max_rel_dev(got, want), tol)
            )
        return report

    # ulysses
    qs, ks, vs = (split_seq(z, t, axis=2) for z in (q, k, v))
    if corrupt:
        qs = [z + 1.0 if r == 0 else z for r, z in enumerate(qs)]
    want = split_seq(reference_attention(q, k, v), t)
    got = group.run(lambda ep: ulysses_attention(ep, qs[ep.rank], ks[ep.rank], vs[ep.rank]))
    report.checks.append(Check("ulysses/full vs single-device", max_rel_dev(got, want), tol))
    qh, kh, vh = shard_heads(q, t), shard_heads(k, t), shard_heads(v, t)
    q_fused = [z + 1.0 if corrupt and r == 0 else z for r, z in enumerate(qh)]
    fused = group.run(lambda ep: fuse_all_to_all_attention(ep, q_fused[ep.rank], kh[ep.rank], vh[ep.rank]))
    per_rank = [split_seq(attention_heads(qh[r], kh[r], vh[r]), t, axis=2) for r in range(t)]
    moved = ref_all_to_all(group, per_rank)
    oracle = [concat_feat([merge_heads(p) for p in moved[r]]) for r in range(t)]
    report.checks.append(Check("ulysses/fused all-to-all vs reference all-to-all", max_rel_dev(fused, oracle), tol))
    return report


# --------------------------------------------------------------------------- bench


def _piece_index(s: int, t: int, k: int, piece: int) -> np.ndarray:
    """Sequence positions of data-slicing piece ``piece``: sub-chunk ``piece`` of every rank slice."""
    sub = s // (t * k)
    return np.concatenate([np.arange(r * k * sub + piece * sub, r * k * sub + (piece + 1) * sub) for r in range(t)])


def chunkwise(x, f, n: int, axis: int = 1, out_axis: int = 1):
    """Apply ``f`` chunk by chunk with no communication: the pure-compute reference."""
    return concat_seq([f(c, i) for i, c in enumerate(split_seq(x, n, axis))], out_axis)


# Baseline and data-slicing bodies hand their collectives to a modelled copy
# engine: each rank's engine runs one collective at a time, forwards ring hops
# the moment data lands, and costs no CPU. The rank thread only sleeps when its
# compute needs data the engine has not delivered yet.


def _engine_reduce_scatter(ep, y, ready: float):
    n, r = ep.size, ep.rank
    acc = split_seq(y, n)
    nxt, prv = (r + 1) % n, (r - 1) % n
    t = ready
    for step in range(n - 1):
        out_idx, in_idx = (r - step - 1) % n, (r - step - 2) % n
        send = ep.send_async(nxt, acc[out_idx], not_before=t)
        op = ep.recv_async(prv)
        got = op.wait(sleep=False)
        send.wait(sleep=False)
        acc[in_idx] = got + acc[in_idx]
        t = max(t, op.arrival)
    return acc[r], t


def _engine_all_gather(ep, x, ready: float):
    n, r = ep.size, ep.rank
    slots = [None] * n
    slots[r] = x
    nxt, prv = (r + 1) % n, (r - 1) % n
    cur, t = x, ready
    for step in range(n - 1):
        send = ep.send_async(nxt, cur, not_before=t)
        op = ep.recv_async(prv)
        cur = op.wait(sleep=False)
        send.wait(sleep=False)
        slots[(r - step - 1) % n] = cur
        t = max(t, op.arrival)
    return concat_seq(slots), t


def _engine_all_to_all(ep, parts, ready: float):
    n, r = ep.size, ep.rank
    out = [None] * n
    out[r] = parts[r]
    sends = [ep.send_async((r + i) % n, parts[(r + i) % n], not_before=ready) for i in range(1, n)]
    t = ready
    for i in range(1, n):
        src = (r - i) % n
        op = ep.recv_async(src)
        out[src] = op.wait(sleep=False)
        t = max(t, op.arrival)
    for s in sends:
        s.wait(sleep=False)
    return out, t


def rs_no_overlap(ep, x, f, axis=1):
    out, done = _engine_reduce_scatter(ep, f(x, -1), time.perf_counter())
    sleep_until(done)
    return out


def rs_slicing(ep, x, f, k, axis=1):
    n = ep.size
    s = x.shape[axis]
    computed = []
    for p in range(k):
        idx = _piece_index(s, n, k, p)
        computed.append((f(np.take(x, idx, axis=axis), p), time.perf_counter()))
    outs, engine_free = [], 0.0
    for y, finished in computed:
        out, engine_free = _engine_reduce_scatter(ep, y, max(finished, engine_free))
        outs.append(out)
    sleep_until(engine_free)
    return concat_seq(outs)


def ag_no_overlap(ep, x, f):
    full, done = _engine_all_gather(ep, x, time.perf_counter())
    sleep_until(done)
    return f(full, -1)


def ag_slicing(ep, x, f, k):
    n = ep.size
    gathered, engine_free = [], time.perf_counter()
    for piece in split_seq(x, k):
        full, engine_free = _engine_all_gather(ep, piece, engine_free)
        gathered.append((full, engine_free))
    outs = []
    for p, (full, landed) in enumerate(gathered):
        sleep_until(landed)
        outs.append(f(full, p))
    # Piece p holds sub-chunk p of every rank; write it back in global sequence order.
    b, rows, d = outs[0].shape
    full = np.empty((b, rows * k, d))
    view = full.reshape(b, n, k, rows // n, d)
    for p, o in enumerate(outs):
        view[:, :, p] = o.reshape(b, n, rows // n, d)
    return full


def a2a_no_overlap(ep, x, f, axis=2):
    n = ep.size
    out, done = _engine_all_to_all(ep, split_seq(f(x, -1), n, axis=axis), time.perf_counter())
    sleep_until(done)
    return out


def a2a_slicing(ep, x, f, k, axis=2):
    n = ep.size
    s = x.shape[axis]
    computed = []
    for p in range(k):
        idx = _piece_index(s, n, k, p)
        computed.append((f(np.take(x, idx, axis=axis), p), time.perf_counter()))
    pieces, engine_free = [], 0.0
    for y, finished in computed:
        out, engine_free = _engine_all_to_all(ep, split_seq(y, n, axis=axis), max(finished, engine_free))
        pieces.append(out)
    sleep_until(engine_free)
    return [concat_seq([pieces[p][src] for p in range(k)], axis=axis) for src in range(n)]


@dataclass
class BenchWorkload:
    """Per-rank inputs plus one body per strategy; ``chunk_elems`` sizes a base message."""

    name: str
    bodies: dict[str, Callable[[RankEndpoint], Any]]
    chunk_elems: int
    computes_per_rank: int


def build_workload(cfg: ExperimentConfig) -> BenchWorkload:
    cfg.validate()
    t, m, k = cfg.tp_size, cfg.granularity, cfg.chunks
    b, s, d = cfg.batch, cfg.seq, cfg.d_model
    if s % (t * k):
        raise ConfigError(f"seq must be divisible by tp_size*chunks for the slicing strategy ({s} % {t * k} != 0)")
    rng = np.random.default_rng(cfg.seed)
    sched = build_schedule(cfg.schedule, t, m)
    act = ACTIVATIONS["square"]
    chunk_elems = b * (s // (t * m)) * d

    if cfg.layer in ("rs", "mlp", "ag"):
        x = rng.standard_normal((b, s, d))
        w_up = rng.standard_normal((d, FFN_MULT * d)) / math.sqrt(d)
        w_down = rng.standard_normal((FFN_MULT * d, d)) / math.sqrt(FFN_MULT * d)
        up, down = ShardedLinear(w_up, "column", t), ShardedLinear(w_down, "row", t)
        xs = split_seq(x, t)
        hs = [act(matmul(x, up.shard(r))) for r in range(t)]

        def down_f(r):
            return lambda c, _: matmul(c, down.shard(r))

        def up_f(r):
            return lambda c, _: matmul(c, up.shard(r))

        if cfg.layer == "rs":
            bodies = {
                "compute": lambda ep: chunkwise(hs[ep.rank], down_f(ep.rank), t * m),
                "no-overlap": lambda ep: rs_no_overlap(ep, hs[ep.rank], down_f(ep.rank)),
                "slicing": lambda ep: rs_slicing(ep, hs[ep.rank], down_f(ep.rank), k),
                "fused": lambda ep: fuse_reduce_scatter(ep, hs[ep.rank], down_f(ep.rank), sched),
            }
            return BenchWorkload("rs", bodies, chunk_elems, t * m)
        if cfg.layer == "ag":
            bodies = {
                "compute": lambda ep: chunkwise(x, up_f(ep.rank), t * m),
                "no-overlap": lambda ep: ag_no_overlap(ep, xs[ep.rank], up_f(ep.rank)),
                "slicing": lambda ep: ag_slicing(ep, xs[ep.rank], up_f(ep.rank), k),
                "fused": lambda ep: fuse_all_gather(ep, xs[ep.rank], up_f(ep.rank), m),
            }
            return BenchWorkload("ag", bodies, chunk_elems, t * m)
        bodies = {
            "compute": lambda ep: chunkwise(act(chunkwise(x, up_f(ep.rank), t * m)), down_f(ep.rank), t * m),
            "no-overlap": lambda ep: rs_no_overlap(
                ep, act(ag_no_overlap(ep, xs[ep.rank], up_f(ep.rank))), down_f(ep.rank)
            ),
            "slicing": lambda ep: rs_slicing(
                ep, act(ag_slicing(ep, xs[ep.rank], up_f(ep.rank), k)), down_f(ep.rank), k
            ),
            "fused": lambda ep: tpsp_mlp_forward(ep, xs[ep.rank], up.shard(ep.rank), down.shard(ep.rank), act, sched, m),
            # Only the chunked matmuls, used to calibrate the per-chunk compute time.
            "chunks": lambda ep: (chunkwise(x, up_f(ep.rank), t * m), chunkwise(hs[ep.rank], down_f(ep.rank), t * m)),
        }
        return BenchWorkload("mlp", bodies, chunk_elems, 2 * t * m)

    a, dh = cfg.heads, d // cfg.heads
    q, kk, v = (rng.standard_normal((b, a, s, dh)) for _ in range(3))
    qh, kh, vh = shard_heads(q, t), shard_heads(kk, t), shard_heads(v, t)

    if cfg.layer == "attention":
        w_o = ShardedLinear(rng.standard_normal((d, d)) / math.sqrt(d), "row", t)

        def attn_f(r):
            return lambda qs, _: matmul(merge_heads(attention_heads(qs, kh[r], vh[r])), w_o.shard(r))

        bodies = {
            "compute": lambda ep: chunkwise(qh[ep.rank], attn_f(ep.rank), t * m, axis=2),
            "no-overlap": lambda ep: rs_no_overlap(ep, qh[ep.rank], attn_f(ep.rank)),
            "slicing": lambda ep: rs_slicing(ep, qh[ep.rank], attn_f(ep.rank), k, axis=2),
            "fused": lambda ep: query_split_attention(ep, qh[ep.rank], kh[ep.rank], vh[ep.rank], w_o.shard(ep.rank), sched, m=m),
        }
        return BenchWorkload("attention", bodies, chunk_elems, t * m)

    def ul_f(r):
        return lambda qs, _: attention_heads(qs, kh[r], vh[r])

    def merge(parts):
        return concat_feat([merge_heads(p) for p in parts])

    bodies = {
        "compute": lambda ep: chunkwise(qh[ep.rank], ul_f(ep.rank), t, axis=2, out_axis=2),
        "no-overlap": lambda ep: merge(a2a_no_overlap(ep, qh[ep.rank], ul_f(ep.rank))),
        "slicing": lambda ep: merge(a2a_slicing(ep, qh[ep.rank], ul_f(ep.rank), k)),
        "fused": lambda ep: merge(fuse_all_to_all(ep, qh[ep.rank], ul_f(ep.rank), axis=2)),
    }
    return BenchWorkload("ulysses", bodies, b * (s // t) * (d // t), t)


@dataclass
class BenchResult:
    strategy: str
    samples_ms: list[float]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def std_ms(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0


def _time_once(group: RankGroup, body: Callable[[RankEndpoint], Any]) -> tuple[float, list[Any]]:
    """Wall-clock one forward: first rank start to last rank finish, in ms."""
    barrier = threading.Barrier(group.size)

    def timed(ep):
        barrier.wait()
        t0 = time.perf_counter()
        out = body(ep)
        return t0, time.perf_counter(), out

    res = group.run(timed)
    return (max(e for _, e, _ in res) - min(s for s, _, _ in res)) * 1e3, [o for _, _, o in res]


def time_strategy(
    group: RankGroup, body: Callable[[RankEndpoint], Any], reps: int, warmup: int = 1
) -> tuple[list[float], list[Any]]:
    samples = []
    outputs: list[Any] = []
    for i in range(warmup + reps):
        ms, outputs = _time_once(group, body)
        if i >= warmup:
            samples.append(ms)
    return samples, outputs


def time_interleaved(
    runs: dict[str, tuple[RankGroup, Callable[[RankEndpoint], Any]]], reps: int, warmup: int = 1
) -> tuple[dict[str, list[float]], dict[str, list[Any]]]:
    """Like ``time_strategy`` for several bodies, alternating them every repetition
    so slow drift in machine load hits all of them alike."""
    samples: dict[str, list[float]] = {name: [] for name in runs}
    outputs: dict[str, list[Any]] = {}
    for i in range(warmup + reps):
        for name, (group, body) in runs.items():
            ms, outputs[name] = _time_once(group, body)
            if i >= warmup:
                samples[name].append(ms)
    return samples, outputs


BENCH_FIELDS = [
    "layer",
    "strategy",
    "tp_size",
    "batch",
    "seq",
    "d_model",
    "heads",
    "granularity",
    "schedule",
    "chunks",
    "seed",
    "delay_ms",
    "reps",
    "mean_ms",
    "std_ms",
    "overhead_ms",
    "overhead_reduction_pct",
    "latency_reduction_pct",
    "chunk_compute_ms",
    "max_output_dev",
]


@dataclass
class BenchReport:
    config: ExperimentConfig
    delay_ms: float
    chunk_compute_ms: float
    results: dict[str, BenchResult]
    max_output_dev: float

    def rows(self) -> list[dict]:
        comp = self.results["compute"].mean_ms
        base = self.results["no-overlap"].mean_ms
        base_over = base - comp
        rows = []
        for name, res in self.results.items():
            over = res.mean_ms - comp
            c = self.config
            rows.append(
                {
                    "layer": c.layer,
                    "strategy": name,
                    "tp_size": c.tp_size,
                    "batch": c.batch,
                    "seq": c.seq,
                    "d_model": c.d_model,
                    "heads": c.heads,
                    "granularity": c.granularity,
                    "schedule": ScheduleKind.parse(c.schedule).value,
                    "chunks": c.chunks,
                    "seed": c.seed,
                    "delay_ms": f"{self.delay_ms:.6f}",
                    "reps": c.reps,
                    "mean_ms": f"{res.mean_ms:.6f}",
                    "std_ms": f"{res.std_ms:.6f}",
                    "overhead_ms": f"{over:.6f}",
                    "overhead_reduction_pct": f"{(base_over - over) / base_over * 100 if base_over > 0 else 0.0:.6f}",
                    "latency_reduction_pct": f"{(base - res.mean_ms) / base * 100 if base > 0 else 0.0:.6f}",
                    "chunk_compute_ms": f"{self.chunk_compute_ms:.6f}",
                    "max_output_dev": f"{self.max_output_dev:.6f}",
                }
            )
        return rows


def bench(cfg: ExperimentConfig, strategies: tuple[str, ...] = STRATEGIES) -> BenchReport:
    """Time every strategy on the threaded fabric.

    A calibration pass times the chunked compute calls alone (no communication,
    no elementwise work between collectives) to get the per-chunk compute time
    used with ``delay_ratio``. The strategies are then timed in alternation.
    Message delay scales with payload size relative to one compute chunk.
    """
    wl = build_workload(cfg)
    quiet = RankGroup(cfg.tp_size)
    calib, _ = time_strategy(quiet, wl.bodies.get("chunks", wl.bodies["compute"]), cfg.reps)
    chunk_ms = statistics.fmean(calib) / wl.computes_per_rank
    delay_ms = cfg.delay_ms if cfg.delay_ratio is None else cfg.delay_ratio * chunk_ms
    delay_s = delay_ms / 1e3
    group = RankGroup(cfg.tp_size, delay=lambda payload: delay_s * payload.size / wl.chunk_elems)
    # No-overlap always runs: every other communicating strategy must reproduce its output.
    names = list(dict.fromkeys(["no-overlap", *strategies]))
    runs = {n: (quiet if n == "compute" else group, wl.bodies[n]) for n in names}
    samples, outputs = time_interleaved(runs, cfg.reps)
    dev = 0.0
    for name in names:
        if name not in ("compute", "no-overlap"):
            dev = max(dev, max_rel_dev(outputs[name], outputs["no-overlap"]))
    results = {n: BenchResult(n, samples[n]) for n in STRATEGIES if n in samples}
    return BenchReport(cfg, delay_ms, chunk_ms, results, dev)
