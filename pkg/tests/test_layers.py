import math

import numpy as np
import pytest

from fusecoll.collectives import ScheduleKind, build_schedule
from fusecoll.errors import GroupError, ShapeError
from fusecoll.fabric import RankGroup, ref_all_gather, ref_all_to_all
from fusecoll.layers import (
    ShardedLinear,
    attention_heads,
    column_parallel_forward,
    fuse_all_to_all_attention,
    identity,
    query_split_attention,
    reference_attention,
    reference_mlp,
    row_parallel_forward,
    shard_heads,
    square,
    tpsp_mlp_forward,
    ulysses_attention,
)
from fusecoll.tensor import concat_feat, matmul, merge_heads, randint_fill, split_seq


def naive_attention(q, k, v):
    """Loop-by-loop multi-head attention, (B,H,S,Dh) -> (B,S,H*Dh)."""
    b, h, s, dh = q.shape
    out = np.zeros((b, s, h * dh))
    for bi in range(b):
        for hi in range(h):
            for i in range(s):
                scores = [sum(q[bi, hi, i, t] * k[bi, hi, j, t] for t in range(dh)) / math.sqrt(dh) for j in range(s)]
                top = max(scores)
                weights = [math.exp(x - top) for x in scores]
                total = sum(weights)
                for t in range(dh):
                    out[bi, i, hi * dh + t] = sum(w * v[bi, hi, j, t] for w, j in zip(weights, range(s))) / total
    return out


def rng_qkv(b, a, s, dh, seed):
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((b, a, s, dh)) for _ in range(3))


def rel_dev(got, want):
    return float(np.max(np.abs(got - want)) / np.max(np.abs(want)))


@pytest.mark.parametrize("kind, t", [("row", 1), ("row", 4), ("column", 2), ("column", 4)])
def test_shards_reconstruct_weight(kind, t):
    w = randint_fill((8, 12), -9, 10, t)
    lin = ShardedLinear(w, kind, t)
    assert len(lin.shards) == t
    np.testing.assert_array_equal(lin.stacked(), w)
    axis = 0 if kind == "row" else 1
    np.testing.assert_array_equal(np.concatenate([lin.shard(r) for r in range(t)], axis=axis), w)


def test_sharding_rejects_indivisible():
    with pytest.raises(ShapeError):
        ShardedLinear(np.zeros((6, 4)), "row", 4)
    with pytest.raises(ValueError):
        ShardedLinear(np.zeros((4, 4)), "diagonal", 2)


def test_column_parallel_singleton():
    x = randint_fill((2, 4, 3), -3, 4, 0)
    w = randint_fill((3, 5), -2, 3, 1)
    out = RankGroup(1).run(lambda ep: column_parallel_forward(ep, x, w))[0]
    np.testing.assert_array_equal(out, matmul(x, w))


def test_column_parallel_identity_weight():
    t = 4
    xs = [randint_fill((1, 2, 8), -9, 10, r) for r in range(t)]
    lin = ShardedLinear(np.eye(8), "column", t)
    outs = RankGroup(t).run(lambda ep: column_parallel_forward(ep, xs[ep.rank], lin.shard(ep.rank)))
    full = ref_all_gather(t, xs)[0]
    for r in range(t):
        np.testing.assert_array_equal(outs[r], full[:, :, 2 * r : 2 * r + 2])


@pytest.mark.parametrize("m", [1, 2])
def test_column_parallel_oracle(m):
    t = 4
    xs = [randint_fill((2, 2 * m, 6), -3, 4, r) for r in range(t)]
    lin = ShardedLinear(randint_fill((6, 8), -2, 3, 9), "column", t)
    outs = RankGroup(t).run(lambda ep: column_parallel_forward(ep, xs[ep.rank], lin.shard(ep.rank), m))
    full = np.concatenate(xs, axis=1)
    for r in range(t):
        np.testing.assert_array_equal(outs[r], matmul(full, lin.shard(r)))


def test_row_parallel_singleton():
    x = randint_fill((2, 4, 3), -3, 4, 0)
    w = randint_fill((3, 5), -2, 3, 1)
    out = RankGroup(1).run(lambda ep: row_parallel_forward(ep, x, w))[0]
    np.testing.assert_array_equal(out, matmul(x, w))


@pytest.mark.parametrize("kind", list(ScheduleKind))
def test_row_parallel_two_ranks(kind):
    x = randint_fill((2, 4, 6), -3, 4, 5)
    lin = ShardedLinear(randint_fill((6, 3), -2, 3, 6), "row", 2)
    halves = np.split(x, 2, axis=2)
    outs = RankGroup(2).run(lambda ep: row_parallel_forward(ep, halves[ep.rank], lin.shard(ep.rank), kind))
    np.testing.assert_array_equal(np.concatenate(outs, axis=1), matmul(x, lin.weight))


def test_row_parallel_schedule_swap_is_identical():
    t = 4
    x = randint_fill((2, 8, 8), -3, 4, 11)
    lin = ShardedLinear(randint_fill((8, 4), -2, 3, 12), "row", t)
    parts = np.split(x, t, axis=2)
    results = [
        RankGroup(t).run(lambda ep: row_parallel_forward(ep, parts[ep.rank], lin.shard(ep.rank), kind))
        for kind in ("ring", "pairwise")
    ]
    for a, b in zip(*results):
        assert a.tobytes() == b.tobytes()


def test_mlp_identity_singleton():
    x = randint_fill((1, 4, 3), -3, 4, 0)
    out = RankGroup(1).run(lambda ep: tpsp_mlp_forward(ep, x, np.eye(3), np.eye(3), identity))[0]
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("t", [1, 2, 4])
@pytest.mark.parametrize("m", [1, 2])
def test_mlp_exact_vs_single_device(t, m):
    b, s, d = 2, 8 * m, 8
    x = randint_fill((b, s, d), -3, 4, 7)
    up = ShardedLinear(randint_fill((d, 4 * d), -2, 3, 8), "column", t)
    down = ShardedLinear(randint_fill((4 * d, d), -2, 3, 9), "row", t)
    xs = split_seq(x, t)
    want = split_seq(reference_mlp(x, up.weight, down.weight, square), t)
    for kind in ScheduleKind:
        if kind is ScheduleKind.PAIRWISE and t % 2 and t > 1:
            continue
        outs = RankGroup(t).run(
            lambda ep: tpsp_mlp_forward(ep, xs[ep.rank], up.shard(ep.rank), down.shard(ep.rank), square, kind, m)
        )
        for g, w in zip(outs, want):
            assert g.shape == (b, s // t, d)
            np.testing.assert_array_equal(g, w)


def test_attention_matches_naive_loops():
    q, k, v = rng_qkv(2, 4, 8, 2, 0)
    np.testing.assert_allclose(merge_heads(attention_heads(q, k, v)), naive_attention(q, k, v), rtol=1e-12, atol=1e-13)


def test_attention_length_one_passes_v_through():
    _, _, v = rng_qkv(2, 3, 1, 4, 1)
    np.testing.assert_allclose(attention_heads(v, v, v), v)


def test_attention_zero_projection():
    q, k, v = rng_qkv(1, 2, 4, 2, 2)
    assert not reference_attention(q, k, v, np.zeros((4, 3))).any()


def test_attention_shape_mismatch():
    q, k, v = rng_qkv(1, 2, 4, 2, 2)
    with pytest.raises(ShapeError):
        attention_heads(q, k[:, :1], v[:, :1])


def test_query_split_singleton():
    q, k, v = rng_qkv(1, 1, 4, 3, 3)
    w_o = np.random.default_rng(4).standard_normal((3, 5))
    out = RankGroup(1).run(lambda ep: query_split_attention(ep, q, k, v, w_o))[0]
    np.testing.assert_allclose(out, reference_attention(q, k, v, w_o), rtol=1e-12)


def test_query_split_length_one_projects_v():
    q, k, v = rng_qkv(2, 2, 1, 3, 5)
    w_o = np.random.default_rng(6).standard_normal((6, 4))
    out = RankGroup(1).run(lambda ep: query_split_attention(ep, k, k, v, w_o))[0]
    np.testing.assert_allclose(out, matmul(merge_heads(v), w_o), rtol=1e-12)


@pytest.mark.parametrize("t", [2, 4])
@pytest.mark.parametrize("a", [4, 8])
@pytest.mark.parametrize("m", [1, 2])
def test_query_split_vs_single_device(t, a, m):
    b, s, dh = 2, 16, 4
    q, k, v = rng_qkv(b, a, s, dh, 10 * t + a)
    w_o = ShardedLinear(np.random.default_rng(a).standard_normal((a * dh, a * dh)), "row", t)
    qh, kh, vh = shard_heads(q, t), shard_heads(k, t), shard_heads(v, t)
    want = split_seq(reference_attention(q, k, v, w_o.weight), t)
    for kind in ScheduleKind:
        sched = build_schedule(kind, t, m)
        outs = RankGroup(t).run(
            lambda ep: query_split_attention(ep, qh[ep.rank], kh[ep.rank], vh[ep.rank], w_o.shard(ep.rank), sched, m=m)
        )
        for g, w in zip(outs, want):
            assert g.shape == (b, s // t, a * dh)
            assert rel_dev(g, w) <= 1e-10


def test_query_split_agrees_with_row_parallel():
    # Attention per head group followed by a row-parallel projection is the same computation.
    t, b, a, s, dh = 4, 2, 8, 16, 4
    q, k, v = rng_qkv(b, a, s, dh, 77)
    w_o = ShardedLinear(np.random.default_rng(78).standard_normal((a * dh, a * dh)), "row", t)
    qh, kh, vh = shard_heads(q, t), shard_heads(k, t), shard_heads(v, t)
    fused = RankGroup(t).run(lambda ep: query_split_attention(ep, qh[ep.rank], kh[ep.rank], vh[ep.rank], w_o.shard(ep.rank)))
    ctx = [merge_heads(attention_heads(qh[r], kh[r], vh[r])) for r in range(t)]
    plain = RankGroup(t).run(lambda ep: row_parallel_forward(ep, ctx[ep.rank], w_o.shard(ep.rank)))
    for f, p in zip(fused, plain):
        assert rel_dev(f, p) <= 1e-12


def test_query_split_rejects_bad_projection():
    q, k, v = rng_qkv(1, 2, 4, 2, 8)
    with pytest.raises(GroupError) as info:
        RankGroup(1).run(lambda ep: query_split_attention(ep, q, k, v, np.zeros((3, 4))))
    assert isinstance(info.value.cause, ShapeError)


def test_fused_a2a_attention_singleton():
    q, k, v = rng_qkv(2, 2, 4, 3, 9)
    out = RankGroup(1).run(lambda ep: fuse_all_to_all_attention(ep, q, k, v))[0]
    np.testing.assert_allclose(out, reference_attention(q, k, v), rtol=1e-12)


@pytest.mark.parametrize("t", [2, 4])
@pytest.mark.parametrize("a", [4, 8])
def test_fused_a2a_attention_vs_reference_all_to_all(t, a):
    b, s, dh = 2, 16, 4
    q, k, v = rng_qkv(b, a, s, dh, 100 + t + a)
    qh, kh, vh = shard_heads(q, t), shard_heads(k, t), shard_heads(v, t)
    group = RankGroup(t)
    fused = group.run(lambda ep: fuse_all_to_all_attention(ep, qh[ep.rank], kh[ep.rank], vh[ep.rank]))
    assert [ep.sends_posted for ep in group.endpoints] == [t - 1] * t
    per_rank = [split_seq(attention_heads(qh[r], kh[r], vh[r]), t, axis=2) for r in range(t)]
    moved = ref_all_to_all(t, per_rank)
    for r in range(t):
        oracle = concat_feat([merge_heads(p) for p in moved[r]])
        assert fused[r].shape == (b, s // t, a * dh)
        assert rel_dev(fused[r], oracle) <= 1e-10
    single = split_seq(reference_attention(q, k, v), t)
    for r in range(t):
        assert rel_dev(fused[r], single[r]) <= 1e-10


@pytest.mark.parametrize("t", [2, 4])
def test_ulysses_from_sequence_shards(t):
    b, a, s, dh = 2, 8, 16, 4
    q, k, v = rng_qkv(b, a, s, dh, 200 + t)
    qs, ks, vs = (split_seq(z, t, axis=2) for z in (q, k, v))
    outs = RankGroup(t).run(lambda ep: ulysses_attention(ep, qs[ep.rank], ks[ep.rank], vs[ep.rank]))
    for g, w in zip(outs, split_seq(reference_attention(q, k, v), t)):
        assert rel_dev(g, w) <= 1e-10


def test_a2a_attention_rejects_indivisible_seq():
    q, k, v = rng_qkv(1, 2, 6, 2, 1)
    with pytest.raises(GroupError, match="S=6"):
        RankGroup(4).run(lambda ep: fuse_all_to_all_attention(ep, q, k, v))
