import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusecoll.collectives import (
    ScheduleKind,
    Step,
    a2a_indices,
    build_schedule,
    fuse_all_gather,
    fuse_all_to_all,
    fuse_reduce_scatter,
    ring_indices_ag,
    ring_indices_rs,
    round_robin_partner,
    validate_schedule,
)
from fusecoll.errors import UnsupportedConfigError
from fusecoll.fabric import RankGroup, ref_all_gather, ref_all_to_all, ref_reduce_scatter
from fusecoll.tensor import matmul, randint_fill, split_seq

KINDS = list(ScheduleKind)


def kinds_for(n):
    return [k for k in KINDS if not (k is ScheduleKind.PAIRWISE and n % 2 and n > 1)]


def ident(chunk, _):
    return chunk


# index formulas


@pytest.mark.parametrize("fn", [ring_indices_ag, ring_indices_rs, a2a_indices])
def test_indices_singleton(fn):
    assert fn(0, 0, 1) == (0, 0, 0)


def test_ag_indices_example():
    assert ring_indices_ag(0, 1, 4) == (1, 3, 3)


def test_rs_first_slice_goes_to_neighbour():
    assert ring_indices_rs(0, 0, 4)[2] == 3


@pytest.mark.parametrize("n", [2, 3, 4, 7])
def test_rs_last_iteration_keeps_own_slice(n):
    for r in range(n):
        assert ring_indices_rs(r, n - 1, n)[2] == r
        assert a2a_indices(r, n - 1, n)[2] == r


@given(st.integers(1, 16).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))))
def test_computed_slices_cover_everything(nr):
    n, r = nr
    for fn in (ring_indices_ag, ring_indices_rs, a2a_indices):
        assert {fn(r, i, n)[2] for i in range(n)} == set(range(n))


@pytest.mark.parametrize("args", [(4, 0, 4), (0, -1, 4), (0, 0, 0)])
def test_indices_reject_out_of_range(args):
    with pytest.raises(ValueError):
        ring_indices_ag(*args)


def test_a2a_peers_are_consistent():
    # What rank r sends in iteration i is what its target receives in iteration i.
    n = 5
    for i in range(n - 1):
        for r in range(n):
            j, _, _ = a2a_indices(r, i, n)
            assert a2a_indices(j, i, n)[1] == r


# schedules


def test_pairwise_rounds_n4():
    rounds = []
    for t in range(1, 4):
        pairs = {tuple(sorted((r, round_robin_partner(r, t, 4)))) for r in range(4)}
        rounds.append(sorted(pairs))
    assert rounds == [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]]


def test_pairwise_schedule_rounds_n4():
    sched = build_schedule("pairwise", 4)
    got = [sorted({tuple(sorted((r, s.send_peer))) for r, s in enumerate(col)}) for col in sched.rounds()]
    assert got == [[(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]]


def test_ring_peers_fixed():
    sched = build_schedule(ScheduleKind.RING, 4)
    for r, steps in enumerate(sched.steps):
        assert len(steps) == 3
        assert {(s.send_peer, s.recv_peer) for s in steps} == {((r + 1) % 4, (r - 1) % 4)}


@pytest.mark.parametrize("kind", KINDS)
def test_singleton_schedule_is_empty(kind):
    sched = build_schedule(kind, 1)
    assert sched.steps == [[]]
    assert sched.tail == [[0]]
    validate_schedule(sched)


@pytest.mark.parametrize("n", [3, 5, 7])
def test_pairwise_needs_even_n(n):
    with pytest.raises(UnsupportedConfigError):
        build_schedule("pairwise", n)


def test_unknown_schedule_name():
    with pytest.raises(ValueError, match="circular-slices"):
        build_schedule("tree", 4)


@pytest.mark.parametrize("n", [2, 4, 6, 8])
def test_pairwise_disjoint_pairs_per_round(n):
    sched = build_schedule("pairwise", n)
    rounds = sched.rounds()
    assert len(rounds) == n - 1
    seen = set()
    for col in rounds:
        pairs = {frozenset((r, s.send_peer)) for r, s in enumerate(col)}
        assert len(pairs) == n // 2
        for r, s in enumerate(col):
            assert s.send_peer == s.recv_peer
            assert col[s.send_peer].send_peer == r
        seen |= pairs
    assert len(seen) == n * (n - 1) // 2


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 10), st.integers(1, 4))
def test_every_schedule_validates(kind, n, m):
    if kind is ScheduleKind.PAIRWISE and n % 2:
        n += 1
    sched = build_schedule(kind, n, m)
    validate_schedule(sched)
    for r in range(n):
        assert len(sched.steps[r]) == m * (n - 1)
        assert sorted(sched.tail[r]) == [r * m + c for c in range(m)]


def test_validator_catches_a_wrong_peer():
    sched = build_schedule("ring", 4)
    bad = dataclasses.replace(sched, steps=[list(s) for s in sched.steps])
    s0 = bad.steps[0][0]
    bad.steps[0][0] = Step(2, s0.recv_peer, s0.compute_slice)
    with pytest.raises(ValueError):
        validate_schedule(bad)


def test_validator_catches_double_counting():
    sched = build_schedule("ring", 3)
    bad = dataclasses.replace(sched, tail=[[0], [0], [2]])
    with pytest.raises(ValueError):
        validate_schedule(bad)


# fused collectives


def _inputs(t, seed, s_per=4, d=3, b=2):
    return [randint_fill((b, t * s_per, d), -9, 10, seed * 100 + r) for r in range(t)]


def test_fuse_all_gather_singleton_no_comm():
    x = randint_fill((1, 4, 2), -3, 4, 0)
    group = RankGroup(1)
    out = group.run(lambda ep: fuse_all_gather(ep, x, lambda c, _: 2 * c))[0]
    np.testing.assert_array_equal(out, 2 * x)
    assert group.endpoints[0].sends_posted == 0


@pytest.mark.parametrize("t", [2, 3, 4, 8])
@pytest.mark.parametrize("m", [1, 2])
def test_fuse_all_gather_identity_matches_reference(t, m):
    xs = [randint_fill((2, 2 * m, 3), -9, 10, r) for r in range(t)]
    group = RankGroup(t)
    got = group.run(lambda ep: fuse_all_gather(ep, xs[ep.rank], ident, m))
    want = ref_all_gather(t, xs)
    for g, w in zip(got, want):
        np.testing.assert_array_equal(g, w)
    assert [ep.sends_posted for ep in group.endpoints] == [m * (t - 1)] * t


@pytest.mark.parametrize("t", [2, 4])
def test_fuse_all_gather_column_shard(t):
    xs = [randint_fill((2, 4, 6), -3, 4, r) for r in range(t)]
    w = randint_fill((6, 2 * t), -2, 3, 50)
    shards = np.split(w, t, axis=1)
    got = RankGroup(t).run(lambda ep: fuse_all_gather(ep, xs[ep.rank], lambda c, _: matmul(c, shards[ep.rank])))
    full = np.concatenate(xs, axis=1)
    for r in range(t):
        np.testing.assert_array_equal(got[r], matmul(full, shards[r]))


def test_fuse_all_gather_computes_own_slice_first():
    t = 4
    order = [[] for _ in range(t)]

    def body(ep):
        def f(c, idx):
            order[ep.rank].append(idx)
            return c

        return fuse_all_gather(ep, np.zeros((1, 1, 1)), f)

    RankGroup(t).run(body)
    for r in range(t):
        assert order[r] == [(r - i) % t for i in range(t)]


def test_fuse_reduce_scatter_singleton():
    x = randint_fill((1, 4, 2), -3, 4, 0)
    group = RankGroup(1)
    out = group.run(lambda ep: fuse_reduce_scatter(ep, x, ident))[0]
    np.testing.assert_array_equal(out, x)
    assert group.endpoints[0].sends_posted == 0


@pytest.mark.parametrize("kind", KINDS)
def test_fuse_reduce_scatter_hand_example(kind):
    xs = [np.array([10.0 * r + s for s in range(4)]).reshape(1, 4, 1) for r in range(4)]
    sched = build_schedule(kind, 4)
    outs = RankGroup(4).run(lambda ep: fuse_reduce_scatter(ep, xs[ep.rank], ident, sched))
    assert [float(o.item()) for o in outs] == [60 + 4 * s for s in range(4)]


@pytest.mark.parametrize("t", [1, 2, 4, 8])
@pytest.mark.parametrize("m", [1, 2])
def test_fuse_reduce_scatter_matches_reference(t, m):
    xs = _inputs(t, 3, s_per=2 * m)
    want = ref_reduce_scatter(t, xs)
    for kind in kinds_for(t):
        sched = build_schedule(kind, t, m)
        group = RankGroup(t)
        got = group.run(lambda ep: fuse_reduce_scatter(ep, xs[ep.rank], ident, sched))
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)
        # The final iteration posts nothing: m*(t-1) sends and receives per rank.
        assert [ep.sends_posted for ep in group.endpoints] == [m * (t - 1)] * t
        assert [ep.recvs_posted for ep in group.endpoints] == [m * (t - 1)] * t


@pytest.mark.parametrize("seed", range(3))
def test_fuse_reduce_scatter_cross_schedule_bytes(seed):
    t = 4
    xs = _inputs(t, seed)
    w = randint_fill((3, 5), -2, 3, seed)
    outs = {}
    for kind in KINDS:
        sched = build_schedule(kind, t)
        res = RankGroup(t).run(lambda ep: fuse_reduce_scatter(ep, xs[ep.rank], lambda c, _: matmul(c, w), sched))
        outs[kind] = [o.tobytes() for o in res]
    assert len({tuple(v) for v in outs.values()}) == 1


@pytest.mark.parametrize("kind", KINDS)
def test_fuse_reduce_scatter_computes_own_slice_last(kind):
    t = 4
    order = [[] for _ in range(t)]
    sched = build_schedule(kind, t)

    def body(ep):
        def f(c, idx):
            order[ep.rank].append(idx)
            return c

        return fuse_reduce_scatter(ep, np.zeros((1, t, 1)), f, sched)

    RankGroup(t).run(body)
    for r in range(t):
        assert order[r][-1] == r
        assert sorted(order[r]) == list(range(t))


def test_fuse_reduce_scatter_rejects_wrong_size_schedule():
    sched = build_schedule("ring", 2)
    with pytest.raises(Exception, match="schedule built for 2"):
        RankGroup(4).run(lambda ep: fuse_reduce_scatter(ep, np.zeros((1, 4, 1)), ident, sched))


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_fuse_all_to_all_matches_reference(t):
    xs = _inputs(t, 7)
    w = randint_fill((3, 2), -2, 3, 1)

    def f(c, _):
        return matmul(c, w)

    group = RankGroup(t)
    got = group.run(lambda ep: fuse_all_to_all(ep, xs[ep.rank], f))
    want = ref_all_to_all(t, [split_seq(f(x, -1), t) for x in xs])
    for r in range(t):
        for k in range(t):
            np.testing.assert_array_equal(got[r][k], want[r][k])
    assert [ep.sends_posted for ep in group.endpoints] == [t - 1] * t
