import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kexmpc import gates
from kexmpc.abb import RingConfig, ShareArray, deal
from tests.conftest import run_peers

RING = RingConfig(64)


def mws_oracle(weights, indices, dummy_index, dummy_node, nodes):
    """Reference rule: minimal index among the argmax of positive weights."""
    weights = list(weights)
    if max(weights, default=0) <= 0:
        return dummy_index, (dummy_node,) * 3
    best = max(weights)
    pos = min(i for i, w in enumerate(weights) if w == best)
    return indices[pos], tuple(nodes[pos])


def shared(abb, comp):
    return ShareArray(*comp)


def run_on_shares(op, arrays, rng, seed=7):
    """Deal numpy arrays, run `op(abb, shares...)`, open, assert agreement."""
    dealt = [deal(a, RING, rng) for a in arrays]
    args = [tuple(d[p] for d in dealt) for p in range(3)]

    def fn(abb, peer, *comps):
        shares = [ShareArray(*c) for c in comps]
        out = op(abb, *shares)
        return abb.open(out)

    outs = run_peers(fn, n_args=args, seed=seed)
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[1], outs[2])
    return outs[0]


def test_gt_trivial_cases(rng):
    x = np.array([5, 7], dtype=np.uint64)
    y = np.array([3, 7], dtype=np.uint64)
    out = run_on_shares(lambda abb, a, b: gates.gt(abb, a, b, 8), [x, y], rng)
    assert list(out) == [1, 0]


@pytest.mark.parametrize("bits,bound", [(8, 60), (16, 16000), (64, 1 << 61)])
def test_gt_random_matches_plaintext(rng, bits, bound):
    n = 4000 if bits < 64 else 500
    x = rng.integers(0, bound, size=n).astype(np.uint64)
    y = rng.integers(0, bound, size=n).astype(np.uint64)
    out = run_on_shares(lambda abb, a, b: gates.gt(abb, a, b, bits), [x, y], rng)
    assert np.array_equal(out, (x > y).astype(np.uint64))


def test_gt_handles_equal_and_adjacent(rng):
    x = np.array([9, 9, 10, 0, 1], dtype=np.uint64)
    y = np.array([9, 10, 9, 0, 0], dtype=np.uint64)
    out = run_on_shares(lambda abb, a, b: gates.gt(abb, a, b, 6), [x, y], rng)
    assert list(out) == [0, 0, 1, 0, 1]


def test_eq_gate(rng):
    x = np.array([4, 5, 0, 31], dtype=np.uint64)
    y = np.array([4, 6, 1, 31], dtype=np.uint64)
    out = run_on_shares(lambda abb, a, b: gates.eq(abb, a, b, 8), [x, y], rng)
    assert list(out) == [1, 0, 0, 1]


def test_select_scalar_and_vector(rng):
    z = np.array([1, 0], dtype=np.uint64)
    x = np.array([9, 9], dtype=np.uint64)
    y = np.array([4, 4], dtype=np.uint64)
    out = run_on_shares(lambda abb, a, b, c: gates.select(abb, a, b, c), [z, x, y], rng)
    assert list(out) == [9, 4]

    # condition broadcast over a trailing axis, as used for node triples
    z = np.array([1, 0], dtype=np.uint64)
    x = np.arange(6, dtype=np.uint64).reshape(2, 3)
    y = (np.arange(6, dtype=np.uint64) + 10).reshape(2, 3)
    out = run_on_shares(lambda abb, a, b, c: gates.select(abb, a, b, c), [z, x, y], rng)
    assert np.array_equal(out, np.array([[0, 1, 2], [13, 14, 15]]))


def test_dot_product(rng):
    a = np.array([1, 0, 1], dtype=np.uint64)
    b = np.array([0, 0, 1], dtype=np.uint64)
    out = run_on_shares(gates.dot_product, [a, b], rng)
    assert out == 1
    zero = np.zeros(3, dtype=np.uint64)
    assert run_on_shares(gates.dot_product, [a, zero], rng) == 0


def test_dot_product_random(rng):
    a = rng.integers(0, 1000, size=(20, 50)).astype(np.uint64)
    b = rng.integers(0, 1000, size=(20, 50)).astype(np.uint64)
    out = run_on_shares(gates.dot_product, [a, b], rng)
    assert np.array_equal(out, (a * b).sum(axis=1))


def test_dot_product_length_mismatch(rng):
    a = np.zeros(3, dtype=np.uint64)
    b = np.zeros(4, dtype=np.uint64)
    with pytest.raises(ValueError):
        run_on_shares(gates.dot_product, [a, b], rng)


def test_demux_examples(rng):
    out = run_on_shares(lambda abb, x: gates.demux(abb, x, 4), [np.array([2], dtype=np.uint64)], rng)
    assert list(out[0]) == [0, 0, 1, 0]
    out = run_on_shares(lambda abb, x: gates.demux(abb, x, 3), [np.array([0], dtype=np.uint64)], rng)
    assert list(out[0]) == [1, 0, 0]


def test_demux_exhaustive_small_widths(rng):
    # exhaustive over every range up to 5 bits, including the dummy value n
    for n in list(range(1, 18)) + [31, 32]:
        xs = np.arange(n + 1, dtype=np.uint64)
        out = run_on_shares(lambda abb, x: gates.demux(abb, x, n), [xs], rng)
        expect = np.zeros((n + 1, n), dtype=np.uint64)
        expect[np.arange(n), np.arange(n)] = 1  # last row (x == n) stays zero
        assert np.array_equal(out, expect), f"n={n}"


def test_demux_batched_shape(rng):
    xs = np.array([[0, 3], [5, 6]], dtype=np.uint64)
    out = run_on_shares(lambda abb, x: gates.demux(abb, x, 6), [xs], rng)
    assert out.shape == (2, 2, 6)
    assert out[0, 0, 0] == 1 and out[0, 1, 3] == 1 and out[1, 0, 5] == 1
    assert out[1, 1].sum() == 0  # x == n: truncated away


def _run_mws(weights, indices, nodes, dummy_index, dummy_node, rng, weight_bits=16):
    w = np.asarray(weights, dtype=np.uint64)
    i = np.asarray(indices, dtype=np.uint64)
    nd = np.asarray(nodes, dtype=np.uint64)
    dealt = [deal(a, RING, rng) for a in (i, nd, w)]
    args = [tuple(d[p] for d in dealt) for p in range(3)]

    def fn(abb, peer, ci, cn, cw):
        idx, nds, wts = ShareArray(*ci), ShareArray(*cn), ShareArray(*cw)
        index, subset = gates.max_weight_set(
            abb, idx, nds, wts, dummy_index, dummy_node, weight_bits
        )
        return int(abb.open(index)), tuple(abb.open(subset))

    outs = run_peers(fn, n_args=args)
    assert outs[0] == outs[1] == outs[2]
    return outs[0]


def test_max_weight_set_tie_prefers_lower_index(rng):
    nodes = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    got = _run_mws([2, 5, 5, 0], [0, 1, 2, 3], nodes, 4, 9, rng)
    assert got == (1, (0, 1, 3))


def test_max_weight_set_all_zero_returns_dummy(rng):
    nodes = [(i, i + 1, 6) for i in range(5)]
    got = _run_mws([0] * 5, list(range(5)), nodes, 35, 6, rng)
    assert got == (35, (6, 6, 6))


def test_max_weight_set_single_subset(rng):
    got = _run_mws([7], [0], [(2, 4, 6)], 1, 9, rng)
    assert got == (0, (2, 4, 6))
    got = _run_mws([0], [0], [(2, 4, 6)], 1, 9, rng)
    assert got == (1, (9, 9, 9))


def test_max_weight_set_every_length_matches_oracle(rng):
    for n in range(1, 65):
        weights = rng.integers(0, 4, size=n).tolist()
        indices = list(range(n))
        nodes = [(j % 7, (j + 1) % 7, (j + 2) % 7) for j in range(n)]
        expect = mws_oracle(weights, indices, n, 7, nodes)
        got = _run_mws(weights, indices, nodes, n, 7, rng, weight_bits=6)
        assert got == expect, f"n={n} weights={weights}"


@given(st.lists(st.integers(min_value=0, max_value=9), min_size=1, max_size=40))
@settings(max_examples=60, deadline=None)
def test_mws_oracle_is_min_index_argmax(weights):
    # the reference rule itself: first positive maximum, else dummy
    n = len(weights)
    nodes = [(j, j + 1, j + 2) for j in range(n)]
    idx, subset = mws_oracle(weights, list(range(n)), n, 99, nodes)
    if max(weights) == 0:
        assert idx == n and subset == (99, 99, 99)
    else:
        assert weights[idx] == max(weights)
        assert all(w < weights[idx] for w in weights[:idx])


def test_shuffle_identity_mode_is_identity(rng):
    m = rng.integers(0, 100, size=(5, 5)).astype(np.uint64)
    w = rng.integers(0, 100, size=(5, 5)).astype(np.uint64)
    dealt = [deal(a, RING, rng) for a in (m, w)]
    args = [tuple(d[p] for d in dealt) for p in range(3)]

    def fn(abb, peer, cm, cw):
        mats, handle = gates.shuffle_nodes(
            abb, [ShareArray(*cm), ShareArray(*cw)], mode="identity"
        )
        return abb.open(mats[0]), abb.open(mats[1])

    outs = run_peers(fn, n_args=args)
    assert np.array_equal(outs[0][0], m)
    assert np.array_equal(outs[0][1], w)


def test_shuffle_seeded_mode_is_known_relabeling(rng):
    n = 7
    m = rng.integers(0, 50, size=(n, n)).astype(np.uint64)
    dealt = deal(m, RING, rng)

    def fn(abb, peer, cm):
        mats, handle = gates.shuffle_nodes(abb, [ShareArray(*cm)], mode="seeded", seed=424)
        return abb.open(mats[0])

    outs = run_peers(fn, n_args=[(d,) for d in dealt])
    perm = gates.composed_permutation(gates.seeded_pass_perms(424, n))
    shuffled = outs[0]
    for i in range(n):
        for j in range(n):
            assert shuffled[perm[i], perm[j]] == m[i, j]
    # multiset of entries preserved
    assert sorted(shuffled.ravel()) == sorted(m.ravel())


@pytest.mark.parametrize("mode,seed", [("random", None), ("seeded", 5), ("identity", None)])
def test_rev_shuffle_round_trip(rng, mode, seed):
    n = 6
    m = rng.integers(0, 99, size=(n, n)).astype(np.uint64)
    w = rng.integers(0, 99, size=(n, n)).astype(np.uint64)
    dealt = [deal(a, RING, rng) for a in (m, w)]
    args = [tuple(d[p] for d in dealt) for p in range(3)]

    def fn(abb, peer, cm, cw):
        mats, handle = gates.shuffle_nodes(
            abb, [ShareArray(*cm), ShareArray(*cw)], mode=mode, seed=seed
        )
        back = gates.rev_shuffle(abb, mats[0], handle)
        back2 = gates.rev_shuffle(abb, mats[1], handle)
        return abb.open(back), abb.open(back2)

    outs = run_peers(fn, n_args=args)
    assert np.array_equal(outs[0][0], m)
    assert np.array_equal(outs[0][1], w)


def test_rev_shuffle_many_seeds(rng):
    n = 5
    for trial in range(30):
        m = rng.integers(0, 9, size=(n, n)).astype(np.uint64)
        dealt = deal(m, RING, rng)

        def fn(abb, peer, cm):
            mats, handle = gates.shuffle_nodes(abb, [ShareArray(*cm)], mode="random")
            return abb.open(gates.rev_shuffle(abb, mats[0], handle))

        outs = run_peers(fn, n_args=[(d,) for d in dealt], seed=1000 + trial)
        assert np.array_equal(outs[0], m)


def test_random_shuffle_hides_nothing_it_shouldnt(rng):
    # entries survive as a multiset even under the random mode
    n = 6
    m = np.arange(n * n, dtype=np.uint64).reshape(n, n)
    dealt = deal(m, RING, rng)

    def fn(abb, peer, cm):
        mats, _ = gates.shuffle_nodes(abb, [ShareArray(*cm)], mode="random")
        return abb.open(mats[0])

    outs = run_peers(fn, n_args=[(d,) for d in dealt], seed=31)
    assert sorted(outs[0].ravel()) == sorted(m.ravel())


def test_gate_transcripts_independent_of_secrets(rng):
    def transcript_for(x, y):
        dealt = [deal(a, RING, rng) for a in (x, y)]
        args = [tuple(d[p] for d in dealt) for p in range(3)]

        def fn(abb, peer, cx, cy):
            a, b = ShareArray(*cx), ShareArray(*cy)
            gates.gt(abb, a, b, 12)
            gates.demux(abb, a[:4], 9)
            abb.mul(a, b)
            return tuple(abb.endpoint.transcript.entries)

        return tuple(run_peers(fn, n_args=args))

    n = 16
    t1 = transcript_for(
        np.zeros(n, dtype=np.uint64), np.zeros(n, dtype=np.uint64)
    )
    t2 = transcript_for(
        rng.integers(0, 500, size=n).astype(np.uint64),
        rng.integers(0, 500, size=n).astype(np.uint64),
    )
    assert t1 == t2
