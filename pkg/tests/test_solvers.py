import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kexmpc import solvers
from kexmpc.solvers import (
    CyclePacking,
    PlainGraph,
    SizeLimitError,
    build_subsets,
    enumerate_best_weight,
    exact_solve,
    exact_solve_milp,
    find_candidates,
    greedy_solve,
    load_graph,
    pair_rank,
    quality,
    save_graph,
    solution_vectors,
    subset_count,
    triple_rank,
    validate,
)


def random_graph(rng, n, density=0.4, max_w=1):
    adj = (rng.random((n, n)) < density).astype(np.int8)
    np.fill_diagonal(adj, 0)
    w = rng.integers(1, max_w + 1, size=(n, n)) * adj
    return PlainGraph(n, adj, w)


def naive_greedy(g: PlainGraph, kappa: int) -> CyclePacking:
    """Independent mirror of the greedy rule, written over the full subset list."""
    subsets = build_subsets(g.n, kappa)
    weights = []
    cycles = []
    for u, v, w in subsets:
        if w == g.n:
            ok = g.adj[u, v] and g.adj[v, u]
            weights.append(int(g.weights[u, v] + g.weights[v, u]) if ok else 0)
            cycles.append((u, v))
        else:
            first = g.adj[u, v] and g.adj[v, w] and g.adj[w, u]
            second = g.adj[u, w] and g.adj[w, v] and g.adj[v, u]
            w1 = int(g.weights[u, v] + g.weights[v, w] + g.weights[w, u]) if first else 0
            w2 = int(g.weights[u, w] + g.weights[w, v] + g.weights[v, u]) if second else 0
            if w1 >= w2:
                weights.append(w1)
                cycles.append((u, v, w))
            else:
                weights.append(w2)
                cycles.append((u, w, v))
    chosen = []
    total = 0
    weights = list(weights)
    while max(weights, default=0) > 0:
        i = weights.index(max(weights))
        chosen.append(i)
        total += weights[i]
        hit = set(subsets[i]) - {g.n}
        for j, s in enumerate(subsets):
            if set(s) & hit:
                weights[j] = 0
    return CyclePacking([cycles[i] for i in sorted(chosen)], total)


# -- subset enumeration -------------------------------------------------------


@pytest.mark.parametrize("n,kappa,expect", [(4, 3, 10), (5, 2, 10), (2, 3, 1), (2, 2, 1)])
def test_subset_counts_examples(n, kappa, expect):
    assert len(build_subsets(n, kappa)) == expect
    assert subset_count(n, kappa) == expect


def test_subsets_n2_is_single_padded_pair():
    assert build_subsets(2, 3) == [(0, 1, 2)]


def test_subsets_kappa2_all_padded():
    subs = build_subsets(5, 2)
    assert all(w == 5 for _, _, w in subs)
    assert subs == sorted(subs)


def test_subset_ordering_is_blockwise_lexicographic():
    subs = build_subsets(6, 3)
    triples = [s for s in subs if s[2] != 6]
    pairs = [s for s in subs if s[2] == 6]
    assert subs == triples + pairs
    assert triples == sorted(triples)
    assert pairs == sorted(pairs)


@given(st.integers(min_value=2, max_value=30))
@settings(max_examples=29, deadline=None)
def test_rank_formulas_match_enumeration(n):
    subs = build_subsets(n, 3)
    n3 = n * (n - 1) * (n - 2) // 6
    for rank, (u, v, w) in enumerate(subs):
        if w == n:
            assert n3 + pair_rank(n, u, v) == rank
        else:
            assert triple_rank(n, u, v, w) == rank


# -- greedy --------------------------------------------------------------------


def test_greedy_prefers_three_cycle_on_complete_unit_graph():
    g = PlainGraph(3, np.ones((3, 3)), np.ones((3, 3), dtype=np.int64))
    packing = greedy_solve(g)
    assert packing.cycles == [(0, 1, 2)]
    assert packing.total_weight == 3


def test_greedy_two_disjoint_crossovers():
    g = PlainGraph.from_edges(4, [(0, 1, 1), (1, 0, 1), (2, 3, 1), (3, 2, 1)])
    packing = greedy_solve(g)
    assert packing.cycles == [(0, 1), (2, 3)]
    assert packing.total_weight == 4


def test_greedy_empty_graph():
    g = PlainGraph(5, np.zeros((5, 5)), np.zeros((5, 5), dtype=np.int64))
    packing = greedy_solve(g)
    assert packing.cycles == [] and packing.total_weight == 0


def test_greedy_matches_naive_reference(rng):
    for kappa in (2, 3):
        for _ in range(120):
            n = int(rng.integers(2, 9))
            g = random_graph(rng, n, density=float(rng.uniform(0.1, 0.9)), max_w=4)
            fast = greedy_solve(g, kappa)
            slow = naive_greedy(g, kappa)
            assert fast.cycles == slow.cycles
            assert fast.total_weight == slow.total_weight


def test_greedy_with_relabel_is_greedy_on_relabeled_graph(rng):
    g = random_graph(rng, 7, 0.5, max_w=3)
    perm = rng.permutation(7)
    packing = greedy_solve(g, 3, relabel=perm)
    assert validate(g, packing).ok
    inv = np.argsort(perm)
    relabeled = PlainGraph(7, g.adj[np.ix_(inv, inv)], g.weights[np.ix_(inv, inv)])
    direct = greedy_solve(relabeled, 3)
    mapped = sorted(tuple(int(inv[v]) for v in c) for c in direct.cycles)
    assert sorted(packing.cycles) == mapped
    assert packing.total_weight == direct.total_weight


def test_greedy_is_deterministic(rng):
    g = random_graph(rng, 8, 0.5, max_w=5)
    a = greedy_solve(g, 3)
    b = greedy_solve(g, 3)
    assert a.cycles == b.cycles and a.total_weight == b.total_weight


def test_solution_vectors_three_cycle():
    packing = CyclePacking([(0, 1, 2)], 3)
    d, r = solution_vectors(packing, 3)
    assert list(d) == [3, 1, 2]
    assert list(r) == [2, 3, 1]


def test_solution_vectors_two_crossovers():
    packing = CyclePacking([(0, 1), (2, 3)], 4)
    d, r = solution_vectors(packing, 4)
    assert list(d) == [2, 1, 4, 3]
    assert list(r) == [2, 1, 4, 3]


def test_solution_vectors_unmatched_zero():
    d, r = solution_vectors(CyclePacking([], 0), 3)
    assert list(d) == [0, 0, 0] and list(r) == [0, 0, 0]


# -- exact solvers ---------------------------------------------------------------


def test_exact_prefers_two_crossovers_over_triangle():
    g = PlainGraph.from_edges(
        4, [(0, 1, 1), (1, 0, 1), (2, 3, 1), (3, 2, 1), (0, 2, 1), (3, 0, 1)]
    )
    packing = exact_solve(g)
    assert packing.total_weight == 4
    assert sorted(packing.cycles) == [(0, 1), (2, 3)]
    # the greedy trap: the triangle {0,2,3} is first in subset order
    assert greedy_solve(g).total_weight == 3
    assert quality(g, 3).ratio == 0.75


def test_exact_empty_graph():
    g = PlainGraph(4, np.zeros((4, 4)), np.zeros((4, 4), dtype=np.int64))
    assert exact_solve(g).total_weight == 0


def test_exact_dominates_greedy(rng):
    for _ in range(100):
        n = int(rng.integers(2, 11))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.8)), max_w=6)
        assert exact_solve(g).total_weight >= greedy_solve(g).total_weight


def test_exact_matches_enumeration(rng):
    for kappa in (2, 3):
        for _ in range(120):
            n = int(rng.integers(2, 9))
            g = random_graph(rng, n, float(rng.uniform(0.1, 0.9)), max_w=5)
            assert exact_solve(g, kappa).total_weight == enumerate_best_weight(g, kappa)


def test_exact_size_limit():
    g = PlainGraph(23, np.zeros((23, 23)), np.zeros((23, 23), dtype=np.int64))
    with pytest.raises(SizeLimitError):
        exact_solve(g)


def test_milp_agrees_with_dp(rng):
    for kappa in (2, 3):
        for _ in range(40):
            n = int(rng.integers(3, 13))
            g = random_graph(rng, n, float(rng.uniform(0.15, 0.7)), max_w=4)
            assert exact_solve_milp(g, kappa).total_weight == exact_solve(g, kappa).total_weight


def test_milp_packing_is_valid(rng):
    g = random_graph(rng, 30, 0.25, max_w=3)
    packing = exact_solve_milp(g, 3)
    assert validate(g, packing).ok


def test_approximation_ratios(rng):
    for _ in range(150):
        n = int(rng.integers(3, 12))
        g = random_graph(rng, n, float(rng.uniform(0.1, 0.8)), max_w=8)
        for kappa, factor in ((3, 3), (2, 2)):
            wg = greedy_solve(g, kappa).total_weight
            we = exact_solve(g, kappa).total_weight
            assert factor * wg >= we


# -- validator --------------------------------------------------------------------


def test_validator_accepts_greedy_outputs(rng):
    for _ in range(200):
        n = int(rng.integers(2, 10))
        g = random_graph(rng, n, float(rng.uniform(0.05, 0.9)), max_w=4)
        assert validate(g, greedy_solve(g)).ok


def test_validator_rejects_overlap():
    g = PlainGraph.from_edges(4, [(0, 1, 1), (1, 0, 1), (0, 2, 1), (2, 0, 1)])
    bad = CyclePacking([(0, 1), (0, 2)], 4)
    report = validate(g, bad)
    assert not report.ok and report.violation == "disjointness"


def test_validator_rejects_missing_edge():
    g = PlainGraph.from_edges(3, [(0, 1, 1)])
    report = validate(g, CyclePacking([(0, 1)], 1))
    assert not report.ok and report.violation == "edge"


def test_validator_rejects_wrong_weight():
    g = PlainGraph.from_edges(2, [(0, 1, 1), (1, 0, 1)])
    report = validate(g, CyclePacking([(0, 1)], 5))
    assert not report.ok and report.violation == "weight"


def test_validator_rejects_long_cycle():
    g = PlainGraph.from_edges(3, [(0, 1, 1), (1, 2, 1), (2, 0, 1)])
    report = validate(g, CyclePacking([(0, 1, 2)], 3), kappa=2)
    assert not report.ok and report.violation == "length"


# -- quality and io ------------------------------------------------------------------


def test_quality_perfect_when_identical():
    g = PlainGraph.from_edges(2, [(0, 1, 1), (1, 0, 1)])
    assert quality(g).ratio == 1.0


def test_quality_one_when_exact_matches_nothing():
    g = PlainGraph(3, np.zeros((3, 3)), np.zeros((3, 3), dtype=np.int64))
    assert quality(g).ratio == 1.0


def test_graph_io_round_trip(tmp_path, rng):
    g = random_graph(rng, 6, 0.5, max_w=9)
    path = tmp_path / "g.txt"
    save_graph(path, g)
    g2 = load_graph(path)
    assert g2.n == 6
    assert np.array_equal(g.adj, g2.adj)
    assert np.array_equal(g.weights, g2.weights)


def test_graph_io_rejects_garbage(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3\n0 1\n")
    with pytest.raises(ValueError, match="line 2"):
        load_graph(path)


def test_candidates_cover_all_positive_subsets(rng):
    g = random_graph(rng, 7, 0.5)
    cand = find_candidates(g, 3)
    subs = build_subsets(7, 3)
    got = {tuple(cand.nodes[i]): int(cand.weights[i]) for i in range(len(cand.ranks))}
    for u, v, w in subs:
        if w == 7:
            ok = g.adj[u, v] and g.adj[v, u]
            wsum = int(g.weights[u, v] + g.weights[v, u]) if ok else 0
            if wsum > 0:
                assert got[(u, v)] == wsum
            else:
                assert (u, v) not in got
    assert list(cand.ranks) == sorted(cand.ranks)
    # ranks point back into the canonical subset list
    for i in range(len(cand.ranks)):
        canonical = subs[cand.ranks[i]]
        assert tuple(v for v in canonical if v != 7) == tuple(cand.nodes[i])
