"""Plaintext reference algorithms for the kidney exchange problem.

Contents:
  * the greedy approximation (the exact algorithm the secure engine runs,
    so outputs can be compared bit for bit),
  * an exact maximum-weight disjoint-cycle-packing solver: a bitmask dynamic
    program for small instances and a cycle-formulation ILP (HiGHS) for the
    pool sizes the dynamic simulator produces,
  * a brute-force packing enumerator used as an independent check of the DP,
  * a solution validator and the approximation-quality measurement.

Cycles of weight zero are ignored throughout: they cannot improve the
weight objective and the greedy loop never selects them.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger("kexmpc.solvers")

DP_NODE_LIMIT = 22
ENUM_NODE_LIMIT = 10


class SizeLimitError(Exception):
    pass


@dataclass
class PlainGraph:
    """Compatibility graph: adjacency bits and non-negative integer weights."""

    n: int
    adj: np.ndarray  # (n, n) 0/1, zero diagonal
    weights: np.ndarray  # (n, n) int64

    def __post_init__(self):
        self.adj = np.asarray(self.adj, dtype=np.int8)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        if self.adj.shape != (self.n, self.n) or self.weights.shape != (self.n, self.n):
            raise ValueError("matrix shapes do not match n")
        np.fill_diagonal(self.adj, 0)

    @classmethod
    def from_edges(cls, n: int, edges: list[tuple[int, int, int]]) -> "PlainGraph":
        adj = np.zeros((n, n), dtype=np.int8)
        w = np.zeros((n, n), dtype=np.int64)
        for u, v, weight in edges:
            adj[u, v] = 1
            w[u, v] = weight
        return cls(n, adj, w)

    def edge_list(self) -> list[tuple[int, int, int]]:
        us, vs = np.nonzero(self.adj)
        return [(int(u), int(v), int(self.weights[u, v])) for u, v in zip(us, vs)]


@dataclass
class CyclePacking:
    """Vertex-disjoint exchange cycles; each tuple is donation order."""

    cycles: list[tuple[int, ...]]
    total_weight: int

    def matched_pairs(self) -> int:
        return sum(len(c) for c in self.cycles)


@dataclass
class ValidationReport:
    ok: bool
    violation: str | None = None
    detail: str = ""


# -- public subset ordering --------------------------------------------------


def build_subsets(n: int, kappa: int = 3) -> list[tuple[int, int, int]]:
    """All node subsets that could host a cycle, in canonical order.

    Size-3 subsets first (kappa=3 only), then size-2, each block ascending
    lexicographically; 2-subsets carry the dummy node `n` as third entry.
    """
    if kappa not in (2, 3):
        raise ValueError("kappa must be 2 or 3")
    out: list[tuple[int, int, int]] = []
    if kappa == 3:
        out.extend(itertools.combinations(range(n), 3))
    out.extend((u, v, n) for u, v in itertools.combinations(range(n), 2))
    return out


def subset_count(n: int, kappa: int = 3) -> int:
    pairs = n * (n - 1) // 2
    if kappa == 2:
        return pairs
    return n * (n - 1) * (n - 2) // 6 + pairs


def triple_rank(n, u, v, w):
    """Position of the sorted triple (u < v < w) in the size-3 block.

    Closed form (hockey-stick sums), so it vectorizes over numpy arrays.
    """
    c3 = lambda x: x * (x - 1) * (x - 2) // 6  # noqa: E731
    c2 = lambda x: x * (x - 1) // 2  # noqa: E731
    before_u = c3(n) - c3(n - u)
    within_u = c2(n - u - 1) - c2(n - v)
    return before_u + within_u + (w - v - 1)


def pair_rank(n, u, v):
    """Position of (u < v) in the size-2 block; vectorizes over arrays."""
    return u * n - u * (u + 1) // 2 + (v - u - 1)


# -- cycle candidates ---------------------------------------------------------


@dataclass
class CycleCandidates:
    """Executable cycles of positive weight, in canonical subset order.

    `nodes[i]` keeps the subset's sorted node tuple (dummy-free for pairs);
    `first_cycle[i]` is True when the (u, v, w) orientation was selected for
    a triple, mirroring the >= orientation rule of the secure evaluation.
    """

    n: int
    ranks: np.ndarray  # canonical subset rank, strictly increasing
    nodes: list[tuple[int, ...]]
    weights: np.ndarray
    first_cycle: np.ndarray  # bool; True for pairs as well

    def cycle_for(self, i: int) -> tuple[int, ...]:
        ns = self.nodes[i]
        if len(ns) == 2:
            return ns
        u, v, w = ns
        return (u, v, w) if self.first_cycle[i] else (u, w, v)


def find_candidates(g: PlainGraph, kappa: int = 3) -> CycleCandidates:
    """Evaluate every subset's best executable cycle, keeping positive ones."""
    n = g.n
    adj = g.adj.astype(bool)
    wts = g.weights
    ranks: list[int] = []
    nodes: list[tuple[int, ...]] = []
    weights: list[int] = []
    first: list[bool] = []
    if kappa == 3 and n >= 3:
        # fwd[u,v,w] = cycle (u,v,w); rev[u,v,w] = cycle (u,w,v); u<v<w filter
        fwd = adj[:, :, None] & adj[None, :, :] & adj.T[:, None, :]
        rev = adj.T[:, :, None] & adj.T[None, :, :] & adj[:, None, :]
        cand = np.argwhere(fwd | rev)
        cand = cand[(cand[:, 0] < cand[:, 1]) & (cand[:, 1] < cand[:, 2])]
        if len(cand):
            u, v, w = cand[:, 0], cand[:, 1], cand[:, 2]
            w_fwd = np.where(fwd[u, v, w], wts[u, v] + wts[v, w] + wts[w, u], 0)
            w_rev = np.where(rev[u, v, w], wts[u, w] + wts[w, v] + wts[v, u], 0)
            use_first = w_fwd >= w_rev
            best = np.where(use_first, w_fwd, w_rev)
            keep = best > 0
            nodes_3 = cand[keep]
            order = np.arange(len(nodes_3))
            for idx in order:
                a, b, c = map(int, nodes_3[idx])
                ranks.append(triple_rank(n, a, b, c))
                nodes.append((a, b, c))
            weights.extend(int(x) for x in best[keep])
            first.extend(bool(x) for x in use_first[keep])
    two = adj & adj.T
    # pair ranks sit past the triple block in the canonical order
    pair_offset = n * (n - 1) * (n - 2) // 6 if kappa == 3 else 0
    us, vs = np.nonzero(np.triu(two, k=1))
    for u, v in zip(us, vs):
        wsum = int(wts[u, v] + wts[v, u])
        if wsum > 0:
            ranks.append(pair_offset + pair_rank(n, int(u), int(v)))
            nodes.append((int(u), int(v)))
            weights.append(wsum)
            first.append(True)
    ranks_arr = np.asarray(ranks, dtype=np.int64)
    order = np.argsort(ranks_arr, kind="stable")
    return CycleCandidates(
        n=n,
        ranks=ranks_arr[order],
        nodes=[nodes[i] for i in order],
        weights=np.asarray(weights, dtype=np.int64)[order],
        first_cycle=np.asarray(first, dtype=bool)[order],
    )


# -- greedy approximation ------------------------------------------------------


def greedy_from_candidates(
    cand: CycleCandidates, subset_order: np.ndarray | None = None
) -> CyclePacking:
    """Repeatedly take the first maximum-weight subset, dropping overlaps."""
    m = len(cand.ranks)
    if m == 0:
        return CyclePacking([], 0)
    weights = cand.weights.astype(np.int64).copy()
    if subset_order is not None:
        # tie-break follows a caller-supplied public reordering of subsets
        pos = np.argsort(np.asarray(subset_order)[cand.ranks], kind="stable")
        weights = weights[pos]
        lookup = pos
    else:
        lookup = np.arange(m)
    nodes_arr = np.full((m, 3), cand.n, dtype=np.int64)
    for row, ns in enumerate(cand.nodes):
        nodes_arr[row, : len(ns)] = ns
    nodes_arr = nodes_arr[lookup]
    chosen: list[int] = []
    total = 0
    while True:
        best_pos = int(np.argmax(weights))  # argmax returns the first maximum
        if weights[best_pos] <= 0:
            break
        total += int(weights[best_pos])
        chosen.append(int(lookup[best_pos]))
        hit = np.isin(nodes_arr, nodes_arr[best_pos][nodes_arr[best_pos] < cand.n])
        weights[hit.any(axis=1)] = 0
    cycles = [cand.cycle_for(i) for i in sorted(chosen)]
    return CyclePacking(cycles, total)


def greedy_solve(
    g: PlainGraph,
    kappa: int = 3,
    relabel: np.ndarray | None = None,
    subset_order: np.ndarray | None = None,
) -> CyclePacking:
    """Greedy cycle packing with the first-maximum tie-break.

    `relabel` applies a node permutation first (node i becomes relabel[i]),
    matching the unbiasing shuffle of the secure engine; results come back
    in original labels.  Deterministic given (graph, relabel, subset_order).
    """
    if relabel is not None:
        inv = np.argsort(relabel)
        g = PlainGraph(g.n, g.adj[np.ix_(inv, inv)], g.weights[np.ix_(inv, inv)])
    packing = greedy_from_candidates(find_candidates(g, kappa), subset_order)
    if relabel is not None:
        inv = np.argsort(relabel)
        packing = CyclePacking(
            [tuple(int(inv[v]) for v in c) for c in packing.cycles],
            packing.total_weight,
        )
    return packing


def solution_vectors(packing: CyclePacking, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair donor and recipient indices, 1-based, 0 = unmatched.

    donors[i] = j+1 when the donor of pair j gives to the patient of pair i;
    recipients[i] = j+1 when the donor of pair i gives to the patient of j.
    """
    donors = np.zeros(n, dtype=np.int64)
    recipients = np.zeros(n, dtype=np.int64)
    for cycle in packing.cycles:
        for a, b in zip(cycle, cycle[1:] + cycle[:1]):
            recipients[a] = b + 1
            donors[b] = a + 1
    return donors, recipients


# -- exact solvers -------------------------------------------------------------


def _positive_cycles(g: PlainGraph, kappa: int) -> list[tuple[int, tuple[int, ...], int]]:
    """(node_mask, cycle, weight) for each executable positive-weight subset."""
    cand = find_candidates(g, kappa)
    out = []
    for i in range(len(cand.ranks)):
        cyc = cand.cycle_for(i)
        mask = 0
        for v in cyc:
            mask |= 1 << v
        out.append((mask, cyc, int(cand.weights[i])))
    return out


def _dp_pack(cycles: list[tuple[int, tuple[int, ...], int]], n: int) -> CyclePacking:
    """Bitmask DP over n nodes: the lowest undecided node is either left
    unmatched or covered by one of its cycles."""
    by_lowest: dict[int, list[tuple[int, tuple[int, ...], int]]] = {
        v: [] for v in range(n)
    }
    for mask, cyc, w in cycles:
        by_lowest[min(cyc)].append((mask, cyc, w))
    memo: dict[int, tuple[int, tuple]] = {0: (0, ())}

    def solve(mask: int) -> tuple[int, tuple]:
        hit = memo.get(mask)
        if hit is not None:
            return hit
        v = (mask & -mask).bit_length() - 1
        best = solve(mask & (mask - 1))
        for cmask, cyc, w in by_lowest[v]:
            if cmask & mask == cmask:
                sub_w, sub_c = solve(mask & ~cmask)
                if sub_w + w > best[0]:
                    best = (sub_w + w, sub_c + (cyc,))
        memo[mask] = best
        return best

    weight, chosen = solve((1 << n) - 1)
    return CyclePacking(sorted(chosen), weight)


def exact_solve(g: PlainGraph, kappa: int = 3) -> CyclePacking:
    """Maximum-weight disjoint cycle packing by bitmask dynamic programming.

    Hard cap n <= 22; the dynamic simulator uses `pack_cycles_exact`, which
    falls back to the ILP beyond DP range.
    """
    if g.n > DP_NODE_LIMIT:
        raise SizeLimitError(f"exact solver handles at most {DP_NODE_LIMIT} nodes")
    return _dp_pack(_positive_cycles(g, kappa), g.n)


def pack_cycles_exact(cycles: list[tuple[int, tuple[int, ...], int]], n: int) -> CyclePacking:
    """Exact packing of an explicit cycle list over n nodes.

    Only nodes that actually appear in a cycle matter, so the instance is
    first compressed; small residual problems go to the DP, large ones to
    the ILP.
    """
    if not cycles:
        return CyclePacking([], 0)
    used = sorted({v for _, cyc, _ in cycles for v in cyc})
    if len(used) <= DP_NODE_LIMIT:
        remap = {v: i for i, v in enumerate(used)}
        small = []
        for _, cyc, w in cycles:
            mask = 0
            for v in cyc:
                mask |= 1 << remap[v]
            small.append((mask, tuple(remap[v] for v in cyc), w))
        packed = _dp_pack(small, len(used))
        return CyclePacking(
            sorted(tuple(used[v] for v in cyc) for cyc in packed.cycles),
            packed.total_weight,
        )
    return _milp_pack(cycles, n)


def enumerate_best_weight(g: PlainGraph, kappa: int = 3) -> int:
    """Exhaustive maximum over ALL disjoint cycle packings (independent check)."""
    if g.n > ENUM_NODE_LIMIT:
        raise SizeLimitError(f"enumeration handles at most {ENUM_NODE_LIMIT} nodes")
    cycles = []
    for size in (2, 3)[: kappa - 1]:
        for combo in itertools.permutations(range(g.n), size):
            if combo[0] != min(combo):  # one rotation per cycle
                continue
            edges = list(zip(combo, combo[1:] + combo[:1]))
            if all(g.adj[a, b] for a, b in edges):
                w = sum(int(g.weights[a, b]) for a, b in edges)
                if w > 0:
                    mask = 0
                    for v in combo:
                        mask |= 1 << v
                    cycles.append((mask, w))

    def best(i: int, used: int) -> int:
        if i == len(cycles):
            return 0
        skip = best(i + 1, used)
        mask, w = cycles[i]
        if mask & used:
            return skip
        return max(skip, w + best(i + 1, used | mask))

    return best(0, 0)


def _milp_pack(cycles: list[tuple[int, tuple[int, ...], int]], n: int) -> CyclePacking:
    """Cycle-formulation ILP (HiGHS): one binary per cycle, <=1 per node."""
    from scipy import optimize, sparse

    m = len(cycles)
    rows, cols = [], []
    for j, (_, cyc, _) in enumerate(cycles):
        for v in cyc:
            rows.append(v)
            cols.append(j)
    a_ub = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, m))
    res = optimize.milp(
        c=-np.array([w for _, _, w in cycles], dtype=np.float64),
        constraints=optimize.LinearConstraint(a_ub, -np.inf, 1),
        integrality=np.ones(m),
        bounds=optimize.Bounds(0, 1),
    )
    if res.status != 0:
        raise RuntimeError(f"ILP solver failed: {res.message}")
    chosen = [cycles[j] for j in np.nonzero(res.x > 0.5)[0]]
    return CyclePacking(
        sorted(cyc for _, cyc, _ in chosen), sum(w for _, _, w in chosen)
    )


def exact_solve_milp(g: PlainGraph, kappa: int = 3) -> CyclePacking:
    """Exact packing via the ILP; agrees with the DP wherever both apply."""
    cycles = _positive_cycles(g, kappa)
    if not cycles:
        return CyclePacking([], 0)
    return _milp_pack(cycles, g.n)


# -- validation and quality ------------------------------------------------------


def validate(g: PlainGraph, packing: CyclePacking, kappa: int = 3) -> ValidationReport:
    """Check disjointness, edge existence, cycle lengths, and the weight sum."""
    seen: set[int] = set()
    total = 0
    for cyc in packing.cycles:
        if not 2 <= len(cyc) <= kappa:
            return ValidationReport(False, "length", f"cycle {cyc} has bad size")
        if len(set(cyc)) != len(cyc):
            return ValidationReport(False, "disjointness", f"cycle {cyc} repeats a node")
        for v in cyc:
            if v in seen:
                return ValidationReport(False, "disjointness", f"node {v} reused")
            if not 0 <= v < g.n:
                return ValidationReport(False, "node-range", f"node {v} out of range")
            seen.add(v)
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            if not g.adj[a, b]:
                return ValidationReport(False, "edge", f"missing edge ({a}, {b})")
            total += int(g.weights[a, b])
    if total != packing.total_weight:
        return ValidationReport(
            False, "weight", f"claimed {packing.total_weight}, edges sum to {total}"
        )
    return ValidationReport(True)


@dataclass
class QualityResult:
    ratio: float
    matched_greedy: int
    matched_exact: int


def quality(
    g: PlainGraph, kappa: int = 3, relabel: np.ndarray | None = None
) -> QualityResult:
    """Fraction of pairs the greedy matches relative to the exact optimum."""
    greedy = greedy_solve(g, kappa, relabel=relabel)
    exact = exact_solve(g, kappa)
    mg, me = greedy.matched_pairs(), exact.matched_pairs()
    return QualityResult(1.0 if me == 0 else mg / me, mg, me)


# -- graph text format ------------------------------------------------------------


def save_graph(path, g: PlainGraph) -> None:
    with open(path, "w") as fh:
        fh.write(f"{g.n}\n")
        for u, v, w in g.edge_list():
            fh.write(f"{u} {v} {w}\n")


def load_graph(path) -> PlainGraph:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty graph file")
    n = int(lines[0])
    edges = []
    for ln_no, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"line {ln_no}: expected 'u v weight'")
        u, v, w = (int(p) for p in parts)
        if not (0 <= u < n and 0 <= v < n) or u == v or w < 0:
            raise ValueError(f"line {ln_no}: bad edge ({u}, {v}, {w})")
        edges.append((u, v, w))
    return PlainGraph.from_edges(n, edges)
