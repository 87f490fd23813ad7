"""The four-phase secure engine that approximates the exchange problem.

Construction: build the secret compatibility graph from shared quotes and
relabel its nodes by a secret permutation (unbiasing).  Evaluation: give
every public node subset the weight of its best executable cycle.
Approximation: exactly floor(N/2) rounds of "take the first maximum-weight
subset, zero out everything it touches" - dummy rounds included, so the
communication pattern never depends on the data.  Resolution: turn the
chosen subsets into a donation matrix, undo the relabeling, and derive each
pair's donor and recipient indices (1-based, 0 = unmatched).

With the identity shuffle the opened output equals the plaintext greedy
solver bit for bit; that equivalence is the core correctness oracle.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from . import compat, gates
from .abb import AbbSession, RingConfig, ShareArray, U64, reconstruct
from .compat import PrioPolicy, SharedQuotes
from .solvers import build_subsets
from .transport import InProcessNetwork, Transcript

logger = logging.getLogger("kexmpc.protocol")


@dataclass(frozen=True)
class ProtocolConfig:
    n_pairs: int
    kappa: int = 3
    policy: PrioPolicy = field(default_factory=PrioPolicy.uniform)
    shuffle_mode: str = "random"  # random | seeded | identity
    shuffle_seed: int | None = None
    session_seed: int | None = None
    ring: RingConfig = field(default_factory=RingConfig)
    antigen_space: int = compat.DEFAULT_ANTIGEN_SPACE
    preshuffle_subsets: bool = False  # optional public reshuffle of the subset order
    subset_order_seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ValueError("need at least two pairs")
        if self.kappa not in (2, 3):
            raise ValueError("kappa must be 2 or 3")
        if self.shuffle_mode not in ("random", "seeded", "identity"):
            raise ValueError(f"unknown shuffle mode {self.shuffle_mode!r}")
        if self.shuffle_mode == "seeded" and self.shuffle_seed is None:
            raise ValueError("seeded shuffle mode needs a seed")
        if 3 * self.policy.w_max + 2 >= 1 << (self.ring.bits - 2):
            raise ValueError("weights too large for the comparison range")

    @property
    def weight_bits(self) -> int:
        """Comparison width covering cycle weights (<= 3*w_max) plus one."""
        return (3 * self.policy.w_max + 1).bit_length() + 2

    def digest(self) -> bytes:
        blob = json.dumps(
            {
                "n": self.n_pairs,
                "kappa": self.kappa,
                "policy": self.policy.to_json(),
                "shuffle": [self.shuffle_mode, self.shuffle_seed],
                "ring": self.ring.bits,
                "L": self.antigen_space,
                "pre": [self.preshuffle_subsets, self.subset_order_seed],
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).digest()[:8]


@dataclass
class SubsetLayout:
    """Public per-run geometry: the canonical subset list, split by size."""

    size: int
    nodes: np.ndarray  # (size, 3), dummy-padded
    t_idx: np.ndarray  # positions of 3-subsets
    p_idx: np.ndarray  # positions of 2-subsets
    order: np.ndarray | None = None  # optional public position shuffle

    @classmethod
    def build(cls, cfg: ProtocolConfig) -> "SubsetLayout":
        subsets = np.array(build_subsets(cfg.n_pairs, cfg.kappa), dtype=np.int64)
        is_pair = subsets[:, 2] == cfg.n_pairs
        layout = cls(
            size=len(subsets),
            nodes=subsets,
            t_idx=np.nonzero(~is_pair)[0],
            p_idx=np.nonzero(is_pair)[0],
        )
        if cfg.preshuffle_subsets:
            rng = np.random.default_rng(cfg.subset_order_seed)
            perm = rng.permutation(layout.size)
            layout = cls(
                size=layout.size,
                nodes=subsets[perm],
                t_idx=np.nonzero(subsets[perm, 2] != cfg.n_pairs)[0],
                p_idx=np.nonzero(subsets[perm, 2] == cfg.n_pairs)[0],
                order=perm,
            )
        return layout

    def original_ids(self) -> np.ndarray:
        return self.order if self.order is not None else np.arange(self.size)


@dataclass
class EngineState:
    layout: SubsetLayout
    graph_m: ShareArray
    graph_w: ShareArray
    shuffle: gates.ShuffleHandle
    weights: ShareArray | None = None
    choose_first: ShareArray | None = None
    chosen: ShareArray | None = None


def construction_phase(abb: AbbSession, cfg: ProtocolConfig, sq: SharedQuotes) -> EngineState:
    """Secret graph, node relabeling, zeroed bookkeeping vectors."""
    m = compat.comp_check_matrix(abb, sq)
    w = compat.prio_matrix(abb, sq, cfg.policy)
    (m, w), handle = gates.shuffle_nodes(
        abb, [m, w], mode=cfg.shuffle_mode, seed=cfg.shuffle_seed
    )
    layout = SubsetLayout.build(cfg)
    state = EngineState(layout=layout, graph_m=m, graph_w=w, shuffle=handle)
    state.chosen = abb.zeros((layout.size,))
    return state


def evaluation_phase(abb: AbbSession, cfg: ProtocolConfig, state: EngineState) -> None:
    """Weight of the best executable cycle per subset, and its orientation.

    2-subsets: weight = M(u,v)M(v,u)(W(u,v)+W(v,u)).  3-subsets: both
    orientations are evaluated and the first is kept on ties (>=).  All
    subsets share batched rounds; the comparison happens only for triples.
    """
    lay = state.layout
    m, w = state.graph_m, state.graph_w
    tn = lay.nodes[lay.t_idx]
    pn = lay.nodes[lay.p_idx]
    have_t = len(tn) > 0

    pu, pv = pn[:, 0], pn[:, 1]
    round_a = [(m[pu, pv], m[pv, pu])]
    if have_t:
        tu, tv, tw = tn[:, 0], tn[:, 1], tn[:, 2]
        round_a = [
            (m[tu, tv], m[tv, tw]),
            (m[tu, tw], m[tw, tv]),
        ] + round_a
    out_a = abb.mul_batch(round_a)
    pair_edges = out_a[-1]
    if have_t:
        fwd2, rev2 = out_a[0], out_a[1]
        fwd_edges, rev_edges = abb.mul_batch([(fwd2, m[tw, tu]), (rev2, m[tv, tu])])
        wsum_f = w[tu, tv] + w[tv, tw] + w[tw, tu]
        wsum_r = w[tu, tw] + w[tw, tv] + w[tv, tu]
        wsum_p = w[pu, pv] + w[pv, pu]
        first, second, pair_w = abb.mul_batch(
            [(fwd_edges, wsum_f), (rev_edges, wsum_r), (pair_edges, wsum_p)]
        )
        keep_first = abb.add_public(-gates.gt(abb, second, first, cfg.weight_bits), 1)
        tri_w = gates.select(abb, keep_first, first, second)
    else:
        pair_w = abb.mul(pair_edges, w[pu, pv] + w[pv, pu])

    weights = abb.zeros((lay.size,))
    weights[lay.p_idx] = pair_w
    choose_first = abb.const(np.ones(lay.size, dtype=np.uint64))
    if have_t:
        weights[lay.t_idx] = tri_w
        choose_first[lay.t_idx] = keep_first
    state.weights = weights
    state.choose_first = choose_first


def approximation_phase(abb: AbbSession, cfg: ProtocolConfig, state: EngineState) -> None:
    """floor(N/2) selection rounds, dummies included for obliviousness."""
    lay = state.layout
    n = cfg.n_pairs
    indices = abb.const(lay.original_ids().astype(np.uint64))
    node_shares = abb.const(lay.nodes.astype(np.uint64))
    tn = lay.nodes[lay.t_idx]
    pn = lay.nodes[lay.p_idx]
    have_t = len(tn) > 0
    iterations = n // 2
    for it in range(iterations):
        index, subset = gates.max_weight_set(
            abb, indices, node_shares, state.weights,
            dummy_index=lay.size, dummy_node=n, weight_bits=cfg.weight_bits,
        )
        state.chosen = state.chosen + gates.demux(abb, index.reshape((1,)), lay.size)[0]
        if it == iterations - 1:
            break
        picked = gates.demux(abb, subset, n)  # (3, n); dummy nodes vanish
        comb = picked.sum(axis=0)
        free = abb.add_public(-comb, 1)  # 1 - comb(v), zero on touched nodes
        w = state.weights
        round_1 = [(free[pn[:, 0]], free[pn[:, 1]])]
        if have_t:
            round_1 = [
                (free[tn[:, 0]], free[tn[:, 1]]),
                (free[tn[:, 2]], w[lay.t_idx]),
            ] + round_1
        out_1 = abb.mul_batch(round_1)
        if have_t:
            tri_a, tri_b, pair_a = out_1
            tri_w, pair_w = abb.mul_batch([(tri_a, tri_b), (pair_a, w[lay.p_idx])])
            w[lay.t_idx] = tri_w
        else:
            pair_w = abb.mul(out_1[0], w[lay.p_idx])
        w[lay.p_idx] = pair_w


def resolution_phase(
    abb: AbbSession, cfg: ProtocolConfig, state: EngineState
) -> tuple[ShareArray, ShareArray]:
    """Chosen subsets -> donation matrix -> unshuffle -> index vectors."""
    lay = state.layout
    n = cfg.n_pairs
    a = abb.zeros((n, n))
    # chosen is indexed by original subset id; the layout arrays are positional
    ids = lay.original_ids()
    pn = lay.nodes[lay.p_idx]
    chosen_p = state.chosen[ids[lay.p_idx]]
    # duplicate edges across subsets must accumulate, hence add.at
    for comp_a, comp_c in ((a.c0, chosen_p.c0), (a.c1, chosen_p.c1)):
        np.add.at(comp_a, (pn[:, 0], pn[:, 1]), comp_c)
        np.add.at(comp_a, (pn[:, 1], pn[:, 0]), comp_c)
    if len(lay.t_idx) and cfg.kappa == 3:
        chosen_t = state.chosen[ids[lay.t_idx]]
        map_first = abb.mul(state.choose_first[lay.t_idx], chosen_t)
        map_second = chosen_t - map_first
        tn = lay.nodes[lay.t_idx]
        tu, tv, tw = tn[:, 0], tn[:, 1], tn[:, 2]
        for comp_a, comp_f, comp_s in (
            (a.c0, map_first.c0, map_second.c0),
            (a.c1, map_first.c1, map_second.c1),
        ):
            np.add.at(comp_a, (tu, tv), comp_f)
            np.add.at(comp_a, (tv, tw), comp_f)
            np.add.at(comp_a, (tw, tu), comp_f)
            np.add.at(comp_a, (tu, tw), comp_s)
            np.add.at(comp_a, (tw, tv), comp_s)
            np.add.at(comp_a, (tv, tu), comp_s)
    a = gates.rev_shuffle(abb, a, state.shuffle)
    coef = (np.arange(n, dtype=np.uint64) + U64(1))
    donors = a.scale(coef[:, None]).sum(axis=0)
    recipients = a.scale(coef[None, :]).sum(axis=1)
    return donors, recipients


@dataclass
class PeerResult:
    donors: ShareArray
    recipients: ShareArray
    stats: dict[str, int]
    transcript: Transcript
    shuffle: gates.ShuffleHandle


def run_peer(endpoint, cfg: ProtocolConfig, quote_components) -> PeerResult:
    """Full protocol run at one peer, starting from dealt quote shares."""
    abb = AbbSession(
        endpoint,
        ring=cfg.ring,
        setup_seed=cfg.session_seed,
        config_digest=cfg.digest(),
    )
    sq = SharedQuotes.from_components(quote_components)
    if sq.n != cfg.n_pairs or sq.antigen_space != cfg.antigen_space:
        raise ValueError("quote shares do not match the session configuration")
    state = construction_phase(abb, cfg, sq)
    evaluation_phase(abb, cfg, state)
    approximation_phase(abb, cfg, state)
    donors, recipients = resolution_phase(abb, cfg, state)
    return PeerResult(
        donors=donors,
        recipients=recipients,
        stats=abb.stats,
        transcript=endpoint.transcript,
        shuffle=state.shuffle,
    )


@dataclass
class LocalRun:
    donors: np.ndarray
    recipients: np.ndarray
    peer_results: list[PeerResult]

    @property
    def transcripts(self) -> list[Transcript]:
        return [r.transcript for r in self.peer_results]

    def total_bytes(self) -> int:
        return sum(t.total_sent() for t in self.transcripts)


def run_local(
    quotes: list[compat.InputQuote],
    cfg: ProtocolConfig,
    dealer_seed: int = 0,
    timeout: float = 600.0,
) -> LocalRun:
    """Host all three peers on in-process transport and open the solution."""
    for q in quotes:
        q.check(cfg.antigen_space)
    dealt = compat.deal_quotes(quotes, cfg.ring, np.random.default_rng(dealer_seed))
    net = InProcessNetwork(timeout=timeout)
    endpoints = net.endpoints()
    results: list[PeerResult | None] = [None, None, None]
    errors: list[BaseException] = []

    def work(peer: int) -> None:
        try:
            results[peer] = run_peer(endpoints[peer], cfg, dealt[peer])
        except BaseException as exc:  # noqa: BLE001 - forwarded to caller
            errors.append(exc)
            net.close()

    threads = [threading.Thread(target=work, args=(p,), name=f"peer{p}") for p in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout + 10)
    if errors:
        raise errors[0]
    ring = cfg.ring
    donors = reconstruct(
        {p: (results[p].donors.c0, results[p].donors.c1) for p in range(3)}, ring
    ).astype(np.int64)
    recipients = reconstruct(
        {p: (results[p].recipients.c0, results[p].recipients.c1) for p in range(3)}, ring
    ).astype(np.int64)
    return LocalRun(donors=donors, recipients=recipients, peer_results=list(results))
