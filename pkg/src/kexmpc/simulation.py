"""Discrete-event simulation of a dynamic kidney exchange platform.

Pairs arrive, wait in a pool, and leave either transplanted or unmatched.
At fixed intervals a match run solves the exchange problem on the current
pool, with either the exact solver (the conventional, non-private platform)
or the greedy approximation (what the secure protocol computes).  Matched
cycles then face per-pair crossmatch failures and organ refusals; a single
failure voids the whole cycle and returns all its pairs to the pool after
a delay.

Performance rests on one invariant: both solvers leave a residue that
contains no executable positive-weight cycle, so the next run only needs
to consider cycles touching pairs added since the previous run.  Runs with
small fresh sets (daily match runs) therefore solve tiny subproblems even
when hard-to-match pairs accumulate in the pool.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .compat import InputQuote
from .datagen import PopulationModel, quote_stream
from .solvers import (
    CyclePacking,
    CycleCandidates,
    find_candidates,
    greedy_from_candidates,
    pack_cycles_exact,
    pair_rank,
    triple_rank,
)

logger = logging.getLogger("kexmpc.simulation")

ARRIVAL_RATES = (1, 2, 4, 7, 14)
MATCH_RUN_INTERVALS = (1, 2, 4, 7, 14, 30, 60, 120)
DEPARTURE_RATES = (400, 800, 1200)
REFUSAL_RATES = (0, 10, 20, 30, 40)
MODELS = ("greedy", "conventional")


@dataclass(frozen=True)
class SimConfig:
    """Dynamic platform parameters.  Times are in days; rates are means."""

    arrival_rate_days: float | None = 7.0  # None disables arrivals
    match_run_interval_days: float = 7.0
    departure_rate_days: float = 400.0
    match_refusal_pct: float = 20.0
    crossmatch_fail_high_pct: float = 35.0
    crossmatch_fail_other_pct: float = 10.0
    high_cpra_threshold: int = 80
    reentry_fail_days: float = 7.0
    reentry_refusal_days: float = 2.0
    horizon_days: float = 1825.0
    repetitions: int = 50
    model: str = "greedy"
    kappa: int = 3
    seed: int = 0
    initial_pool_size: int = 0
    population: PopulationModel = field(default_factory=PopulationModel)
    solver_runtime: object = None  # callable pool_size -> days, or None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.kappa not in (2, 3):
            raise ValueError("kappa must be 2 or 3")
        if self.arrival_rate_days is not None and self.arrival_rate_days <= 0:
            raise ValueError("arrival rate must be positive or None")
        for name in ("match_run_interval_days", "departure_rate_days", "horizon_days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in (
            "match_refusal_pct",
            "crossmatch_fail_high_pct",
            "crossmatch_fail_other_pct",
        ):
            if not 0 <= getattr(self, name) <= 100:
                raise ValueError(f"{name} must be a percentage")
        for name in ("reentry_fail_days", "reentry_refusal_days"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class SimResult:
    transplants: int
    arrivals: int
    departures: int
    match_runs: int
    solver_invocations: int
    reentry_events: int
    waiting_final: int
    reentering_final: int
    pool_sizes: list[tuple[float, int]]

    def conserved(self) -> bool:
        return self.arrivals == (
            self.transplants + self.departures + self.waiting_final + self.reentering_final
        )


class _Pair:
    __slots__ = (
        "pid", "quote", "arrival", "depart_time", "state", "rng", "sensitized"
    )

    def __init__(self, pid: int, quote: InputQuote, arrival: float, depart_time: float, seed: int, threshold: int):
        self.pid = pid
        self.quote = quote
        self.arrival = arrival
        self.depart_time = depart_time
        self.state = "waiting"
        self.rng = np.random.Generator(np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, pid], dtype=np.uint64)))
        self.sensitized = quote.cpra >= threshold


class _QuoteBank:
    """Per-pair medical vectors in growing arrays, gathered per snapshot."""

    def __init__(self):
        self._cap = 256
        self.size = 0
        self.blood = None  # allocated on first add, when L is known

    def _alloc(self, antigen_space: int) -> None:
        # float32 so the compatibility matmuls hit BLAS; 0/1 dot products
        # stay exact far beyond any plausible antigen space
        self.blood = np.zeros((self._cap, 4), dtype=np.float32)
        self.accepts = np.zeros((self._cap, 4), dtype=np.float32)
        self.antigens = np.zeros((self._cap, antigen_space), dtype=np.float32)
        self.antibodies = np.zeros((self._cap, antigen_space), dtype=np.float32)

    def add(self, quote: InputQuote) -> None:
        if self.blood is None:
            self._alloc(quote.donor_antigens.shape[0])
        if self.size == self._cap:
            self._cap *= 2
            for name in ("blood", "accepts", "antigens", "antibodies"):
                arr = getattr(self, name)
                grown = np.zeros((self._cap, arr.shape[1]), dtype=np.int64)
                grown[: self.size] = arr
                setattr(self, name, grown)
        self.blood[self.size] = quote.donor_blood
        self.accepts[self.size] = quote.patient_accepts
        self.antigens[self.size] = quote.donor_antigens
        self.antibodies[self.size] = quote.patient_antibodies
        self.size += 1

    def matrices(self, ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
        """Adjacency and unit weights (prioritize transplant count)."""
        blood_ok = (self.blood[ids] @ self.accepts[ids].T) > 0.5
        clash = (self.antigens[ids] @ self.antibodies[ids].T) > 0.5
        adj = blood_ok & ~clash
        np.fill_diagonal(adj, False)
        return adj, adj.astype(np.int64)


def _fresh_candidates(adj: np.ndarray, wts: np.ndarray, fresh: np.ndarray, kappa: int) -> CycleCandidates:
    """Positive-weight executable cycles that touch the fresh node set.

    Under the residue invariant these are ALL positive cycles of the pool.
    Canonical subset ranks are preserved so greedy tie-breaking matches a
    full enumeration exactly.
    """
    n = adj.shape[0]
    rank_parts: list[np.ndarray] = []
    node_parts: list[np.ndarray] = []
    weight_parts: list[np.ndarray] = []
    first_parts: list[np.ndarray] = []
    if kappa == 3 and n >= 3:
        rows = []
        for f in fresh:
            hit = np.outer(adj[f], adj[:, f]) & adj  # (v, w): f->v->w->f
            hit[f, :] = False
            hit[:, f] = False
            vw = np.argwhere(hit)
            if len(vw):
                rows.append(
                    np.column_stack([np.full(len(vw), f, dtype=np.int64), vw])
                )
        if rows:
            tris = np.unique(np.sort(np.concatenate(rows), axis=1), axis=0)
            u, v, w = tris[:, 0], tris[:, 1], tris[:, 2]
            fwd_ok = adj[u, v] & adj[v, w] & adj[w, u]
            rev_ok = adj[u, w] & adj[w, v] & adj[v, u]
            w_fwd = np.where(fwd_ok, wts[u, v] + wts[v, w] + wts[w, u], 0)
            w_rev = np.where(rev_ok, wts[u, w] + wts[w, v] + wts[v, u], 0)
            use_first = w_fwd >= w_rev
            best = np.where(use_first, w_fwd, w_rev)
            keep = best > 0
            rank_parts.append(triple_rank(n, u[keep], v[keep], w[keep]))
            node_parts.append(tris[keep])
            weight_parts.append(best[keep])
            first_parts.append(use_first[keep])
    tri_offset = n * (n - 1) * (n - 2) // 6 if kappa == 3 else 0
    mutual = adj & adj.T
    touch = np.zeros_like(adj)
    touch[fresh, :] = True
    touch[:, fresh] = True
    duos = np.argwhere(np.triu(mutual & touch, 1))
    if len(duos):
        u, v = duos[:, 0], duos[:, 1]
        wsum = wts[u, v] + wts[v, u]
        keep = wsum > 0
        rank_parts.append(tri_offset + pair_rank(n, u[keep], v[keep]))
        node_parts.append(duos[keep])
        weight_parts.append(wsum[keep])
        first_parts.append(np.ones(int(keep.sum()), dtype=bool))
    if not rank_parts:
        return CycleCandidates(
            n=n,
            ranks=np.empty(0, dtype=np.int64),
            nodes=[],
            weights=np.empty(0, dtype=np.int64),
            first_cycle=np.empty(0, dtype=bool),
        )
    ranks = np.concatenate(rank_parts).astype(np.int64)
    nodes = [tuple(int(x) for x in row) for part in node_parts for row in part]
    weights = np.concatenate(weight_parts).astype(np.int64)
    first = np.concatenate(first_parts)
    order = np.argsort(ranks, kind="stable")
    return CycleCandidates(
        n=n,
        ranks=ranks[order],
        nodes=[nodes[i] for i in order],
        weights=weights[order],
        first_cycle=first[order],
    )


def _solve_snapshot(
    adj: np.ndarray,
    wts: np.ndarray,
    fresh: np.ndarray,
    model: str,
    kappa: int,
    run_rng: np.random.Generator,
) -> CyclePacking:
    n = adj.shape[0]
    if model == "conventional":
        cand = _fresh_candidates(adj, wts, fresh, kappa)
        cycles = []
        for i in range(len(cand.ranks)):
            cyc = cand.cycle_for(i)
            mask = 0
            for v in cyc:
                mask |= 1 << v
            cycles.append((mask, cyc, int(cand.weights[i])))
        return pack_cycles_exact(cycles, n)
    # greedy mirrors the secure engine: relabel nodes uniformly, then pick
    # first-maximum subsets in canonical order
    perm = run_rng.permutation(n)
    inv = np.argsort(perm)
    adj_r = adj[np.ix_(inv, inv)]
    wts_r = wts[np.ix_(inv, inv)]
    fresh_r = perm[fresh]
    packing = greedy_from_candidates(_fresh_candidates(adj_r, wts_r, fresh_r, kappa))
    return CyclePacking(
        [tuple(int(inv[v]) for v in c) for c in packing.cycles], packing.total_weight
    )


def find_candidates_from(adj: np.ndarray, wts: np.ndarray, kappa: int) -> CycleCandidates:
    from .solvers import PlainGraph

    return find_candidates(PlainGraph(adj.shape[0], adj.astype(np.int8), wts), kappa)


def run_sim(config: SimConfig, pair_source=None) -> SimResult:
    """One simulation repetition; deterministic given (config, pair_source)."""
    cfg = config
    quotes = iter(pair_source) if pair_source is not None else quote_stream(cfg.population, seed=cfg.seed)
    flow_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5151]))

    pairs: dict[int, _Pair] = {}
    bank = _QuoteBank()
    waiting: set[int] = set()
    fresh: set[int] = set()
    events: list[tuple[float, int, str, int]] = []
    seq = itertools.count()

    stats = dict(arrivals=0, departures=0, transplants=0, match_runs=0,
                 solver_invocations=0, reentries=0)
    pool_sizes: list[tuple[float, int]] = []
    next_pid = itertools.count()

    def push(t: float, kind: str, pid: int = -1) -> None:
        heapq.heappush(events, (t, next(seq), kind, pid))

    def admit(t: float) -> None:
        quote = next(quotes)
        pid = next(next_pid)
        depart_at = t + flow_rng.exponential(cfg.departure_rate_days)
        pairs[pid] = _Pair(pid, quote, t, depart_at, cfg.seed, cfg.high_cpra_threshold)
        bank.add(quote)
        waiting.add(pid)
        fresh.add(pid)
        stats["arrivals"] += 1
        push(depart_at, "depart", pid)

    for _ in range(cfg.initial_pool_size):
        admit(0.0)
    if cfg.arrival_rate_days is not None:
        push(flow_rng.exponential(cfg.arrival_rate_days), "arrive")
    t_run = cfg.match_run_interval_days
    while t_run <= cfg.horizon_days:
        push(t_run, "match", -1)
        t_run += cfg.match_run_interval_days

    run_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0C0]))

    while events:
        t, _, kind, pid = heapq.heappop(events)
        if t > cfg.horizon_days:
            break
        if kind == "arrive":
            admit(t)
            push(t + flow_rng.exponential(cfg.arrival_rate_days), "arrive")
        elif kind == "depart":
            rec = pairs[pid]
            if rec.state == "waiting":
                rec.state = "departed"
                waiting.discard(pid)
                fresh.discard(pid)
                stats["departures"] += 1
        elif kind == "reenter":
            rec = pairs[pid]
            if rec.state != "reentering":
                continue
            if rec.depart_time <= t:
                rec.state = "departed"
                stats["departures"] += 1
            else:
                rec.state = "waiting"
                waiting.add(pid)
                fresh.add(pid)
        elif kind == "match":
            stats["match_runs"] += 1
            snapshot = sorted(waiting)
            pool_sizes.append((t, len(snapshot)))
            if len(snapshot) < 2:
                fresh.clear()
                continue
            fresh_pos = np.array(
                [i for i, p in enumerate(snapshot) if p in fresh], dtype=np.int64
            )
            fresh.clear()
            if len(fresh_pos) == 0:
                continue  # residue invariant: no cycles can exist
            recs = [pairs[p] for p in snapshot]
            adj, wts = bank.matrices(snapshot)
            stats["solver_invocations"] += 1
            packing = _solve_snapshot(adj, wts, fresh_pos, cfg.model, cfg.kappa, run_rng)
            advance = float(cfg.solver_runtime(len(snapshot))) if cfg.solver_runtime else 0.0
            settle = t + advance
            for cycle in packing.cycles:
                members = [recs[v] for v in cycle]
                # exactly two draws per member per offer keeps each pair's
                # stream aligned across models and cycle contexts
                draws = [(r.rng.random(), r.rng.random()) for r in members]
                fail = any(
                    cm < (cfg.crossmatch_fail_high_pct if r.sensitized else cfg.crossmatch_fail_other_pct) / 100.0
                    for (cm, _), r in zip(draws, members)
                )
                refused = any(rf < cfg.match_refusal_pct / 100.0 for (_, rf), _ in zip(draws, members))
                if fail or refused:
                    delay = cfg.reentry_fail_days if fail else cfg.reentry_refusal_days
                    stats["reentries"] += len(members)
                    for r in members:
                        r.state = "reentering"
                        waiting.discard(r.pid)
                        push(settle + delay, "reenter", r.pid)
                else:
                    stats["transplants"] += len(members)
                    for r in members:
                        r.state = "transplanted"
                        waiting.discard(r.pid)

    return SimResult(
        transplants=stats["transplants"],
        arrivals=stats["arrivals"],
        departures=stats["departures"],
        match_runs=stats["match_runs"],
        solver_invocations=stats["solver_invocations"],
        reentry_events=stats["reentries"],
        waiting_final=len(waiting),
        reentering_final=sum(1 for p in pairs.values() if p.state == "reentering"),
        pool_sizes=pool_sizes,
    )


# -- model comparison --------------------------------------------------------


def run_rep_pair(base: SimConfig, rep: int) -> tuple[int, int]:
    """(greedy, conventional) transplant counts on one shared event stream."""
    seed = base.seed + 7919 * rep
    greedy = run_sim(replace(base, model="greedy", seed=seed))
    conv = run_sim(replace(base, model="conventional", seed=seed))
    return greedy.transplants, conv.transplants


def _cell_rows(base: SimConfig, arrival, interval, reps: int, n_jobs: int | None):
    cfg = replace(
        base,
        arrival_rate_days=float(arrival),
        match_run_interval_days=float(interval),
    )
    try:
        from joblib import Parallel, delayed
    except ImportError:
        Parallel = None
    if n_jobs and n_jobs > 1 and Parallel is not None:
        outs = Parallel(n_jobs=n_jobs)(delayed(run_rep_pair)(cfg, r) for r in range(reps))
    else:
        outs = [run_rep_pair(cfg, r) for r in range(reps)]
    rows = []
    for rep, (g, c) in enumerate(outs):
        rows.append(
            {
                "arrival_rate_days": arrival,
                "match_run_interval_days": interval,
                "departure_rate_days": base.departure_rate_days,
                "match_refusal_pct": base.match_refusal_pct,
                "rep": rep,
                "greedy_transplants": g,
                "conventional_transplants": c,
                "ratio": g / c if c else float("nan"),
            }
        )
    return rows


def compare_models(
    base: SimConfig,
    arrival_rates=ARRIVAL_RATES,
    intervals=MATCH_RUN_INTERVALS,
    reps: int | None = None,
    n_jobs: int | None = None,
) -> list[dict]:
    """Transplant-count ratios (greedy / conventional) over the grid.

    Repetitions are paired: both models see the same arrival and quote
    streams per rep.  Grid values must come from the parameter table.
    """
    for a in arrival_rates:
        if a not in ARRIVAL_RATES:
            raise ValueError(f"arrival rate {a} outside the parameter table")
    for i in intervals:
        if i not in MATCH_RUN_INTERVALS:
            raise ValueError(f"match run interval {i} outside the parameter table")
    if base.departure_rate_days not in DEPARTURE_RATES:
        raise ValueError("departure rate outside the parameter table")
    if base.match_refusal_pct not in REFUSAL_RATES:
        raise ValueError("refusal rate outside the parameter table")
    reps = reps if reps is not None else base.repetitions
    rows: list[dict] = []
    for arrival in arrival_rates:
        for interval in intervals:
            rows.extend(_cell_rows(base, arrival, interval, reps, n_jobs))
            logger.info("finished cell arrival=%s interval=%s", arrival, interval)
    return rows


def mean_ratio(rows: list[dict], arrival, interval) -> float:
    cell = [
        r["ratio"]
        for r in rows
        if r["arrival_rate_days"] == arrival and r["match_run_interval_days"] == interval
        and np.isfinite(r["ratio"])
    ]
    return float(np.mean(cell)) if cell else float("nan")


def paired_ratios(rows: list[dict], arrival, interval) -> np.ndarray:
    cell = sorted(
        (
            (r["rep"], r["ratio"])
            for r in rows
            if r["arrival_rate_days"] == arrival
            and r["match_run_interval_days"] == interval
        ),
    )
    return np.array([v for _, v in cell])


def sign_test_greater(xs: np.ndarray, ys: np.ndarray) -> float:
    """One-sided sign test p-value for median(xs - ys) > 0."""
    from scipy.stats import binomtest

    diffs = np.asarray(xs, dtype=float) - np.asarray(ys, dtype=float)
    wins = int(np.sum(diffs > 0))
    decisive = int(np.sum(diffs != 0))
    if decisive == 0:
        return 1.0
    return float(binomtest(wins, decisive, 0.5, alternative="greater").pvalue)
