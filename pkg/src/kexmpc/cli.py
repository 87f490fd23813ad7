"""Operator command line: deal shares, run peers, oracles, sweeps, plots."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import compat, datagen, simulation, solvers
from .abb import RingConfig, reconstruct
from .compat import PrioPolicy, QuoteFormatError
from .datagen import PopulationModel
from .protocol import ProtocolConfig, run_local, run_peer
from .transport import TcpEndpoint, combined_summary

logger = logging.getLogger("kexmpc.cli")

SHARES_SCHEMA = "kexmpc-shares/1"
SOLUTION_SHARES_SCHEMA = "kexmpc-solution-shares/1"
PEER_SCHEMA = "kexmpc-peer/1"
SIM_SCHEMA = "kexmpc-sim/1"


def _setup_logging() -> None:
    level = os.environ.get("KEXMPC_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _policy_from_args(args) -> PrioPolicy:
    if args.policy == "uniform":
        if getattr(args, "coeff", None):
            raise SystemExit("--coeff requires --policy weighted")
        return PrioPolicy.uniform()
    coeffs = {}
    for item in args.coeff or []:
        name, _, value = item.partition("=")
        try:
            coeffs[name] = int(value)
        except ValueError:
            raise SystemExit(f"bad --coeff {item!r}, expected name=integer") from None
    if not coeffs:
        raise SystemExit("--policy weighted needs at least one --coeff name=value")
    return PrioPolicy.weighted(coeffs)


def _write_solution(path, donors, recipients) -> None:
    with open(path, "w") as fh:
        fh.write("# pair donor recipient (1-based, 0 = unmatched)\n")
        for i, (d, r) in enumerate(zip(donors, recipients)):
            fh.write(f"{i} {int(d)} {int(r)}\n")


def cmd_gen(args) -> int:
    obj = {}
    if args.population:
        with open(args.population) as fh:
            obj = json.load(fh)
    if args.antigen_space:
        obj["antigen_space"] = args.antigen_space
    model = PopulationModel.from_json(obj)
    quotes = datagen.gen_pairs(args.pairs, model, seed=args.seed)
    compat.write_quotes(args.out, quotes, antigen_space=model.antigen_space)
    print(f"wrote {len(quotes)} pairs to {args.out}")
    return 0


def cmd_deal(args) -> int:
    quotes, antigen_space = compat.read_quotes(args.quotes)
    ring = RingConfig(args.ring_bits)
    bundles = compat.deal_quotes(quotes, ring, np.random.default_rng(args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    for peer, bundle in enumerate(bundles):
        path = os.path.join(args.out_dir, f"shares-peer{peer}.json")
        doc = {
            "schema": SHARES_SCHEMA,
            "peer": peer,
            "n_pairs": len(quotes),
            "antigen_space": antigen_space,
            "ring_bits": ring.bits,
            "fields": {
                name: {"c0": c0.tolist(), "c1": c1.tolist()}
                for name, (c0, c1) in bundle.items()
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
        print(f"wrote {path}")
    return 0


def _load_share_bundle(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SHARES_SCHEMA:
        raise SystemExit(f"{path}: not a share bundle")
    return doc


def cmd_peer(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    if doc.get("schema") != PEER_SCHEMA:
        raise SystemExit(f"{args.config}: not a peer config")
    peer = int(doc["peer"])
    addresses = []
    for addr in doc["endpoints"]:
        host, _, port = addr.rpartition(":")
        addresses.append((host, int(port)))
    proto = doc["protocol"]
    cfg = ProtocolConfig(
        n_pairs=int(proto["n_pairs"]),
        kappa=int(proto.get("kappa", 3)),
        policy=PrioPolicy.from_json(proto.get("policy", {})),
        shuffle_mode=proto.get("shuffle_mode", "random"),
        shuffle_seed=proto.get("shuffle_seed"),
        session_seed=proto.get("session_seed"),
        ring=RingConfig(int(proto.get("ring_bits", 64))),
        antigen_space=int(proto.get("antigen_space", compat.DEFAULT_ANTIGEN_SPACE)),
    )
    bundle = _load_share_bundle(args.shares)
    if bundle["peer"] != peer:
        raise SystemExit("share bundle belongs to a different peer")
    components = {
        name: (np.array(f["c0"], dtype=np.uint64), np.array(f["c1"], dtype=np.uint64))
        for name, f in bundle["fields"].items()
    }
    endpoint = TcpEndpoint.connect(peer, addresses)
    try:
        result = run_peer(endpoint, cfg, components)
    finally:
        endpoint.close()
    doc = {
        "schema": SOLUTION_SHARES_SCHEMA,
        "peer": peer,
        "n_pairs": cfg.n_pairs,
        "ring_bits": cfg.ring.bits,
        "donors": {"c0": result.donors.c0.tolist(), "c1": result.donors.c1.tolist()},
        "recipients": {
            "c0": result.recipients.c0.tolist(),
            "c1": result.recipients.c1.tolist(),
        },
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh)
    print(f"peer {peer} done; {result.transcript.total_sent()} bytes sent")
    return 0


def cmd_reveal(args) -> int:
    docs = []
    for path in args.shares:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("schema") != SOLUTION_SHARES_SCHEMA:
            raise SystemExit(f"{path}: not a solution share file")
        docs.append(doc)
    if len({d["peer"] for d in docs}) < 2:
        raise SystemExit("need output shares from at least two distinct peers")
    ring = RingConfig(int(docs[0]["ring_bits"]))
    donors = reconstruct(
        {
            d["peer"]: (
                np.array(d["donors"]["c0"], dtype=np.uint64),
                np.array(d["donors"]["c1"], dtype=np.uint64),
            )
            for d in docs
        },
        ring,
    )
    recipients = reconstruct(
        {
            d["peer"]: (
                np.array(d["recipients"]["c0"], dtype=np.uint64),
                np.array(d["recipients"]["c1"], dtype=np.uint64),
            )
            for d in docs
        },
        ring,
    )
    _write_solution(args.out, donors.astype(np.int64), recipients.astype(np.int64))
    print(f"wrote {args.out}")
    return 0


def cmd_run_local(args) -> int:
    try:
        quotes, antigen_space = compat.read_quotes(args.quotes)
    except QuoteFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = ProtocolConfig(
        n_pairs=len(quotes),
        kappa=args.kappa,
        policy=_policy_from_args(args),
        shuffle_mode=args.shuffle,
        shuffle_seed=args.seed if args.shuffle == "seeded" else None,
        session_seed=args.seed,
        antigen_space=antigen_space,
    )
    run = run_local(quotes, cfg, dealer_seed=args.seed or 0)
    _write_solution(args.out, run.donors, run.recipients)
    print(f"wrote {args.out}")
    summary = combined_summary(run.transcripts)
    total = sum(b for _, b in summary)
    print(f"rounds: {len(summary)}; total bytes sent (all peers): {total}")
    if args.verbose_transcript:
        for tag, n_bytes in summary:
            print(f"  round {tag}: {n_bytes} bytes")
    return 0


def _load_graph_arg(args):
    try:
        return solvers.load_graph(args.graph)
    except (ValueError, OSError) as exc:
        raise SystemExit(f"error reading {args.graph}: {exc}") from None


def _print_packing(packing) -> None:
    print(f"total weight: {packing.total_weight}")
    print(f"matched pairs: {packing.matched_pairs()}")
    for cyc in packing.cycles:
        print("cycle: " + " -> ".join(map(str, cyc)))


def cmd_greedy(args) -> int:
    g = _load_graph_arg(args)
    relabel = None
    if args.relabel_seed is not None:
        relabel = np.random.default_rng(args.relabel_seed).permutation(g.n)
    packing = solvers.greedy_solve(g, kappa=args.kappa, relabel=relabel)
    _print_packing(packing)
    return 0


def cmd_exact(args) -> int:
    g = _load_graph_arg(args)
    try:
        packing = solvers.exact_solve(g, kappa=args.kappa)
    except solvers.SizeLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _print_packing(packing)
    return 0


def cmd_quality(args) -> int:
    if args.pairs > solvers.DP_NODE_LIMIT:
        print(
            f"error: exact baseline handles at most {solvers.DP_NODE_LIMIT} pairs",
            file=sys.stderr,
        )
        return 2
    model = PopulationModel()
    rows = []
    for rep in range(args.reps):
        seed = args.seed + rep
        quotes = datagen.gen_pairs(args.pairs, model, seed=seed)
        g = compat.plain_graph(quotes)
        relabel = np.random.default_rng(seed ^ 0xFACE).permutation(args.pairs)
        q = solvers.quality(g, kappa=args.kappa, relabel=relabel)
        rows.append((rep, seed, q.matched_greedy, q.matched_exact, q.ratio))
    config_echo = json.dumps(
        {"pairs": args.pairs, "reps": args.reps, "kappa": args.kappa, "seed": args.seed}
    )
    with open(args.out, "w") as fh:
        fh.write(f"# config: {config_echo}\n")
        fh.write("rep,seed,matched_greedy,matched_exact,ratio\n")
        for row in rows:
            fh.write(",".join(map(str, row)) + "\n")
    ratios = [r[-1] for r in rows]
    print(f"wrote {args.out}")
    print(f"mean ratio: {np.mean(ratios):.4f}  min ratio: {np.min(ratios):.4f}")
    return 0


def cmd_simulate(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SIM_SCHEMA:
        raise SystemExit(f"{args.config}: not a simulation config")
    base = simulation.SimConfig(
        departure_rate_days=float(doc.get("departure_rate_days", 400)),
        match_refusal_pct=float(doc.get("match_refusal_pct", 20)),
        horizon_days=float(doc.get("horizon_days", 1825)),
        repetitions=int(doc.get("repetitions", 50)),
        kappa=int(doc.get("kappa", 3)),
        seed=int(doc.get("seed", 0)),
        population=PopulationModel.from_json(doc.get("population", {})),
    )
    arrivals = tuple(doc.get("arrival_rates", simulation.ARRIVAL_RATES))
    intervals = tuple(doc.get("match_run_intervals", simulation.MATCH_RUN_INTERVALS))
    reps = args.reps if args.reps is not None else base.repetitions
    rows = simulation.compare_models(
        base, arrivals, intervals, reps=reps, n_jobs=args.jobs
    )
    config_echo = json.dumps(
        {
            "arrival_rates": list(arrivals),
            "match_run_intervals": list(intervals),
            "departure_rate_days": base.departure_rate_days,
            "match_refusal_pct": base.match_refusal_pct,
            "horizon_days": base.horizon_days,
            "reps": reps,
            "seed": base.seed,
            "kappa": base.kappa,
        }
    )
    cols = [
        "arrival_rate_days",
        "match_run_interval_days",
        "departure_rate_days",
        "match_refusal_pct",
        "rep",
        "greedy_transplants",
        "conventional_transplants",
        "ratio",
    ]
    with open(args.out, "w") as fh:
        fh.write(f"# config: {config_echo}\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def _read_sim_csv(path):
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    data = [ln for ln in lines if not ln.startswith("#")]
    if not data:
        raise SystemExit(f"{path}: empty CSV")
    header = data[0].split(",")
    for ln in data[1:]:
        parts = ln.split(",")
        rows.append({k: v for k, v in zip(header, parts)})
    if not rows:
        raise SystemExit(f"{path}: no data rows")
    return rows


def cmd_plot(args) -> int:
    rows = _read_sim_csv(args.csv)
    cells: dict[tuple[float, float], list[float]] = {}
    for row in rows:
        key = (float(row["arrival_rate_days"]), float(row["match_run_interval_days"]))
        ratio = float(row["ratio"])
        if np.isfinite(ratio):
            cells.setdefault(key, []).append(ratio)
    arrivals = sorted({k[0] for k in cells})
    intervals = sorted({k[1] for k in cells})
    grid = np.full((len(arrivals), len(intervals)), np.nan)
    for (a, i), vals in cells.items():
        grid[arrivals.index(a), intervals.index(i)] = np.mean(vals)
    header = "arrival\\interval " + " ".join(f"{int(i):>7d}" for i in intervals)
    print(header)
    for ai, a in enumerate(arrivals):
        cells_txt = " ".join(
            f"{100 * grid[ai, ii]:>6.1f}%" if np.isfinite(grid[ai, ii]) else "     --"
            for ii in range(len(intervals))
        )
        print(f"{int(a):>16d} {cells_txt}")
    if args.out:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("error: matplotlib not installed, cannot render", file=sys.stderr)
            return 2
        fig, ax = plt.subplots(figsize=(1.2 * len(intervals) + 2, 1.0 * len(arrivals) + 1.5))
        im = ax.imshow(100 * grid, cmap="RdYlGn", aspect="auto", vmin=60, vmax=110)
        ax.set_xticks(range(len(intervals)), [str(int(i)) for i in intervals])
        ax.set_yticks(range(len(arrivals)), [str(int(a)) for a in arrivals])
        ax.set_xlabel("match run interval [days]")
        ax.set_ylabel("arrival rate [days]")
        for ai in range(len(arrivals)):
            for ii in range(len(intervals)):
                if np.isfinite(grid[ai, ii]):
                    ax.text(ii, ai, f"{100 * grid[ai, ii]:.0f}%", ha="center", va="center", fontsize=8)
        fig.colorbar(im, label="transplants vs conventional [%]")
        fig.tight_layout()
        fig.savefig(args.out, dpi=150)
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kexmpc",
        description="Privacy-preserving kidney exchange: secure solver, oracles, simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic patient-donor pairs")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--antigen-space", type=int, default=None)
    p.add_argument("--population", help="JSON file with population model overrides")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("deal", help="split a quote file into three share bundles")
    p.add_argument("--quotes", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ring-bits", type=int, default=64)
    p.set_defaults(fn=cmd_deal)

    p = sub.add_parser("peer", help="run one computing peer over TCP")
    p.add_argument("--config", required=True)
    p.add_argument("--shares", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_peer)

    p = sub.add_parser("reveal", help="combine output share files into a solution")
    p.add_argument("--shares", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reveal)

    p = sub.add_parser("run-local", help="run all three peers in-process")
    p.add_argument("--quotes", required=True)
    p.add_argument("--kappa", type=int, default=3, choices=(2, 3))
    p.add_argument("--policy", default="uniform", choices=("uniform", "weighted"))
    p.add_argument("--coeff", action="append", help="weighted-policy term name=int")
    p.add_argument("--shuffle", default="seeded", choices=("identity", "seeded", "random"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose-transcript", action="store_true")
    p.set_defaults(fn=cmd_run_local)

    p = sub.add_parser("greedy", help="plaintext greedy solver on a graph file")
    p.add_argument("--graph", required=True)
    p.add_argument("--kappa", type=int, default=3, choices=(2, 3))
    p.add_argument("--relabel-seed", type=int, default=None)
    p.set_defaults(fn=cmd_greedy)

    p = sub.add_parser("exact", help="exact solver on a graph file")
    p.add_argument("--graph", required=True)
    p.add_argument("--kappa", type=int, default=3, choices=(2, 3))
    p.set_defaults(fn=cmd_exact)

    p = sub.add_parser("quality", help="greedy-vs-exact quality sweep")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--kappa", type=int, default=3, choices=(2, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quality)

    p = sub.add_parser("simulate", help="dynamic-platform simulation sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reps", type=int, default=None, help="override repetitions")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("plot", help="render a simulation CSV as a ratio grid")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", help="write a PNG heat map here")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except QuoteFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
