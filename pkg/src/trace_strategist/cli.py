"""Command line entry point: ``trace-strategist <subcommand>``.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
Set TRACE_STRATEGIST_LOG (DEBUG, INFO, WARNING, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from trace_strategist import cluster, fomm, ingest, longitudinal, outcomes, processes, synth
from trace_strategist.pipeline import (
    ConfigError,
    RunConfig,
    StageError,
    _Outputs,
    load_libraries,
    map_streams,
    run_longitudinal,
    run_pipeline,
    time_stats,
    write_strategy_graphs,
    write_time_stats,
)

log = logging.getLogger("trace_strategist")


def _k_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "events": dict(help="raw events (.jsonl or .csv)"),
        "outcomes": dict(help="outcomes CSV"),
        "action_lib": dict(help="action library YAML (default: bundled)"),
        "process_lib": dict(help="process library YAML (default: bundled)"),
        "k": dict(type=int, help="number of strategies (default 3)"),
        "threshold": dict(type=float, help="summarization frequency threshold (default 0.10)"),
        "seed": dict(type=int, help="random seed"),
        "out": dict(help="output directory"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trace-strategist", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and sessionize a raw event log")
    _common(p, "events", "out")

    p = sub.add_parser("map", help="events -> learning actions -> SRL process instances")
    _common(p, "events", "action_lib", "process_lib", "out")

    p = sub.add_parser("fomm", help="per student-session transition matrices from instances.csv")
    p.add_argument("--instances", required=True)
    _common(p, "threshold", "out")

    p = sub.add_parser("cluster", help="fit the Markov-chain mixture and assign strategies")
    p.add_argument("--instances", required=True)
    _common(p, "k", "seed", "threshold", "out")
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="smoothing pseudo-count")
    p.add_argument("--method", choices=["markov", "gmm"], default=None)
    p.add_argument("--select-k", default=None, help="K range for BIC table, e.g. 1..5")

    p = sub.add_parser("longitudinal", help="cross-session strategy table, Bowker test, Sankey data")
    p.add_argument("--assignments", required=True)
    p.add_argument("--sessions", nargs=2, default=None, metavar=("FIRST", "SECOND"))
    _common(p, "k", "out")
    p.add_argument("--exact", action="store_true", help="also run the exact McNemar test (k = 2)")

    p = sub.add_parser("outcomes", help="descriptives and pairwise strategy comparisons")
    p.add_argument("--assignments", required=True)
    _common(p, "outcomes", "out")

    p = sub.add_parser("synth", help="generate a synthetic trace from strategy profiles")
    p.add_argument("--profiles", default="demo", help="profile YAML or 'demo'")
    p.add_argument("--n", type=int, default=180, help="number of student-sessions")
    p.add_argument("--sessions", nargs="+", default=["S1", "S2"])
    p.add_argument("--events-range", type=int, nargs=2, default=None, metavar=("MIN", "MAX"))
    p.add_argument("--missing-rate", type=float, default=0.0)
    _common(p, "seed", "out")

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--config", default=None, help="YAML run configuration; flags override it")
    _common(p, "events", "outcomes", "action_lib", "process_lib", "k", "threshold", "seed", "out")
    return parser


def _outdir(args, default: str = ".") -> Path:
    root = Path(args.out or default)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _require(path, name: str) -> str:
    if path is None:
        raise ConfigError(f"{name}: no input path given")
    if not Path(path).exists():
        raise ConfigError(f"{name}: path does not exist: {path}")
    return path


def cmd_ingest(args) -> None:
    events, rejects = ingest.read_events(_require(args.events, "events"))
    streams = ingest.sessionize(events)
    root = _outdir(args)
    ingest.write_events_jsonl((e for s in streams for e in s.events), root / "events.sessionized.jsonl")
    ingest.write_rejects(rejects, root / "rejects.csv")
    print(f"{len(events)} events, {len(rejects)} rejects, {len(streams)} student-sessions")


def cmd_map(args) -> None:
    events, rejects = ingest.read_events(_require(args.events, "events"))
    cfg = RunConfig(action_lib=args.action_lib, process_lib=args.process_lib)
    alib, plib = load_libraries(cfg)
    mapped = map_streams(ingest.sessionize(events), alib, plib)
    root = _outdir(args)
    processes.write_instances(((st, se, i) for st, se, insts in mapped for i in insts), root / "instances.csv")
    ingest.write_rejects(rejects, root / "rejects.csv")
    write_time_stats(time_stats(mapped), root / "process_time.csv")
    print(f"{sum(len(x[2]) for x in mapped)} process instances from {len(mapped)} student-sessions")


def _sequences(path) -> list[fomm.ProcessSequence]:
    seqs = fomm.read_sequences_from_instances(processes.read_instances(_require(path, "instances")))
    return [s for s in seqs if len(s) >= 2]


def cmd_fomm(args) -> None:
    seqs = _sequences(args.instances)
    root = _outdir(args)
    fomm.write_matrices(((s.student_id, s.session_id, fomm.build_fomm(s)) for s in seqs), root / "fomm_matrices.csv")
    pooled = fomm.pooled_fomm(seqs)
    freqs = fomm.relative_frequencies(seqs)
    threshold = 0.10 if args.threshold is None else args.threshold
    (root / "pooled_full.dot").write_text(fomm.export_graph(pooled, freqs, "pooled_full"), encoding="utf-8")
    summarized = fomm.summarize_model(pooled, freqs, threshold)
    (root / "pooled_summarized.dot").write_text(fomm.export_graph(summarized, freqs, "pooled_summarized"), encoding="utf-8")
    print(f"{len(seqs)} transition models written")


def cmd_cluster(args) -> None:
    seqs = _sequences(args.instances)
    cfg = RunConfig(events="-", k=args.k or 3, seed=args.seed or 0)
    if args.restarts is not None:
        cfg.n_restarts = args.restarts
    if args.alpha is not None:
        cfg.smoothing_alpha = args.alpha
    if args.method:
        cfg.method = args.method
    em = cfg.em_config()
    root = _outdir(args)
    if args.select_k:
        rows, best = cluster.select_k(seqs, _k_range(args.select_k), em)
        with open(root / "bic.csv", "w", encoding="utf-8") as fh:
            fh.write("K,log_likelihood,BIC\n")
            for r in rows:
                fh.write(f"{r['K']},{r['log_likelihood']!r},{r['BIC']!r}\n")
        print(f"BIC recommends K = {best}")
    mixture = cluster.fit_em(seqs, cfg.k, em)
    assignments = cluster.assign(mixture, seqs)
    cluster.write_mixture(mixture, root / "mixture.json")
    cluster.write_assignments(assignments, mixture.K, root / "assignments.csv")
    threshold = 0.10 if args.threshold is None else args.threshold
    bundles = cluster.strategy_report(assignments, seqs, mixture.K, threshold)
    write_strategy_graphs(bundles, _Outputs(root))
    for b in bundles:
        print(f"strategy {b.cluster + 1}: n = {b.count} ({100 * b.share:.2f}%)")


def cmd_longitudinal(args) -> None:
    assignments = cluster.read_assignments(_require(args.assignments, "assignments"))
    k = args.k or 1 + max(a.cluster for a in assignments)
    sessions = args.sessions or sorted({a.session_id for a in assignments})[:2]
    if len(sessions) != 2:
        raise ConfigError("sessions: assignments cover fewer than two sessions")
    table, result, unmatched = run_longitudinal(assignments, k, sessions)
    if args.exact and k == 2:
        result = longitudinal.bowker_test(table, exact=True)
    root = _outdir(args)
    longitudinal.write_sankey(longitudinal.sankey_export(table, sessions=sessions), root / "sankey.json")
    longitudinal.write_bowker(result, root / "bowker.csv")
    print(f"{table.total} paired students ({len(unmatched['s1'])} only in {sessions[0]}, "
          f"{len(unmatched['s2'])} only in {sessions[1]})")
    print(longitudinal.format_bowker(result))


def cmd_outcomes(args) -> None:
    assignments = cluster.read_assignments(_require(args.assignments, "assignments"))
    records = outcomes.read_outcomes(_require(args.outcomes, "outcomes"))
    kept, excluded = outcomes.filter_complete(records)
    root = _outdir(args)
    strategies = sorted({a.cluster for a in assignments})
    outcomes.write_descriptives(outcomes.describe(kept, assignments, strategies), root / "descriptives.csv")
    results = outcomes.compare_all(kept, assignments)
    outcomes.write_pairwise(results, root / "pairwise.csv")
    print(f"{len(kept)} complete records, {len(excluded)} excluded, {len(results)} comparisons")


def cmd_synth(args) -> None:
    profiles = synth.load_profiles(args.profiles)
    seed = args.seed or 0
    seqs, truth = synth.sample_sequences(profiles, args.n, seed, tuple(args.sessions))
    root = _outdir(args)
    events = []
    for s in seqs:
        events.extend(synth.emit_raw_trace(s, seed=seed, events_range=tuple(args.events_range) if args.events_range else None))
    ingest.write_events_jsonl(events, root / "events.jsonl")
    synth.write_truth(seqs, truth, profiles, root / "true_labels.csv")
    records = synth.sample_outcomes(seqs, truth, profiles, seed, args.missing_rate)
    synth.write_outcomes(records, root / "outcomes.csv")
    print(f"{len(seqs)} sequences, {len(events)} events written to {root}")


def cmd_run(args) -> None:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name in ("events", "outcomes", "action_lib", "process_lib", "k", "threshold", "seed", "out"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    manifest = run_pipeline(cfg)
    print(json.dumps(manifest, indent=2))


COMMANDS = {
    "ingest": cmd_ingest,
    "map": cmd_map,
    "fomm": cmd_fomm,
    "cluster": cmd_cluster,
    "longitudinal": cmd_longitudinal,
    "outcomes": cmd_outcomes,
    "synth": cmd_synth,
    "run": cmd_run,
}


def main(argv=None) -> int:
    level = os.environ.get("TRACE_STRATEGIST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
