"""End-to-end run: events -> actions -> processes -> FOMMs -> strategies -> statistics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from trace_strategist import actions, cluster, fomm, ingest, longitudinal, outcomes, processes

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Bad or missing configuration (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 1)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    events: Optional[str] = None
    outcomes: Optional[str] = None
    action_lib: Optional[str] = None
    process_lib: Optional[str] = None
    k: int = 3
    threshold: float = 0.10
    seed: int = 0
    out: str = "out"
    max_iter: int = 500
    tol: float = 1e-6
    n_restarts: int = 10
    smoothing_alpha: float = 0.5
    method: str = "markov"
    session_max: dict = field(default_factory=lambda: dict(outcomes.DEFAULT_SESSION_MAX))
    sessions: Optional[list] = None  # the two sessions compared longitudinally

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        em = data.pop("em", None) or {}
        data.update(em)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(k.replace("-", "_") for k in data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k.replace("-", "_"): v for k, v in data.items()})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_mapping(yaml.safe_load(p.read_text(encoding="utf-8")) or {})

    def em_config(self) -> cluster.EMConfig:
        return cluster.EMConfig(self.max_iter, self.tol, self.n_restarts, self.smoothing_alpha, self.seed, self.method)

    def validate(self) -> None:
        if not self.events:
            raise ConfigError("events: no input path given")
        for name in ("events", "outcomes", "action_lib", "process_lib"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name}: path does not exist: {value}")
        if not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if int(self.k) < 1:
            raise ConfigError("k must be at least 1")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Outputs:
    """Tracks written files so a failed run can mark them partial."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []
        self.groups: dict[str, list[Path]] = {}

    def path(self, group: str, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        self.groups.setdefault(group, []).append(p)
        return p

    def mark_partial(self) -> None:
        for p in self.written:
            if p.exists():
                os.replace(p, p.with_name(p.name + ".partial"))

    def manifest(self) -> dict:
        artifacts = []
        for group, paths in self.groups.items():
            artifacts.append({
                "name": group,
                "files": [{"path": p.relative_to(self.root).as_posix(), "sha256": sha256_file(p)} for p in paths],
            })
        return {"artifacts": artifacts}


def load_libraries(cfg: RunConfig):
    alib = actions.load_library(cfg.action_lib) if cfg.action_lib else actions.default_action_library()
    if cfg.process_lib:
        plib = processes.load_process_library(cfg.process_lib, alib)
    else:
        plib = processes.default_process_library(alib)
    return alib, plib


def map_streams(streams, alib, plib):
    """(student, session, instances) per stream, in stream order."""
    return [(s.student_id, s.session_id, processes.map_processes(actions.map_actions(s, alib), plib)) for s in streams]


def time_stats(mapped) -> list[dict]:
    by_session: dict = {}
    for student, session, insts in mapped:
        by_session.setdefault(session, {})[student] = insts
    return processes.process_time_stats(by_session)


def write_time_stats(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["process", "session", "n", "mean_minutes", "sd_minutes"])
        for r in rows:
            w.writerow([r["process"], r["session"], r["n"], repr(r["mean_minutes"]), repr(r["sd_minutes"])])


def write_strategy_graphs(bundles, outs: _Outputs, group: str = "graphs", prefix: str = "graphs/") -> None:
    for b in bundles:
        if b.pooled is None:
            continue
        name = f"strategy_{b.cluster + 1}"
        outs.path(group, f"{prefix}{name}_full.dot").write_text(
            fomm.export_graph(b.pooled, b.relative_frequencies, f"{name}_full"), encoding="utf-8")
        if b.summarized is not None:
            outs.path(group, f"{prefix}{name}_summarized.dot").write_text(
                fomm.export_graph(b.summarized, b.relative_frequencies, f"{name}_summarized"), encoding="utf-8")


def pick_sessions(cfg: RunConfig, assignments) -> Optional[tuple[str, str]]:
    if cfg.sessions:
        if len(cfg.sessions) != 2:
            raise ConfigError("sessions must name exactly two sessions")
        return tuple(cfg.sessions)
    present = sorted({a.session_id for a in assignments})
    return tuple(present[:2]) if len(present) >= 2 else None


def run_longitudinal(assignments, k: int, sessions):
    s1 = [a for a in assignments if a.session_id == sessions[0]]
    s2 = [a for a in assignments if a.session_id == sessions[1]]
    pairs, unmatched = longitudinal.pair_assignments(s1, s2)
    table = longitudinal.build_table(pairs, k)
    result = longitudinal.bowker_test(table) if k >= 2 else None
    return table, result, unmatched


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage and return the manifest (also written as manifest.json)."""
    cfg.validate()
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    outs = _Outputs(root)
    stage = "config"
    try:
        stage = "libraries"
        alib, plib = load_libraries(cfg)

        stage = "ingest"
        events, rejects = ingest.read_events(cfg.events)
        streams = ingest.sessionize(events)
        log.info("ingest: %d events, %d rejects, %d student-sessions", len(events), len(rejects), len(streams))

        stage = "map"
        mapped = map_streams(streams, alib, plib)
        processes.write_instances(
            ((st, se, inst) for st, se, insts in mapped for inst in insts), outs.path("instances", "instances.csv"))
        ingest.write_rejects(rejects, outs.path("instances", "rejects.csv"))
        write_time_stats(time_stats(mapped), outs.path("process_time", "process_time.csv"))

        stage = "fomm"
        seqs = [fomm.sequence_from_instances(st, se, insts) for st, se, insts in mapped]
        usable = [s for s in seqs if len(s) >= 2]
        if len(usable) < len(seqs):
            log.warning("fomm: %d sequences shorter than 2 excluded", len(seqs) - len(usable))
        fomm.write_matrices(((s.student_id, s.session_id, fomm.build_fomm(s)) for s in usable),
                            outs.path("fomm_matrices", "fomm_matrices.csv"))

        stage = "cluster"
        mixture = cluster.fit_em(usable, int(cfg.k), cfg.em_config())
        assignments = cluster.assign(mixture, usable)
        cluster.write_mixture(mixture, outs.path("mixture", "mixture.json"))
        cluster.write_assignments(assignments, mixture.K, outs.path("assignments", "assignments.csv"))
        bundles = cluster.strategy_report(assignments, usable, mixture.K, float(cfg.threshold))
        write_strategy_graphs(bundles, outs)

        stage = "longitudinal"
        sessions = pick_sessions(cfg, assignments)
        sankey_path = outs.path("sankey", "sankey.json")
        bowker_path = outs.path("bowker", "bowker.csv")
        if sessions is None or mixture.K < 2:
            log.warning("longitudinal: needs two sessions and K >= 2; writing empty results")
            longitudinal.write_sankey({"nodes": [], "links": []}, sankey_path)
            bowker_path.write_text("chi2,df,p,skipped\n", encoding="utf-8")
        else:
            table, result, unmatched = run_longitudinal(assignments, mixture.K, sessions)
            log.info("longitudinal: %d paired students (%d / %d unmatched)",
                     table.total, len(unmatched["s1"]), len(unmatched["s2"]))
            longitudinal.write_sankey(longitudinal.sankey_export(table, sessions=sessions), sankey_path)
            longitudinal.write_bowker(result, bowker_path)

        stage = "outcomes"
        desc_path = outs.path("descriptives", "descriptives.csv")
        pair_path = outs.path("pairwise", "pairwise.csv")
        if cfg.outcomes:
            records = outcomes.read_outcomes(cfg.outcomes, cfg.session_max)
            kept, excluded = outcomes.filter_complete(records)
            log.info("outcomes: %d complete, %d excluded", len(kept), len(excluded))
            outcomes.write_descriptives(outcomes.describe(kept, assignments, list(range(mixture.K))), desc_path)
            outcomes.write_pairwise(outcomes.compare_all(kept, assignments), pair_path)
        else:
            outcomes.write_descriptives([], desc_path)
            outcomes.write_pairwise([], pair_path)

        stage = "manifest"
        manifest = outs.manifest()
        (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return manifest
    except ConfigError:
        outs.mark_partial()
        raise
    except Exception as exc:
        outs.mark_partial()
        raise StageError(stage, exc) from exc
