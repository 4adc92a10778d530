"""Synthetic ground truth: Markov strategy generators and raw traces that parse back exactly.

Traces are built by realizing each process instance with one pattern from
the process library, then each action of the pattern with a raw-event
template. A separator event (mapped to an action no pattern uses) sits
between consecutive realizations so neither action merging nor multi-action
patterns can span two of them.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import yaml

from trace_strategist.actions import ActionLibrary, default_action_library, map_actions
from trace_strategist.fomm import ProcessSequence, pooled_fomm, sequence_from_instances
from trace_strategist.ingest import RawEvent, sessionize
from trace_strategist.labels import PROCESS_ALPHABET
from trace_strategist.outcomes import DEFAULT_SESSION_MAX, ESSAY_MAX, OutcomeRecord
from trace_strategist.processes import ProcessPattern, default_process_library, map_processes


class SynthError(ValueError):
    pass


@dataclass
class GeneratorProfile:
    name: str
    initial: np.ndarray
    transition: np.ndarray
    length_distribution: tuple[int, int] = (100, 300)
    weight: float = 1.0
    outcome_means: dict = field(default_factory=dict)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        n = len(PROCESS_ALPHABET)
        if self.transition.shape != (n, n) or self.initial.shape != (n,):
            raise SynthError(f"profile {self.name}: expected a {n}-state chain")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9):
            raise SynthError(f"profile {self.name}: transition rows must be probability vectors")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1.0) > 1e-9:
            raise SynthError(f"profile {self.name}: initial must be a probability vector")
        lo, hi = self.length_distribution
        if lo < 2 or hi < lo:
            raise SynthError(f"profile {self.name}: length range must satisfy 2 <= min <= max")
        self.length_distribution = (int(lo), int(hi))


def profiles_from_config(data: Mapping) -> list[GeneratorProfile]:
    out = []
    for p in data.get("profiles", []):
        out.append(GeneratorProfile(
            name=p["name"],
            initial=p["initial"],
            transition=p["transition"],
            length_distribution=tuple(p.get("length", (100, 300))),
            weight=float(p.get("weight", 1.0)),
            outcome_means=dict(p.get("outcomes", {})),
        ))
    return out


def load_profiles(path: Union[str, Path, None] = None) -> list[GeneratorProfile]:
    """Read a profile file; ``None`` or ``"demo"`` gives the bundled three strategies."""
    if path is None or str(path) == "demo":
        text = resources.files("trace_strategist.data").joinpath("profiles.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return profiles_from_config(yaml.safe_load(text))


def _walk(profile: GeneratorProfile, rng: np.random.Generator) -> tuple[str, ...]:
    lo, hi = profile.length_distribution
    length = int(rng.integers(lo, hi + 1))
    init_cdf = np.cumsum(profile.initial)
    cdf = np.cumsum(profile.transition, axis=1)
    u = rng.random(length)
    top = len(PROCESS_ALPHABET) - 1
    state = min(int(np.searchsorted(init_cdf, u[0] * init_cdf[-1], side="right")), top)
    path = [state]
    for t in range(1, length):
        row = cdf[state]
        state = min(int(np.searchsorted(row, u[t] * row[-1], side="right")), top)
        path.append(state)
    return tuple(PROCESS_ALPHABET[s] for s in path)


def sample_sequences(
    profiles: Sequence[GeneratorProfile],
    n: int,
    seed: int = 0,
    sessions: Sequence[str] = ("S1",),
) -> tuple[list[ProcessSequence], list[int]]:
    """Draw ``n`` sequences; returns them with the index of their generating profile.

    Sequence i belongs to student ``i // len(sessions)`` in session
    ``sessions[i % len(sessions)]``.
    """
    if n == 0:
        return [], []
    if not profiles:
        raise SynthError("no profiles given")
    weights = np.array([p.weight for p in profiles], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise SynthError("profile weights must sum to 1")
    wcdf = np.cumsum(weights)
    seqs, truth = [], []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        k = min(int(np.searchsorted(wcdf, rng.random() * wcdf[-1], side="right")), len(profiles) - 1)
        labels = _walk(profiles[k], rng)
        seqs.append(ProcessSequence(f"st{i // len(sessions):04d}", sessions[i % len(sessions)], labels))
        truth.append(k)
    return seqs, truth


@dataclass
class EmissionSpec:
    actions: dict
    separator: dict
    visit_marker: dict
    event_gap_ms: int = 400
    action_gap_ms: int = 1500
    separator_gap_ms: int = 2000


def load_emission_spec(path: Union[str, Path, None] = None) -> EmissionSpec:
    if path is None:
        text = resources.files("trace_strategist.data").joinpath("emission.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return _spec_from_text(text)


@lru_cache(maxsize=8)
def _spec_from_text(text: str) -> EmissionSpec:
    data = yaml.safe_load(text)
    timing = data.get("timing", {})
    return EmissionSpec(
        actions=data["actions"],
        separator=data["separator"],
        visit_marker=data["visit_marker"],
        event_gap_ms=int(timing.get("event_gap_ms", 400)),
        action_gap_ms=int(timing.get("action_gap_ms", 1500)),
        separator_gap_ms=int(timing.get("separator_gap_ms", 2000)),
    )


def default_emission_map(patterns: Optional[Sequence[ProcessPattern]] = None) -> dict[str, list[ProcessPattern]]:
    """Every library pattern is a realization of the process it emits."""
    patterns = default_process_library() if patterns is None else patterns
    out: dict[str, list[ProcessPattern]] = defaultdict(list)
    for p in sorted(patterns, key=lambda p: p.pattern_id):
        out[p.emits].append(p)
    return dict(out)


class _Writer:
    """Accumulates events for one student-session while tracking visited targets."""

    def __init__(self, student, session, spec: EmissionSpec, rng, start_ms, events_range):
        self.student, self.session, self.spec, self.rng = student, session, spec, rng
        self.t = start_ms
        self.events: list[RawEvent] = []
        self.visited: set[str] = set()
        self.visited_pages: list[int] = []
        self.next_page = 1
        self.next_extra = 1
        self.events_range = events_range

    def emit(self, stream, kind, target):
        self.events.append(RawEvent(self.t, self.student, self.session, stream, kind, target))

    def fresh_page(self) -> int:
        page = self.next_page
        self.next_page += 1
        return page

    def action(self, label: str, page: int):
        tpl = self.spec.actions.get(label)
        if tpl is None:
            raise SynthError(f"no raw-event template for action {label}")
        target = tpl["target"].format(page=page, extra=self.next_extra)
        if "{extra}" in tpl["target"]:
            self.next_extra += 1
        lo, hi = tpl.get("events", (1, 1))
        if "rest" in tpl and self.events_range is not None:
            lo, hi = self.events_range
        count = int(self.rng.integers(lo, hi + 1)) if "rest" in tpl else 1
        self.emit(*tpl["first"], target)
        for _ in range(count - 1):
            self.t += self.spec.event_gap_ms
            self.emit(*tpl["rest"], target)
        return target

    def realize(self, pattern: ProcessPattern):
        seq = pattern.sequence
        if pattern.bidirectional and len(seq) > 1 and self.rng.random() < 0.5:
            seq = tuple(reversed(seq))
        head = self.spec.actions.get(seq[0], {}).get("target", "")
        paged = "{page}" in head
        if pattern.visit == "first":
            if not paged and head in self.visited:
                raise SynthError(f"pattern {pattern.pattern_id}: target {head} already visited")
            page = self.fresh_page()
        elif pattern.visit == "repeat":
            if paged:
                if self.visited_pages:
                    page = self.visited_pages[int(self.rng.integers(len(self.visited_pages)))]
                else:
                    page = self.fresh_page()
                    marker = self.spec.visit_marker
                    self.emit(marker["stream"], marker["kind"], head.format(page=page, extra=0))
                    self.visited.add(head.format(page=page, extra=0))
                    self.visited_pages.append(page)
                    self.t += self.spec.event_gap_ms
            else:
                if head not in self.visited:
                    raise SynthError(f"pattern {pattern.pattern_id}: cannot revisit unvisited target {head}")
                page = 0
        elif self.visited_pages and self.rng.random() < 0.5:
            page = self.visited_pages[int(self.rng.integers(len(self.visited_pages)))]
        else:
            page = self.fresh_page()
        for i, label in enumerate(seq):
            if i:
                self.t += self.spec.action_gap_ms
            target = self.action(label, page)
            if target not in self.visited:
                self.visited.add(target)
                if "{page}" in self.spec.actions[label]["target"]:
                    self.visited_pages.append(page)

    def separate(self):
        sep = self.spec.separator
        self.t += self.spec.separator_gap_ms
        self.emit(sep["stream"], sep["kind"], sep["target"])
        self.t += self.spec.separator_gap_ms


def emit_raw_trace(
    seq: ProcessSequence,
    emission_map: Optional[Mapping[str, Sequence[ProcessPattern]]] = None,
    seed: int = 0,
    spec: Optional[EmissionSpec] = None,
    start_ms: int = 0,
    events_range: Optional[tuple[int, int]] = None,
) -> list[RawEvent]:
    """Raw events that the default pipeline maps back onto ``seq``.

    ``events_range`` overrides the per-action event count range for
    templates that allow repeated events.
    """
    emission_map = _bundled()[2] if emission_map is None else emission_map
    spec = spec or load_emission_spec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, _stable_hash(seq.student_id), _stable_hash(seq.session_id)]))
    w = _Writer(seq.student_id, seq.session_id, spec, rng, start_ms, events_range)
    for i, label in enumerate(seq.labels):
        options = emission_map.get(label)
        if not options:
            raise SynthError(f"process {label} has no realization in the emission map")
        if i:
            w.separate()
        w.realize(options[int(rng.integers(len(options)))])
    return w.events


@lru_cache(maxsize=1)
def _bundled():
    # parsing the bundled YAML dominates short traces, so do it once
    alib = default_action_library()
    plib = default_process_library(alib)
    return alib, plib, default_emission_map(plib)


def _stable_hash(text: str) -> int:
    # builtin hash() is salted per process
    h = 2166136261
    for ch in text.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def parse_trace(events: Sequence[RawEvent], action_library: Optional[ActionLibrary] = None,
                patterns: Optional[Sequence[ProcessPattern]] = None) -> list[ProcessSequence]:
    """Run the event -> action -> process chain; one sequence per student-session."""
    lib = action_library or _bundled()[0]
    pats = patterns if patterns is not None else (_bundled()[1] if action_library is None else default_process_library(lib))
    out = []
    for stream in sessionize(events):
        instances = map_processes(map_actions(stream, lib), pats)
        out.append(sequence_from_instances(stream.student_id, stream.session_id, instances))
    return out


def sample_outcomes(
    seqs: Sequence[ProcessSequence],
    truth: Sequence[int],
    profiles: Sequence[GeneratorProfile],
    seed: int = 0,
    missing_rate: float = 0.0,
    session_max_map: Mapping[str, float] = DEFAULT_SESSION_MAX,
) -> list[OutcomeRecord]:
    """Raw test and essay scores centred on each generator's outcome means."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    out = []
    for seq, k in zip(seqs, truth):
        means = profiles[k].outcome_means
        top = float(session_max_map.get(seq.session_id, 10.0))

        def draw(mean, sd, hi):
            return float(np.clip(round(rng.normal(mean, sd)), 0, hi))

        pre = draw(means.get("pre", 0.5) * top, 0.12 * top, top)
        post = draw(means.get("post", 0.7) * top, 0.12 * top, top)
        essay = draw(means.get("essay", 10.0), 2.0, ESSAY_MAX)
        if rng.random() < missing_rate:
            post = None
        out.append(OutcomeRecord(seq.student_id, seq.session_id, pre, post, essay))
    return out


def write_truth(seqs: Sequence[ProcessSequence], truth: Sequence[int], profiles: Sequence[GeneratorProfile], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "session_id", "profile_index", "profile"])
        for s, k in zip(seqs, truth):
            w.writerow([s.student_id, s.session_id, k, profiles[k].name])


def write_outcomes(records: Sequence[OutcomeRecord], path) -> None:
    def cell(v):
        if v is None:
            return ""
        return str(int(v)) if float(v).is_integer() else repr(float(v))

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "session_id", "pre_raw", "post_raw", "essay_score"])
        for r in records:
            w.writerow([r.student_id, r.session_id, cell(r.pre_raw), cell(r.post_raw), cell(r.essay_score)])


def empirical_transitions(seqs: Sequence[ProcessSequence]) -> np.ndarray:
    """Pooled row-normalized transition frequencies (rows with no data stay zero)."""
    return pooled_fomm(seqs).probs


def demo_dataset(n_students: int = 90, seed: int = 7, sessions=("S1", "S2"), profiles=None):
    """Sequences for every student in every session, plus ground-truth profile indices."""
    profiles = profiles or load_profiles()
    return sample_sequences(profiles, n_students * len(sessions), seed, sessions)
