"""Pattern library mapping learning-action sequences onto SRL processes.

Matching is a greedy left-to-right scan over contiguous actions. At each
position the longest matching pattern wins (config order breaks ties); if no
pattern matches, the single action becomes a ``No_Process`` instance.

Reading patterns can be conditioned on visit history: ``visit: first``
only fires when the target of the pattern's first action has not been seen
earlier in the session, ``visit: repeat`` only when it has.
"""

from __future__ import annotations

import csv
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import yaml

from trace_strategist.actions import ActionLibrary, LearningAction, LibraryError, UNMAPPED_ACTION
from trace_strategist.labels import NO_PROCESS, PROCESS_ALPHABET, parse_label

DEFAULT_WITHIN_GAP_MS = 10000
VISIT_MODES = ("any", "first", "repeat")
FALLBACK = "fallback"


@dataclass(frozen=True)
class ProcessPattern:
    pattern_id: str
    sequence: tuple[str, ...]
    # one entry per adjacent pair; None = immediate, int = max gap in ms
    gaps: tuple[Optional[int], ...]
    emits: str
    bidirectional: bool = False
    visit: str = "any"

    def __len__(self) -> int:
        return len(self.sequence)

    def orientations(self):
        yield self.sequence, self.gaps
        if self.bidirectional and len(self.sequence) > 1:
            rev = tuple(reversed(self.sequence))
            if rev != self.sequence:
                yield rev, tuple(reversed(self.gaps))


@dataclass(frozen=True)
class ProcessInstance:
    label: str
    start_ms: int
    end_ms: int
    matched_pattern: str
    action_span: tuple[int, int]  # half-open indices into the action list

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


def _parse_gaps(entry: Mapping, n_pairs: int, default_gap: int, pid: str) -> tuple[Optional[int], ...]:
    adj = entry.get("adjacency", "within_gap")
    gap = entry.get("within_gap_ms", default_gap)
    modes = adj if isinstance(adj, list) else [adj] * n_pairs
    if len(modes) != n_pairs:
        raise LibraryError(f"pattern {pid}: adjacency list needs {n_pairs} entries")
    out = []
    for mode in modes:
        if mode == "immediate":
            out.append(None)
        elif mode == "within_gap":
            if not isinstance(gap, int) or gap < 0:
                raise LibraryError(f"pattern {pid}: within_gap_ms must be a non-negative integer")
            out.append(gap)
        else:
            raise LibraryError(f"pattern {pid}: unknown adjacency {mode!r}")
    return tuple(out)


def compile_process_library(config, action_library: Optional[ActionLibrary] = None) -> list[ProcessPattern]:
    """Compile a process library; the result is already in precedence order."""
    if isinstance(config, Mapping):
        data = config
    else:
        try:
            data = yaml.safe_load(config) or {}
        except yaml.YAMLError as exc:
            raise LibraryError(f"process library is not valid YAML: {exc}") from exc
    if isinstance(data, list):
        data = {"patterns": data}
    defaults = data.get("defaults") or {}
    default_gap = defaults.get("within_gap_ms", DEFAULT_WITHIN_GAP_MS)
    known = action_library.alphabet if action_library is not None else None
    patterns = []
    seen = set()
    for i, entry in enumerate(data.get("patterns") or []):
        pid = str(entry.get("id", entry.get("pattern_id", f"pattern_{i}")))
        if pid in seen:
            raise LibraryError(f"duplicate pattern id {pid}")
        seen.add(pid)
        seq = entry.get("sequence")
        if isinstance(seq, str):
            seq = [seq]
        if not seq:
            raise LibraryError(f"pattern {pid}: empty sequence")
        if known is not None:
            for lab in seq:
                if lab not in known:
                    raise LibraryError(f"pattern {pid}: unknown action label {lab}")
        try:
            emits = parse_label(str(entry.get("emits")))
        except ValueError as exc:
            raise LibraryError(f"pattern {pid}: {exc}") from None
        if emits == NO_PROCESS:
            raise LibraryError(f"pattern {pid}: may not emit {NO_PROCESS}")
        visit = entry.get("visit", "any")
        if visit not in VISIT_MODES:
            raise LibraryError(f"pattern {pid}: visit must be one of {VISIT_MODES}")
        patterns.append(
            ProcessPattern(
                pattern_id=pid,
                sequence=tuple(seq),
                gaps=_parse_gaps(entry, len(seq) - 1, default_gap, pid),
                emits=emits,
                bidirectional=bool(entry.get("bidirectional", False)),
                visit=visit,
            )
        )
    # stable sort keeps config order among equal lengths
    return sorted(patterns, key=lambda p: -len(p))


def load_process_library(path: Union[str, Path], action_library: Optional[ActionLibrary] = None):
    return compile_process_library(Path(path).read_text(encoding="utf-8"), action_library)


def default_process_library(action_library: Optional[ActionLibrary] = None) -> list[ProcessPattern]:
    text = resources.files("trace_strategist.data").joinpath("process_library.yaml").read_text("utf-8")
    return compile_process_library(text, action_library)


def _match_at(actions: Sequence[LearningAction], i: int, pattern: ProcessPattern, visited: set) -> bool:
    n = len(pattern)
    if i + n > len(actions):
        return False
    if pattern.visit != "any":
        seen = actions[i].target in visited
        if seen != (pattern.visit == "repeat"):
            return False
    for seq, gaps in pattern.orientations():
        if all(actions[i + k].label == seq[k] for k in range(n)) and all(
            gap is None or actions[i + k + 1].start_ms - actions[i + k].end_ms <= gap
            for k, gap in enumerate(gaps)
        ):
            return True
    return False


def map_processes(actions: Sequence[LearningAction], patterns: Sequence[ProcessPattern]) -> list[ProcessInstance]:
    """Greedy longest-match scan; ``patterns`` must be in precedence order."""
    by_first: dict[str, list[ProcessPattern]] = defaultdict(list)
    for p in patterns:
        heads = {p.sequence[0]}
        if p.bidirectional:
            heads.add(p.sequence[-1])
        for h in heads:
            by_first[h].append(p)
    # by_first lists inherit precedence order from ``patterns``
    out: list[ProcessInstance] = []
    visited: set[str] = set()
    i = 0
    n = len(actions)
    while i < n:
        hit = None
        if actions[i].label != UNMAPPED_ACTION:
            for p in by_first.get(actions[i].label, ()):
                if _match_at(actions, i, p, visited):
                    hit = p
                    break
        span = len(hit) if hit else 1
        label, pid = (hit.emits, hit.pattern_id) if hit else (NO_PROCESS, FALLBACK)
        out.append(ProcessInstance(label, actions[i].start_ms, actions[i + span - 1].end_ms, pid, (i, i + span)))
        for a in actions[i : i + span]:
            visited.add(a.target)
        i += span
    return out


def process_time_stats(instances_by_session: Mapping[str, Mapping[str, Iterable[ProcessInstance]]]) -> list[dict]:
    """Mean and SD of minutes per process, across students, within each session.

    ``instances_by_session`` maps session id -> student id -> instances.
    Students who never enact a process contribute zero minutes to it.
    """
    rows = []
    for session in sorted(instances_by_session):
        students = instances_by_session[session]
        if not students:
            continue
        totals = {lab: [] for lab in PROCESS_ALPHABET}
        for student in sorted(students):
            per = defaultdict(int)
            for inst in students[student]:
                if inst.label != NO_PROCESS:
                    per[inst.label] += inst.duration_ms
            for lab in PROCESS_ALPHABET:
                totals[lab].append(per[lab] / 60000.0)
        for lab in PROCESS_ALPHABET:
            vals = totals[lab]
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            rows.append({
                "process": lab,
                "session": session,
                "n": len(vals),
                "mean_minutes": math.fsum(vals) / len(vals),
                "sd_minutes": sd,
            })
    return rows


INSTANCE_COLUMNS = ["student_id", "session_id", "label", "start_ms", "end_ms", "pattern_id"]


def write_instances(rows: Iterable[tuple[str, str, ProcessInstance]], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INSTANCE_COLUMNS)
        for student, session, inst in rows:
            w.writerow([student, session, inst.label, inst.start_ms, inst.end_ms, inst.matched_pattern])


def read_instances(path: Union[str, Path]) -> dict[tuple[str, str], list[ProcessInstance]]:
    """Read an instances CSV back, keyed by (student, session) in file order."""
    out: dict[tuple[str, str], list[ProcessInstance]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["student_id"], row["session_id"])
            lst = out.setdefault(key, [])
            lst.append(ProcessInstance(row["label"], int(row["start_ms"]), int(row["end_ms"]), row["pattern_id"], (-1, -1)))
    return out
