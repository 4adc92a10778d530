"""Rule engine turning raw event streams into labelled learning actions.

An action library is an ordered list of rules; the first rule whose
predicate accepts an event owns it. Consecutive events owned by the same
rule merge into one action while the gap between them stays within the
rule's ``idle_gap_ms``.

Dwell-only rules describe presence without input (an essay window left open
without typing). Such a rule owns its opening event only when no mouse or
keyboard input on the same target follows within the rule's idle gap. When
input does follow, the opening event is folded into the action that the
input produces, so every event is still covered exactly once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from trace_strategist.ingest import STREAMS, EventStream, RawEvent

UNMAPPED_ACTION = "UNMAPPED_ACTION"
DEFAULT_IDLE_GAP_MS = 5000
DEFAULT_MIN_DURATION_MS = 0

_UNMAPPED = -1
_ABSORBED = -2
_INPUT_STREAMS = frozenset({"mouse", "keyboard"})


class LibraryError(ValueError):
    """Invalid action or process library configuration."""


@dataclass(frozen=True)
class ActionRule:
    action_label: str
    streams: Optional[frozenset[str]] = None
    kinds: Optional[frozenset[str]] = None
    target_pattern: Optional[str] = None
    idle_gap_ms: int = DEFAULT_IDLE_GAP_MS
    min_duration_ms: int = DEFAULT_MIN_DURATION_MS
    dwell_only: bool = False
    _target_re: Optional[re.Pattern] = field(default=None, repr=False, compare=False)

    def matches(self, stream: str, kind: str, target: str) -> bool:
        if self.streams is not None and stream not in self.streams:
            return False
        if self.kinds is not None and kind not in self.kinds:
            return False
        if self._target_re is not None and self._target_re.fullmatch(target) is None:
            return False
        return True


@dataclass
class ActionLibrary:
    rules: list[ActionRule]
    version: str = "unversioned"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def labels(self) -> list[str]:
        return [r.action_label for r in self.rules]

    @property
    def alphabet(self) -> frozenset[str]:
        return frozenset(self.labels) | {UNMAPPED_ACTION}

    def __len__(self) -> int:
        return len(self.rules)

    def candidates(self, event: RawEvent) -> tuple[int, ...]:
        """Indices of rules whose predicate accepts the event, in precedence order."""
        key = (event.stream, event.kind, event.target)
        hit = self._cache.get(key)
        if hit is None:
            hit = tuple(i for i, r in enumerate(self.rules) if r.matches(*key))
            self._cache[key] = hit
        return hit


@dataclass(frozen=True)
class LearningAction:
    label: str
    start_ms: int
    end_ms: int
    source_span: tuple[int, int]  # half-open indices into the event stream
    target: str = ""

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


def _as_set(value: Any, name: str, rule_label: str) -> Optional[frozenset[str]]:
    if value is None:
        return None
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise LibraryError(f"rule {rule_label}: {name} must be a string or list of strings")
    return frozenset(value)


def _load_config(config: Union[str, Mapping, None]) -> Mapping:
    if config is None:
        return {}
    if isinstance(config, Mapping):
        return config
    try:
        data = yaml.safe_load(config)
    except yaml.YAMLError as exc:
        raise LibraryError(f"library config is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if isinstance(data, list):
        return {"rules": data}
    if not isinstance(data, Mapping):
        raise LibraryError("library config must be a mapping")
    return data


def compile_library(config: Union[str, Mapping, None]) -> ActionLibrary:
    """Compile YAML text (or an already-decoded mapping) into an ActionLibrary."""
    data = _load_config(config)
    defaults = data.get("defaults") or {}
    seen: set[str] = set()
    rules = []
    for i, entry in enumerate(data.get("rules") or []):
        if not isinstance(entry, Mapping):
            raise LibraryError(f"rule #{i} is not a mapping")
        label = entry.get("label") or entry.get("action_label")
        if not isinstance(label, str) or not label:
            raise LibraryError(f"rule #{i} has no label")
        if label == UNMAPPED_ACTION:
            raise LibraryError(f"rule {label}: label is reserved")
        if label in seen:
            raise LibraryError(f"duplicate action label {label}")
        seen.add(label)
        streams = _as_set(entry.get("streams", entry.get("stream")), "streams", label)
        if streams is not None and not streams <= set(STREAMS):
            raise LibraryError(f"rule {label}: unknown stream in {sorted(streams)}")
        kinds = _as_set(entry.get("kinds", entry.get("kind")), "kinds", label)
        pattern = entry.get("target")
        target_re = None
        if pattern is not None:
            try:
                target_re = re.compile(str(pattern))
            except re.error as exc:
                raise LibraryError(f"rule {label}: malformed target pattern {pattern!r}: {exc}") from exc
        gap = entry.get("idle_gap_ms", defaults.get("idle_gap_ms", DEFAULT_IDLE_GAP_MS))
        min_dur = entry.get("min_duration_ms", defaults.get("min_duration_ms", DEFAULT_MIN_DURATION_MS))
        for name, val in (("idle_gap_ms", gap), ("min_duration_ms", min_dur)):
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise LibraryError(f"rule {label}: {name} must be a non-negative integer, got {val!r}")
        rules.append(
            ActionRule(
                action_label=label,
                streams=streams,
                kinds=kinds,
                target_pattern=None if pattern is None else str(pattern),
                idle_gap_ms=gap,
                min_duration_ms=min_dur,
                dwell_only=bool(entry.get("dwell_only", False)),
                _target_re=target_re,
            )
        )
    return ActionLibrary(rules=rules, version=str(data.get("version", "unversioned")))


def load_library(path: Union[str, Path]) -> ActionLibrary:
    return compile_library(Path(path).read_text(encoding="utf-8"))


def default_action_library() -> ActionLibrary:
    text = resources.files("trace_strategist.data").joinpath("action_library.yaml").read_text("utf-8")
    return compile_library(text)


def _owner(events: list[RawEvent], i: int, lib: ActionLibrary) -> int:
    ev = events[i]
    nxt = events[i + 1] if i + 1 < len(events) else None
    for idx in lib.candidates(ev):
        rule = lib.rules[idx]
        if not rule.dwell_only:
            return idx
        typed = (
            nxt is not None
            and nxt.stream in _INPUT_STREAMS
            and nxt.target == ev.target
            and nxt.timestamp - ev.timestamp <= rule.idle_gap_ms
        )
        return _ABSORBED if typed else idx
    return _UNMAPPED


def map_actions(stream: Union[EventStream, list[RawEvent]], lib: ActionLibrary) -> list[LearningAction]:
    """Label a time-sorted event stream with actions from ``lib``."""
    events = stream.events if isinstance(stream, EventStream) else stream
    n = len(events)
    owners = [_owner(events, i, lib) for i in range(n)]
    actions: list[LearningAction] = []
    i = 0
    while i < n:
        first = i
        while owners[i] == _ABSORBED:  # last event can never be absorbed
            i += 1
        owner = owners[i]
        start = i
        if owner == _UNMAPPED:
            end = i + 1
        else:
            gap = lib.rules[owner].idle_gap_ms
            end = i + 1
            while (
                end < n
                and owners[end] == owner
                and events[end].timestamp - events[end - 1].timestamp <= gap
            ):
                end += 1
        start_ms = events[first].timestamp
        end_ms = events[end - 1].timestamp
        if owner == _UNMAPPED:
            label = UNMAPPED_ACTION
        else:
            rule = lib.rules[owner]
            label = rule.action_label
            if rule.dwell_only and end < n:
                end_ms = events[end].timestamp  # presence lasts until the next event
            if end_ms - start_ms < rule.min_duration_ms:
                label = UNMAPPED_ACTION
        actions.append(LearningAction(label, start_ms, end_ms, (first, end), events[start].target))
        i = end
    return actions
