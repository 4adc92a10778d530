"""First-order Markov models over SRL process sequences.

Every model is laid out on :data:`PROCESS_ALPHABET` unless it has been
summarized, in which case it lives on the reduced alphabet of surviving
processes. Per-student models are not smoothed: a state that is never left
keeps an all-zero row.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from trace_strategist.labels import NO_PROCESS, PROCESS_ALPHABET
from trace_strategist.processes import ProcessInstance


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessSequence:
    student_id: str
    session_id: str
    labels: tuple[str, ...]
    durations: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def key(self) -> tuple[str, str]:
        return (self.student_id, self.session_id)


@dataclass
class TransitionModel:
    alphabet: tuple[str, ...]
    counts: np.ndarray
    probs: np.ndarray
    initial: np.ndarray
    n_transitions: int
    # label paths the counts came from; lets summarization bridge exactly
    paths: Optional[tuple[tuple[str, ...], ...]] = field(default=None, repr=False)

    def prob(self, src: str, dst: str) -> float:
        return float(self.probs[self.alphabet.index(src), self.alphabet.index(dst)])

    @property
    def zero_rows(self) -> list[str]:
        return [lab for lab, row in zip(self.alphabet, self.counts) if row.sum() == 0]


def sequence_from_instances(student_id: str, session_id: str, instances: Iterable[ProcessInstance]) -> ProcessSequence:
    """Drop No_Process instances and keep the rest, in order, with durations."""
    kept = [i for i in instances if i.label != NO_PROCESS]
    return ProcessSequence(
        student_id, session_id, tuple(i.label for i in kept), tuple(i.duration_ms for i in kept)
    )


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    sums = counts.sum(axis=1, keepdims=True).astype(float)
    out = np.zeros(counts.shape, dtype=float)
    np.divide(counts, sums, out=out, where=sums > 0)
    return out


def _count(paths: Sequence[Sequence[str]], alphabet: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    index = {lab: i for i, lab in enumerate(alphabet)}
    n = len(alphabet)
    counts = np.zeros((n, n), dtype=np.int64)
    first = np.zeros(n, dtype=np.int64)
    for path in paths:
        try:
            idx = [index[lab] for lab in path]
        except KeyError as exc:
            raise ModelError(f"label {exc.args[0]!r} is not in the model alphabet") from None
        if not idx:
            continue
        first[idx[0]] += 1
        if len(idx) > 1:
            np.add.at(counts, (idx[:-1], idx[1:]), 1)
    return counts, first


def _from_paths(paths: Sequence[Sequence[str]], alphabet: Sequence[str]) -> TransitionModel:
    counts, first = _count(paths, alphabet)
    total_first = first.sum()
    initial = first / total_first if total_first else np.zeros(len(alphabet))
    return TransitionModel(
        alphabet=tuple(alphabet),
        counts=counts,
        probs=_normalize_rows(counts),
        initial=initial,
        n_transitions=int(counts.sum()),
        paths=tuple(tuple(p) for p in paths),
    )


def build_fomm(seq: Union[ProcessSequence, Sequence[str]]) -> TransitionModel:
    labels = seq.labels if isinstance(seq, ProcessSequence) else tuple(seq)
    if len(labels) < 2:
        raise ModelError("sequence too short for transitions")
    if NO_PROCESS in labels:
        raise ModelError(f"{NO_PROCESS} must be filtered before modelling")
    return _from_paths([labels], PROCESS_ALPHABET)


def pooled_fomm(seqs: Sequence[Union[ProcessSequence, Sequence[str]]]) -> TransitionModel:
    """Model whose counts are the sum of the members' counts."""
    paths = [s.labels if isinstance(s, ProcessSequence) else tuple(s) for s in seqs]
    if not paths:
        raise ModelError("no sequences to pool")
    return _from_paths(paths, PROCESS_ALPHABET)


def relative_frequencies(seqs: Sequence[Union[ProcessSequence, Sequence[str]]]) -> dict[str, float]:
    """Share of each process among all pooled instances (present labels only)."""
    tally: Counter = Counter()
    for s in seqs:
        tally.update(s.labels if isinstance(s, ProcessSequence) else s)
    tally.pop(NO_PROCESS, None)
    total = sum(tally.values())
    if not total:
        raise ModelError("relative frequencies of an empty sequence set")
    return {lab: tally[lab] / total for lab in PROCESS_ALPHABET if tally[lab]}


def _bridge_counts(model: TransitionModel, keep: list[int]) -> np.ndarray:
    """Redistribute flow through removed states when no label paths are available.

    Flow entering a removed state leaves it in proportion to that state's
    outgoing counts, following chains of removed states (absorbing-chain
    fundamental matrix). Mass that can never re-enter a kept state is lost.
    """
    n = len(model.alphabet)
    drop = [i for i in range(n) if i not in keep]
    P = _normalize_rows(model.counts)
    C = model.counts.astype(float)
    out = C[np.ix_(keep, keep)].copy()
    if drop:
        Q = P[np.ix_(drop, drop)]
        R = P[np.ix_(drop, keep)]
        fundamental = np.linalg.solve(np.eye(len(drop)) - Q, R)
        out += C[np.ix_(keep, drop)] @ fundamental
    return out


def summarize_model(model: TransitionModel, freqs: Mapping[str, float], threshold: float = 0.10) -> TransitionModel:
    """Remove rare processes and bridge transitions through them.

    A path a -> x -> b with x removed contributes a -> b. When the model still
    carries its label paths this is exact: the result equals the model of the
    reduced paths.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ModelError(f"threshold must lie in [0, 1], got {threshold}")
    keep_labels = [lab for lab in model.alphabet if freqs.get(lab, 0.0) >= threshold]
    if not keep_labels:
        raise ModelError("empty summarized model")
    if len(keep_labels) == len(model.alphabet):
        return replace(model)
    if model.paths is not None:
        kept = set(keep_labels)
        reduced = [tuple(lab for lab in p if lab in kept) for p in model.paths]
        return _from_paths(reduced, keep_labels)
    keep = [model.alphabet.index(lab) for lab in keep_labels]
    counts = _bridge_counts(model, keep)
    init = model.initial[keep]
    return TransitionModel(
        alphabet=tuple(keep_labels),
        counts=counts,
        probs=_normalize_rows(counts),
        initial=init / init.sum() if init.sum() > 0 else init,
        n_transitions=int(round(counts.sum())),
    )


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_graph(model: TransitionModel, labels_meta: Optional[Mapping[str, float]] = None, name: str = "fomm") -> str:
    """Render a model as a DOT digraph.

    ``labels_meta`` maps process -> relative frequency shown on its node.
    Zero-probability edges are omitted.
    """
    lines = [f"digraph {_dot_quote(name)} {{", "  rankdir=LR;", "  node [shape=box];"]
    for lab in model.alphabet:
        text = lab
        if labels_meta and lab in labels_meta:
            text += f"\\n{100.0 * labels_meta[lab]:.1f}%"
        lines.append(f"  {_dot_quote(lab)} [label={_dot_quote(text)}];")
    for i, src in enumerate(model.alphabet):
        for j, dst in enumerate(model.alphabet):
            p = model.probs[i, j]
            if p > 0:
                lines.append(f"  {_dot_quote(src)} -> {_dot_quote(dst)} [label={_dot_quote(f'{p:.2f}')}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_matrices(models: Iterable[tuple[str, str, TransitionModel]], path: Union[str, Path]) -> None:
    """Wide CSV: one row per (student, session, from_label), one column per to_label."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "session_id", "from_label", *PROCESS_ALPHABET])
        for student, session, model in models:
            for i, src in enumerate(model.alphabet):
                w.writerow([student, session, src, *(repr(float(p)) for p in model.probs[i])])


def read_sequences_from_instances(instances: Mapping[tuple[str, str], Sequence[ProcessInstance]]) -> list[ProcessSequence]:
    return [sequence_from_instances(s, sess, insts) for (s, sess), insts in instances.items()]


def row_sums_ok(probs: np.ndarray, counts: np.ndarray, tol: float = 1e-9) -> bool:
    sums = probs.sum(axis=1)
    active = counts.sum(axis=1) > 0
    return bool(np.all(np.abs(sums[active] - 1.0) <= tol) and np.all(sums[~active] == 0.0)) and math.isfinite(sums.sum())
