"""Learning-outcome normalization, descriptives and pairwise strategy comparisons.

Pairwise comparisons regress the outcome on a single indicator for the
second strategy of the pair, so the coefficient is ``mean_b - mean_a``.
Cohen's d is reported as ``(mean_a - mean_b) / pooled_sd``; with this
convention a positive coefficient comes with a negative d.
"""

from __future__ import annotations

import csv
import itertools
import math
import statistics
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from scipy import stats

from trace_strategist.cluster import Assignment

OUTCOMES = ("essay", "pre", "post")
DEFAULT_SESSION_MAX = {"S1": 15.0, "S2": 10.0}
ESSAY_MAX = 15.0


class OutcomeError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeRecord:
    student_id: str
    session_id: str
    pre_raw: Optional[float] = None
    post_raw: Optional[float] = None
    essay_score: Optional[float] = None
    pre_norm: Optional[float] = None
    post_norm: Optional[float] = None

    @property
    def complete(self) -> bool:
        return None not in (self.pre_raw, self.post_raw, self.essay_score)

    def value(self, outcome: str) -> Optional[float]:
        if outcome == "essay":
            return self.essay_score
        if outcome == "pre":
            return self.pre_norm
        if outcome == "post":
            return self.post_norm
        raise OutcomeError(f"unknown outcome {outcome!r}")


@dataclass(frozen=True)
class PairwiseResult:
    outcome: str
    pair: tuple[int, int]
    coef: float
    t: float
    p: float
    p_corrected: float
    cohen_d: float
    ci_low: float
    ci_high: float
    n_a: int = 0
    n_b: int = 0

    @property
    def correction_flips(self) -> bool:
        """Significant at 0.05 before correction but not after."""
        return self.p < 0.05 <= self.p_corrected


def normalize(record: OutcomeRecord, session_max_map: Mapping[str, float] = DEFAULT_SESSION_MAX) -> OutcomeRecord:
    if record.session_id not in session_max_map:
        raise OutcomeError(f"no maximum score configured for session {record.session_id}")
    top = float(session_max_map[record.session_id])
    norms = {}
    for name in ("pre", "post"):
        raw = getattr(record, f"{name}_raw")
        if raw is None:
            norms[f"{name}_norm"] = None
            continue
        if not 0 <= raw <= top:
            raise OutcomeError(f"student {record.student_id}: {name}_raw {raw} outside [0, {top}]")
        norms[f"{name}_norm"] = raw / top
    if record.essay_score is not None and not 0 <= record.essay_score <= ESSAY_MAX:
        raise OutcomeError(f"student {record.student_id}: essay_score {record.essay_score} outside [0, {ESSAY_MAX}]")
    return replace(record, **norms)


def filter_complete(records: Sequence[OutcomeRecord]):
    """Split into complete records and a report of what the others lack."""
    kept, excluded = [], []
    for r in records:
        missing = [name for name, v in (("pre", r.pre_raw), ("post", r.post_raw), ("essay", r.essay_score)) if v is None]
        if missing:
            excluded.append({"student_id": r.student_id, "session_id": r.session_id, "missing": ",".join(missing)})
        else:
            kept.append(r)
    return kept, excluded


def _join(records: Sequence[OutcomeRecord], assignments: Sequence[Assignment]) -> list[tuple[int, OutcomeRecord]]:
    clusters = {(a.student_id, a.session_id): a.cluster for a in assignments}
    return [(clusters[(r.student_id, r.session_id)], r) for r in records if (r.student_id, r.session_id) in clusters]


def describe(
    records: Sequence[OutcomeRecord],
    assignments: Sequence[Assignment],
    strategies: Optional[Sequence[int]] = None,
    by_session: bool = False,
) -> list[dict]:
    """n, mean and sample SD per (strategy, outcome), sessions pooled by default."""
    joined = _join(records, assignments)
    if strategies is None:
        strategies = sorted({a.cluster for a in assignments})
    sessions = sorted({r.session_id for _, r in joined}) if by_session else [None]
    rows = []
    for session in sessions:
        for k in strategies:
            for outcome in OUTCOMES:
                vals = [
                    r.value(outcome) for c, r in joined
                    if c == k and (session is None or r.session_id == session) and r.value(outcome) is not None
                ]
                row = {"strategy": k, "outcome": outcome, "n": len(vals),
                       "mean": statistics.fmean(vals) if vals else None,
                       "sd": statistics.stdev(vals) if len(vals) > 1 else None}
                if by_session:
                    row = {"session": session, **row}
                rows.append(row)
    return rows


def compare_groups(a: Sequence[float], b: Sequence[float], confidence: float = 0.95):
    """Pooled-variance comparison of two samples.

    Returns (coef, se, t, df, p, d, ci_low, ci_high) where coef = mean(b) - mean(a).
    """
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise OutcomeError("both groups must be non-empty")
    if na + nb < 3:
        raise OutcomeError("need at least three observations for a pooled variance")
    ma, mb = math.fsum(a) / na, math.fsum(b) / nb
    ss = math.fsum((x - ma) ** 2 for x in a) + math.fsum((x - mb) ** 2 for x in b)
    df = na + nb - 2
    pooled_var = ss / df
    if pooled_var == 0:
        raise OutcomeError("degenerate variance")
    se = math.sqrt(pooled_var * (1.0 / na + 1.0 / nb))
    coef = mb - ma
    t = coef / se
    p = float(2.0 * stats.t.sf(abs(t), df))
    crit = float(stats.t.ppf(0.5 + confidence / 2.0, df))
    d = (ma - mb) / math.sqrt(pooled_var)
    return coef, se, t, df, p, d, coef - crit * se, coef + crit * se


def _groups(records, assignments, outcome, pair):
    joined = _join(records, assignments)
    ga = [r.value(outcome) for c, r in joined if c == pair[0] and r.value(outcome) is not None]
    gb = [r.value(outcome) for c, r in joined if c == pair[1] and r.value(outcome) is not None]
    return ga, gb


def pairwise_compare(
    records: Sequence[OutcomeRecord],
    assignments: Sequence[Assignment],
    outcome: str,
    pair: tuple[int, int],
    m: int = 3,
    confidence: float = 0.95,
) -> PairwiseResult:
    """Compare strategy pair[1] against pair[0]; Bonferroni factor ``m``."""
    if outcome not in OUTCOMES:
        raise OutcomeError(f"unknown outcome {outcome!r}")
    ga, gb = _groups(records, assignments, outcome, pair)
    coef, _, t, _, p, d, lo, hi = compare_groups(ga, gb, confidence)
    return PairwiseResult(outcome, tuple(pair), coef, t, p, bonferroni(p, m), d, lo, hi, len(ga), len(gb))


def bonferroni(p: float, m: int) -> float:
    return min(1.0, p * m)


def compare_all(records: Sequence[OutcomeRecord], assignments: Sequence[Assignment]) -> list[PairwiseResult]:
    present = sorted({c for c, _ in _join(records, assignments)})
    if len(present) < 2:
        warnings.warn("fewer than two strategies present; no pairwise comparisons", stacklevel=2)
        return []
    pairs = list(itertools.combinations(present, 2))
    results = []
    for outcome in OUTCOMES:
        for pair in pairs:
            try:
                results.append(pairwise_compare(records, assignments, outcome, pair, m=len(pairs)))
            except OutcomeError as exc:
                warnings.warn(f"{outcome} {pair}: skipped ({exc})", stacklevel=2)
    return results


def read_outcomes(path: Union[str, Path], session_max_map: Mapping[str, float] = DEFAULT_SESSION_MAX) -> list[OutcomeRecord]:
    """Read outcomes CSV (blank cells are missing) and normalize each record."""
    def num(v):
        v = (v or "").strip()
        return float(v) if v else None

    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rec = OutcomeRecord(row["student_id"], row["session_id"], num(row.get("pre_raw")),
                                num(row.get("post_raw")), num(row.get("essay_score")))
            out.append(normalize(rec, session_max_map))
    return out


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, float) else v


def write_descriptives(rows: Sequence[dict], path: Union[str, Path]) -> None:
    cols = list(rows[0].keys()) if rows else ["strategy", "outcome", "n", "mean", "sd"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


PAIRWISE_COLUMNS = ["Outcome", "Pair", "Coef", "t", "P", "Corrected P", "Cohen's d", "CI low", "CI high", "Correction flips"]


def write_pairwise(results: Sequence[PairwiseResult], path: Union[str, Path], names: Optional[Mapping[int, str]] = None) -> None:
    def name(k):
        return names[k] if names and k in names else f"S{k + 1}"

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRWISE_COLUMNS)
        for r in results:
            w.writerow([r.outcome, f"{name(r.pair[0])} vs {name(r.pair[1])}", repr(r.coef), repr(r.t), repr(r.p),
                        repr(r.p_corrected), repr(r.cohen_d), repr(r.ci_low), repr(r.ci_high), int(r.correction_flips)])
