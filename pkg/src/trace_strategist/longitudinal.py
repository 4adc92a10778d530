"""Cross-session strategy consistency: pairing, contingency tables, symmetry test, Sankey data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from trace_strategist.cluster import Assignment


class LongitudinalError(ValueError):
    pass


@dataclass(frozen=True)
class PairedAssignment:
    student_id: str
    cluster_s1: int
    cluster_s2: int


@dataclass
class ContingencyTable:
    k: int
    cells: np.ndarray  # rows: first-session strategy, cols: second-session strategy

    @property
    def total(self) -> int:
        return int(self.cells.sum())


@dataclass
class SymmetryTestResult:
    chi2: float
    df: int
    p_value: float
    skipped_pairs: list[tuple[int, int]] = field(default_factory=list)
    degenerate: bool = False  # df == 0, p set to 1 by convention
    exact_p: Optional[float] = None  # exact binomial McNemar p, k == 2 only


def pair_assignments(assignments_s1: Sequence[Assignment], assignments_s2: Sequence[Assignment]):
    """Inner join on student id.

    Returns (pairs, unmatched) where unmatched maps "s1"/"s2" to the student
    ids present in only that session.
    """
    def index(rows, which):
        out = {}
        for a in rows:
            if a.student_id in out:
                raise LongitudinalError(f"student {a.student_id} appears twice in {which}")
            out[a.student_id] = a.cluster
        return out

    first = index(assignments_s1, "session 1")
    second = index(assignments_s2, "session 2")
    pairs = [PairedAssignment(s, first[s], second[s]) for s in first if s in second]
    unmatched = {
        "s1": [s for s in first if s not in second],
        "s2": [s for s in second if s not in first],
    }
    return pairs, unmatched


def build_table(pairs: Sequence[PairedAssignment], k: int) -> ContingencyTable:
    cells = np.zeros((k, k), dtype=np.int64)
    for p in pairs:
        if not (0 <= p.cluster_s1 < k and 0 <= p.cluster_s2 < k):
            raise LongitudinalError(
                f"student {p.student_id}: cluster pair ({p.cluster_s1}, {p.cluster_s2}) out of range for k={k}"
            )
        cells[p.cluster_s1, p.cluster_s2] += 1
    return ContingencyTable(k, cells)


def bowker_test(table: Union[ContingencyTable, np.ndarray], exact: bool = False) -> SymmetryTestResult:
    """Bowker's chi-square test of symmetry.

    Off-diagonal pairs with n_ij + n_ji = 0 carry no information; they are
    skipped and reduce the degrees of freedom. With ``exact=True`` and a 2x2
    table the exact binomial McNemar p-value is attached as well.
    """
    cells = np.asarray(table.cells if isinstance(table, ContingencyTable) else table)
    k = cells.shape[0]
    if cells.ndim != 2 or cells.shape[1] != k:
        raise LongitudinalError("table must be square")
    if k < 2:
        raise LongitudinalError("symmetry test needs k >= 2")
    chi2 = 0.0
    df = 0
    skipped = []
    for i in range(k):
        for j in range(i + 1, k):
            a, b = int(cells[i, j]), int(cells[j, i])
            if a + b == 0:
                skipped.append((i, j))
                continue
            chi2 += (a - b) ** 2 / (a + b)
            df += 1
    if df == 0:
        result = SymmetryTestResult(0.0, 0, 1.0, skipped, degenerate=True)
    else:
        # regularized upper incomplete gamma Q(df/2, chi2/2) is the chi-square survival function
        result = SymmetryTestResult(chi2, df, float(special.gammaincc(df / 2.0, chi2 / 2.0)), skipped)
    if exact:
        if k != 2:
            raise LongitudinalError("exact McNemar test is defined for 2x2 tables only")
        b, c = int(cells[0, 1]), int(cells[1, 0])
        result.exact_p = 1.0 if b + c == 0 else float(stats.binomtest(b, b + c, 0.5).pvalue)
    return result


def sankey_export(table: ContingencyTable, labels: Optional[Sequence[str]] = None, sessions=("S1", "S2")) -> dict:
    """Nodes are (strategy, session); links carry counts and percent of their source."""
    k = table.k
    names = list(labels) if labels is not None else [f"Strategy {i + 1}" for i in range(k)]
    nodes = []
    for s_idx, sess in enumerate(sessions):
        for i in range(k):
            nodes.append({"id": s_idx * k + i, "label": f"{names[i]} ({sess})"})
    links = []
    for i in range(k):
        row_total = int(table.cells[i].sum())
        for j in range(k):
            value = int(table.cells[i, j])
            if value == 0:
                continue
            links.append({
                "source": i,
                "target": k + j,
                "value": value,
                "percent": 100.0 * value / row_total,
            })
    return {"nodes": nodes, "links": links}


def write_sankey(data: dict, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def write_bowker(result: SymmetryTestResult, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chi2", "df", "p", "skipped"])
        skipped = ";".join(f"{i}-{j}" for i, j in result.skipped_pairs)
        w.writerow([repr(result.chi2), result.df, repr(result.p_value), skipped])


def format_bowker(result: SymmetryTestResult) -> str:
    lines = [
        "McNemar-Bowker symmetry test",
        f"  chi2 = {result.chi2:.4f}",
        f"  df   = {result.df}",
        f"  p    = {result.p_value:.4f}" + ("  (df = 0, set to 1)" if result.degenerate else ""),
    ]
    if result.skipped_pairs:
        lines.append("  skipped pairs: " + ", ".join(f"({i},{j})" for i, j in result.skipped_pairs))
    if result.exact_p is not None:
        lines.append(f"  exact McNemar p = {result.exact_p:.4f}")
    return "\n".join(lines)
