import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trace_strategist.cluster import Assignment
from trace_strategist.longitudinal import (
    ContingencyTable,
    LongitudinalError,
    PairedAssignment,
    bowker_test,
    build_table,
    format_bowker,
    pair_assignments,
    sankey_export,
)

tables = st.integers(2, 5).flatmap(
    lambda k: st.lists(st.lists(st.integers(0, 40), min_size=k, max_size=k), min_size=k, max_size=k)
).map(np.array)


def test_symmetric_table_gives_zero():
    r = bowker_test(np.array([[5, 2, 1], [2, 3, 4], [1, 4, 0]]))
    assert r.chi2 == 0.0 and r.df == 3 and r.p_value == 1.0


def test_single_pair_informative():
    # only (0, 1) carries mass; the other two off-diagonal pairs are skipped
    r = bowker_test(np.array([[0, 3, 0], [1, 0, 0], [0, 0, 0]]))
    assert r.chi2 == pytest.approx(1.0, abs=1e-12)
    assert r.df == 1
    assert r.skipped_pairs == [(0, 2), (1, 2)]


def test_hand_computed_df2():
    r = bowker_test(np.array([[0, 3, 0], [0, 0, 1], [0, 1, 0]]))
    # pairs: (0,1): (3-0)^2/3 = 3, (1,2): 0, (0,2) skipped
    assert r.chi2 == pytest.approx(3.0, abs=1e-12)
    assert r.df == 2
    assert r.p_value == pytest.approx(0.22313016014842982, abs=1e-4)


def test_hand_computed_df3():
    cells = np.array([[0, 3, 2], [0, 0, 1], [2, 1, 0]])
    r = bowker_test(cells)
    assert r.chi2 == pytest.approx(3.0, abs=1e-12)
    assert r.df == 3
    assert r.p_value == pytest.approx(0.3916251762710877, abs=1e-4)


def test_all_pairs_empty_is_degenerate():
    r = bowker_test(np.diag([4, 5, 6]))
    assert r.df == 0 and r.p_value == 1.0 and r.degenerate
    assert "set to 1" in format_bowker(r)


@settings(max_examples=150, deadline=None)
@given(tables)
def test_transpose_invariance(cells):
    a, b = bowker_test(cells), bowker_test(cells.T)
    assert a.chi2 == pytest.approx(b.chi2, abs=1e-12)
    assert a.df == b.df
    assert a.p_value == pytest.approx(b.p_value, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(tables, st.integers(0, 50))
def test_diagonal_does_not_matter(cells, extra):
    bumped = cells + np.eye(len(cells), dtype=int) * extra
    a, b = bowker_test(cells), bowker_test(bumped)
    assert a.chi2 == b.chi2 and a.df == b.df and a.p_value == b.p_value


@settings(max_examples=150, deadline=None)
@given(tables)
def test_matches_scipy_chi2(cells):
    r = bowker_test(cells)
    assert 0.0 <= r.p_value <= 1.0
    if r.df:
        assert r.p_value == pytest.approx(stats.chi2.sf(r.chi2, r.df), abs=1e-10)


def test_exact_mcnemar():
    r = bowker_test(np.array([[10, 7], [1, 12]]), exact=True)
    assert r.exact_p == pytest.approx(stats.binomtest(7, 8, 0.5).pvalue)
    assert r.chi2 == pytest.approx(36 / 8)
    with pytest.raises(LongitudinalError):
        bowker_test(np.ones((3, 3), dtype=int), exact=True)


def test_rejects_bad_shapes():
    with pytest.raises(LongitudinalError):
        bowker_test(np.ones((1, 1)))


def _asg(ids, session, cluster=0):
    return [Assignment(s, session, cluster, ()) for s in ids]


def test_pairing_counts():
    s1 = _asg([f"s{i}" for i in range(93)], "S1")
    s2 = _asg([f"s{i}" for i in range(8, 103)], "S2")
    pairs, unmatched = pair_assignments(s1, s2)
    assert len(pairs) == 85
    assert len(unmatched["s1"]) == 8 and len(unmatched["s2"]) == 10


def test_pairing_rejects_duplicates():
    with pytest.raises(LongitudinalError, match="twice"):
        pair_assignments(_asg(["a", "a"], "S1"), _asg(["a"], "S2"))


def test_build_table_range_check():
    with pytest.raises(LongitudinalError):
        build_table([PairedAssignment("x", 0, 3)], 3)
    t = build_table([PairedAssignment("x", 0, 2), PairedAssignment("y", 0, 2), PairedAssignment("z", 1, 1)], 3)
    assert t.cells[0, 2] == 2 and t.total == 3


def test_sankey_percentages():
    cells = np.array([[19, 3, 1], [0, 0, 0], [0, 0, 0]])
    data = sankey_export(ContingencyTable(3, cells))
    assert len(data["nodes"]) == 6
    assert [(l["source"], l["target"], l["value"]) for l in data["links"]] == [(0, 3, 19), (0, 4, 3), (0, 5, 1)]
    assert [round(l["percent"], 2) for l in data["links"]] == [82.61, 13.04, 4.35]
    assert sum(l["percent"] for l in data["links"]) == pytest.approx(100.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(tables)
def test_sankey_link_values_sum_to_table(cells):
    data = sankey_export(ContingencyTable(len(cells), cells))
    assert sum(l["value"] for l in data["links"]) == cells.sum()
    for i in range(len(cells)):
        pct = [l["percent"] for l in data["links"] if l["source"] == i]
        if pct:
            assert sum(pct) == pytest.approx(100.0, abs=1e-9)
