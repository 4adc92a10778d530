import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trace_strategist.cluster import Assignment
from trace_strategist.outcomes import (
    OutcomeError,
    OutcomeRecord,
    bonferroni,
    compare_all,
    compare_groups,
    describe,
    filter_complete,
    normalize,
    pairwise_compare,
    read_outcomes,
    write_pairwise,
)


def ols_oracle(a, b, confidence=0.95):
    """Intercept + indicator regression solved directly."""
    y = np.array(list(a) + list(b), dtype=float)
    X = np.column_stack([np.ones_like(y), [0.0] * len(a) + [1.0] * len(b)])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    df = len(y) - 2
    sigma2 = resid @ resid / df
    se = math.sqrt(sigma2 * np.linalg.inv(X.T @ X)[1, 1])
    t = beta[1] / se
    p = 2 * stats.t.sf(abs(t), df)
    crit = stats.t.ppf(0.5 + confidence / 2, df)
    d = (np.mean(a) - np.mean(b)) / math.sqrt(sigma2)
    return beta[1], t, p, d, beta[1] - crit * se, beta[1] + crit * se


def build(groups):
    recs, asg = [], []
    i = 0
    for k, vals in groups.items():
        for v in vals:
            sid = f"s{i}"
            i += 1
            recs.append(OutcomeRecord(sid, "S1", v, v, v, v / 15, v / 15))
            asg.append(Assignment(sid, "S1", k, ()))
    return recs, asg


def test_normalize():
    r = normalize(OutcomeRecord("a", "S1", 9, 12, 10))
    assert r.pre_norm == 0.6 and r.post_norm == 0.8
    r = normalize(OutcomeRecord("a", "S2", 9, 10, 10))
    assert r.pre_norm == 0.9 and r.post_norm == 1.0
    with pytest.raises(OutcomeError):
        normalize(OutcomeRecord("a", "S2", 11, 10, 10))
    with pytest.raises(OutcomeError):
        normalize(OutcomeRecord("a", "S3", 1, 1, 1))
    assert normalize(OutcomeRecord("a", "S1", 3, None, 2)).post_norm is None


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["S1", "S2"]), st.floats(0, 1), st.floats(0, 1))
def test_normalized_in_unit_interval(session, u, v):
    top = {"S1": 15, "S2": 10}[session]
    r = normalize(OutcomeRecord("a", session, u * top, v * top, 7))
    assert 0 <= r.pre_norm <= 1 and 0 <= r.post_norm <= 1


def test_filter_complete():
    recs = [OutcomeRecord(f"s{i}", "S1", 5, None if i < 29 else 7, 10) for i in range(93)]
    kept, excluded = filter_complete(recs)
    assert len(kept) == 64 and len(excluded) == 29
    assert excluded[0] == {"student_id": "s0", "session_id": "S1", "missing": "post"}
    kept, excluded = filter_complete(recs[29:])
    assert excluded == []


def test_describe():
    recs, asg = build({0: [8, 12], 1: [12], 2: []})
    rows = {(r["strategy"], r["outcome"]): r for r in describe(recs, asg, [0, 1, 2])}
    assert len(rows) == 9
    assert rows[0, "essay"]["mean"] == 10 and rows[0, "essay"]["sd"] == pytest.approx(2.8284271247461903, abs=1e-12)
    assert rows[1, "essay"]["mean"] == 12 and rows[1, "essay"]["sd"] is None
    assert rows[2, "essay"]["n"] == 0 and rows[2, "essay"]["mean"] is None


def test_describe_by_session():
    recs = [OutcomeRecord("a", "S1", 1, 1, 4), OutcomeRecord("a", "S2", 1, 1, 8)]
    asg = [Assignment("a", "S1", 0, ()), Assignment("a", "S2", 0, ())]
    pooled = describe(recs, asg)
    assert pooled[0]["n"] == 2
    split = describe(recs, asg, by_session=True)
    assert {r["session"] for r in split} == {"S1", "S2"}


def test_hand_computed_pair():
    coef, se, t, df, p, d, lo, hi = compare_groups([1, 2, 3], [3, 4, 5])
    assert coef == 2.0 and df == 4 and d == -2.0
    assert t == pytest.approx(2.449489742783178, abs=1e-12)
    assert p == pytest.approx(0.07048399691021993, abs=1e-12)
    assert lo < coef < hi


def test_degenerate_and_empty_groups():
    with pytest.raises(OutcomeError, match="degenerate variance"):
        compare_groups([5, 5], [5, 5])
    with pytest.raises(OutcomeError):
        compare_groups([], [1, 2])


groups = st.lists(st.floats(0, 15, allow_nan=False).map(lambda x: round(x, 3)), min_size=2, max_size=12)


@pytest.mark.filterwarnings("ignore:Precision loss")
@settings(max_examples=300, deadline=None)
@given(groups, groups)
def test_matches_least_squares_and_ttest(a, b):
    if np.var(a + b) < 1e-6 or (np.var(a) == 0 and np.var(b) == 0):
        return
    recs, asg = build({0: a, 1: b})
    r = pairwise_compare(recs, asg, "essay", (0, 1))
    coef, t, p, d, lo, hi = ols_oracle(a, b)
    for got, want in ((r.coef, coef), (r.t, t), (r.p, p), (r.cohen_d, d), (r.ci_low, lo), (r.ci_high, hi)):
        assert got == pytest.approx(want, abs=1e-10)
    ref = stats.ttest_ind(b, a, equal_var=True)
    assert r.t == pytest.approx(ref.statistic, abs=1e-10)
    assert r.p == pytest.approx(ref.pvalue, abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(groups, groups)
def test_antisymmetry(a, b):
    if np.var(a) == 0 and np.var(b) == 0:
        return
    recs, asg = build({0: a, 1: b})
    ab = pairwise_compare(recs, asg, "essay", (0, 1))
    ba = pairwise_compare(recs, asg, "essay", (1, 0))
    assert ab.coef == pytest.approx(-ba.coef, abs=1e-12)
    assert ab.cohen_d == pytest.approx(-ba.cohen_d, abs=1e-12)
    assert ab.t == pytest.approx(-ba.t, abs=1e-12)
    assert ab.p == pytest.approx(ba.p, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(groups, groups, st.floats(0.5, 0.98))
def test_ci_widens_with_confidence(a, b, level):
    if np.var(a) == 0 and np.var(b) == 0:
        return
    lo1, hi1 = compare_groups(a, b, level)[6:]
    lo2, hi2 = compare_groups(a, b, min(0.999, level + 0.01))[6:]
    coef = compare_groups(a, b)[0]
    assert lo1 <= coef <= hi1
    assert lo2 <= lo1 and hi2 >= hi1


def test_bonferroni_fixtures():
    assert bonferroni(0.045, 3) == pytest.approx(0.135, abs=1e-12)
    assert bonferroni(0.302, 3) == pytest.approx(0.906, abs=1e-12)
    assert bonferroni(0.6, 3) == 1.0


@settings(max_examples=200)
@given(st.floats(0, 1), st.integers(1, 10))
def test_bonferroni_never_lowers(p, m):
    assert p <= bonferroni(p, m) <= 1.0


def test_compare_all_counts():
    recs, asg = build({0: [1, 4, 6], 1: [3, 5, 9], 2: [7, 8, 12]})
    results = compare_all(recs, asg)
    essay = [r for r in results if r.outcome == "essay"]
    assert len(results) == 9 and [r.pair for r in essay] == [(0, 1), (0, 2), (1, 2)]
    for r in essay:
        assert r.p_corrected == pytest.approx(min(1.0, 3 * r.p), abs=1e-15)

    recs, asg = build({0: [1, 4, 6], 2: [7, 8, 12]})
    results = compare_all(recs, asg)
    assert len(results) == 3
    assert all(r.p_corrected == r.p for r in results)

    recs, asg = build({1: [1, 4, 6]})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert compare_all(recs, asg) == []
    assert caught


def test_correction_flips_flag(tmp_path):
    recs, asg = build({0: [1, 2, 3, 2, 1], 1: [3, 4, 5, 4, 2]})
    r = pairwise_compare(recs, asg, "essay", (0, 1))
    assert r.p < 0.05 and r.p_corrected >= 0.05 and r.correction_flips
    write_pairwise([r], tmp_path / "p.csv")
    header, row = (tmp_path / "p.csv").read_text().splitlines()
    assert header.startswith("Outcome,Pair,Coef,t,P,Corrected P,Cohen's d")
    assert row.startswith("essay,S1 vs S2,") and row.endswith(",1")


def test_read_outcomes(tmp_path):
    path = tmp_path / "o.csv"
    path.write_text("student_id,session_id,pre_raw,post_raw,essay_score\na,S1,3,6,10\nb,S2,4,,9\n")
    a, b = read_outcomes(path)
    assert a.pre_norm == 0.2 and a.post_norm == 0.4
    assert b.post_raw is None and not b.complete


def test_compare_all_skips_degenerate_pair():
    recs, asg = build({0: [5, 5], 1: [5, 5], 2: [1, 9]})
    with pytest.warns(UserWarning, match="skipped"):
        results = compare_all(recs, asg)
    assert {r.pair for r in results} == {(0, 2), (1, 2)}
    assert all(r.p_corrected == min(1.0, 3 * r.p) for r in results)
