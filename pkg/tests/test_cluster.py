import itertools

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from trace_strategist.cluster import (
    Assignment,
    ClusterError,
    EMConfig,
    StrategyMixture,
    _e_step,
    _encode,
    assign,
    fit_em,
    n_parameters,
    read_assignments,
    read_mixture,
    select_k,
    strategy_report,
    write_assignments,
    write_mixture,
)
from trace_strategist.fomm import ProcessSequence, pooled_fomm
from trace_strategist.labels import LABEL_INDEX, PROCESS_ALPHABET
from trace_strategist.synth import GeneratorProfile, load_profiles, sample_sequences

A, B = "LC.FirstReading", "HC.ElaborationOrganisation"
ia, ib = LABEL_INDEX[A], LABEL_INDEX[B]
FAST = EMConfig(n_restarts=3, seed=5)


def two_state(p_stay, length=(60, 120), weight=0.5, name="g"):
    n = len(PROCESS_ALPHABET)
    T = np.eye(n)
    T[ia] = 0
    T[ib] = 0
    T[ia, ia], T[ia, ib] = p_stay, 1 - p_stay
    T[ib, ib], T[ib, ia] = p_stay, 1 - p_stay
    init = np.zeros(n)
    init[ia] = init[ib] = 0.5
    return GeneratorProfile(name, init, T, length, weight)


@pytest.fixture(scope="module")
def two_gen():
    gens = [two_state(0.9, name="stay"), two_state(0.1, name="switch")]
    seqs, truth = sample_sequences(gens, 60, seed=21)
    return gens, seqs, truth


@pytest.fixture(scope="module")
def three_gen():
    return sample_sequences(load_profiles(), 180, seed=3)


def best_perm_accuracy(truth, pred, K):
    truth, pred = np.asarray(truth), np.asarray(pred)
    return max(np.mean(np.array(perm)[pred] == truth) for perm in itertools.permutations(range(K)))


def test_k1_equals_pooled_smoothed_fomm(three_gen):
    seqs, _ = three_gen
    alpha = 0.5
    mix = fit_em(seqs, 1, EMConfig(n_restarts=2, smoothing_alpha=alpha))
    counts = pooled_fomm(seqs).counts + alpha
    expected = counts / counts.sum(axis=1, keepdims=True)
    assert np.max(np.abs(mix.transitions[0] - expected)) <= 1e-12
    assert mix.weights.tolist() == [1.0]
    assert all(a.posterior == (1.0,) for a in assign(mix, seqs[:5]))


def test_two_generators_recovered(two_gen):
    gens, seqs, truth = two_gen
    mix = fit_em(seqs, 2, FAST)
    pred = [a.cluster for a in assign(mix, seqs)]
    assert best_perm_accuracy(truth, pred, 2) >= 0.95
    sub = np.ix_([ia, ib], [ia, ib])
    errs = min(
        max(np.max(np.abs(mix.transitions[p[k]][sub] - gens[k].transition[sub])) for k in range(2))
        for p in itertools.permutations(range(2))
    )
    assert errs <= 0.05


def test_three_strategies_ari(three_gen):
    seqs, truth = three_gen
    mix = fit_em(seqs, 3, EMConfig(seed=7))
    pred = [a.cluster for a in assign(mix, seqs)]
    assert adjusted_rand_score(truth, pred) >= 0.8


def test_monotone_objective(two_gen, three_gen):
    for seqs, K in ((two_gen[1], 2), (three_gen[0], 3), (three_gen[0], 4)):
        mix = fit_em(seqs, K, FAST)
        h = np.array(mix.history)
        assert np.all(np.diff(h) >= -1e-8)


def test_seed_determinism(three_gen):
    seqs, _ = three_gen
    m1 = fit_em(seqs, 3, FAST)
    m2 = fit_em(seqs, 3, FAST)
    assert m1.to_json() == m2.to_json()


def test_permutation_invariance(three_gen):
    seqs, _ = three_gen
    rng = np.random.default_rng(0)
    shuffled = [seqs[i] for i in rng.permutation(len(seqs))]
    m1 = fit_em(seqs, 3, FAST)
    m2 = fit_em(shuffled, 3, FAST)
    np.testing.assert_allclose(m1.weights, m2.weights, atol=1e-6)
    np.testing.assert_allclose(m1.transitions, m2.transitions, atol=1e-6)
    a1 = {(a.student_id, a.session_id): a.cluster for a in assign(m1, seqs)}
    a2 = {(a.student_id, a.session_id): a.cluster for a in assign(m2, seqs)}
    assert a1 == a2


def test_smoothed_rows_positive_and_stochastic(two_gen):
    mix = fit_em(two_gen[1], 2, FAST)
    assert np.all(mix.transitions > 0)
    np.testing.assert_allclose(mix.transitions.sum(axis=2), 1.0, atol=1e-9)
    assert abs(mix.weights.sum() - 1) <= 1e-9
    assert np.all(np.diff(mix.weights) <= 0)  # canonical order


def test_assign_well_separated(two_gen):
    gens, seqs, truth = two_gen
    mix = fit_em(seqs, 2, FAST)
    # component whose A->A probability is high generated "stay" sequences
    stay = int(np.argmax(mix.transitions[:, ia, ia]))
    probe, _ = sample_sequences([GeneratorProfile("stay", gens[0].initial, gens[0].transition, (100, 100), 1.0)], 1, seed=99)
    (a,) = assign(mix, probe)
    assert a.cluster == stay and a.posterior[stay] > 0.99
    for a in assign(mix, seqs):
        assert a.cluster == int(np.argmax(a.posterior))
        assert abs(sum(a.posterior) - 1) <= 1e-9


def test_symmetric_tie_goes_to_lowest_index(two_gen):
    base = fit_em(two_gen[1], 1, FAST)
    mix = StrategyMixture(np.array([0.5, 0.5]), np.vstack([base.initials] * 2),
                          np.vstack([base.transitions] * 2), 0.0, 0.0, 0, 0, 0.5)
    for a in assign(mix, two_gen[1][:5]):
        assert a.posterior == (0.5, 0.5)
        assert a.cluster == 0


def test_errors(three_gen):
    seqs, _ = three_gen
    with pytest.raises(ClusterError):
        fit_em(seqs[:2], 3)
    with pytest.raises(ClusterError, match="fewer than 2"):
        fit_em([ProcessSequence("a", "S1", (A,))] * 2, 1)
    mix = fit_em(seqs[:10], 1, FAST)
    with pytest.raises(ClusterError, match="outside the alphabet"):
        assign(mix, [ProcessSequence("a", "S1", (A, "No_Process"))])
    counts, first = _encode([ProcessSequence("bad", "S9", (A, B))], 1)
    zero = np.zeros((1, len(PROCESS_ALPHABET), len(PROCESS_ALPHABET)))
    with pytest.raises(ClusterError, match="bad/S9"):
        _e_step(counts, first, np.array([1.0]), np.full((1, 7), 1 / 7), zero, [ProcessSequence("bad", "S9", (A, B))])


def test_select_k_three(three_gen):
    seqs, _ = three_gen
    rows, best = select_k(seqs, range(1, 6), EMConfig(n_restarts=3, seed=1))
    assert best == 3
    assert [r["K"] for r in rows] == [1, 2, 3, 4, 5]


def test_select_k_single_generator():
    p = load_profiles()[0]
    single = GeneratorProfile(p.name, p.initial, p.transition, p.length_distribution, 1.0)
    seqs, _ = sample_sequences([single], 120, seed=4)
    _, best = select_k(seqs, range(1, 4), EMConfig(n_restarts=3, seed=1))
    assert best == 1


def test_select_k_single_row(two_gen):
    rows, best = select_k(two_gen[1], [2], FAST)
    assert len(rows) == 1 and best == 2


def test_parameter_count():
    assert n_parameters(1) == 0 + 6 + 42
    assert n_parameters(3) == 2 + 18 + 126


def test_strategy_report_shares():
    seqs = [ProcessSequence(f"s{i}", "S1", (A, B, B)) for i in range(93)]
    assignments = [Assignment(s.student_id, "S1", 0 if i < 73 else 1 if i < 89 else 2, ()) for i, s in enumerate(seqs)]
    bundles = strategy_report(assignments, seqs, 3)
    assert [b.count for b in bundles] == [73, 16, 4]
    assert [round(100 * b.share, 2) for b in bundles] == [78.49, 17.20, 4.30]
    assert abs(sum(b.share for b in bundles) - 1) <= 1e-12
    assert np.array_equal(bundles[2].pooled.counts, 4 * pooled_fomm(seqs[:1]).counts)


def test_strategy_report_empty_cluster():
    seqs = [ProcessSequence("a", "S1", (A, B))]
    bundles = strategy_report([Assignment("a", "S1", 0, (1.0, 0.0))], seqs, 2)
    assert bundles[0].share == 1.0
    assert bundles[1].count == 0 and bundles[1].pooled is None


def test_gmm_option_runs(three_gen):
    seqs, truth = three_gen
    mix = fit_em(seqs, 3, EMConfig(method="gmm", n_restarts=2, seed=0))
    assert mix.K == 3
    np.testing.assert_allclose(mix.transitions.sum(axis=2), 1.0, atol=1e-9)


def test_io_roundtrip(tmp_path, two_gen):
    mix = fit_em(two_gen[1], 2, FAST)
    write_mixture(mix, tmp_path / "m.json")
    back = read_mixture(tmp_path / "m.json")
    assert np.array_equal(back.transitions, mix.transitions)
    asg = assign(mix, two_gen[1])
    write_assignments(asg, 2, tmp_path / "a.csv")
    assert read_assignments(tmp_path / "a.csv") == asg
