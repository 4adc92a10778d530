"""Strategy detection with a mixture of first-order Markov chains.

Each component k carries a mixing weight, an initial-state distribution and
a transition matrix. The likelihood of a sequence x under component k is::

    init_k[x_0] * prod_t T_k[x_{t-1}, x_t]

EM alternates responsibilities (E-step) with weighted re-estimation
(M-step). Transition and initial estimates receive ``smoothing_alpha``
pseudo-counts, which makes the procedure MAP-EM under a symmetric Dirichlet
prior; the quantity guaranteed not to decrease is therefore the penalized
log-likelihood, recorded per iteration in ``StrategyMixture.history``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from trace_strategist.fomm import (
    ModelError,
    ProcessSequence,
    TransitionModel,
    pooled_fomm,
    relative_frequencies,
    summarize_model,
)
from trace_strategist.labels import LABEL_INDEX, PROCESS_ALPHABET

log = logging.getLogger(__name__)

N_STATES = len(PROCESS_ALPHABET)


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 500
    tol: float = 1e-6
    n_restarts: int = 10
    smoothing_alpha: float = 0.5
    seed: int = 0
    method: str = "markov"  # or "gmm": Gaussian mixture on flattened per-sequence matrices


@dataclass
class StrategyMixture:
    weights: np.ndarray  # (K,)
    initials: np.ndarray  # (K, S)
    transitions: np.ndarray  # (K, S, S)
    log_likelihood: float
    objective: float
    n_iterations: int
    seed: int
    smoothing_alpha: float
    history: list[float] = field(default_factory=list)
    converged: bool = True
    alphabet: tuple[str, ...] = PROCESS_ALPHABET

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def components(self):
        return [(float(self.weights[k]), self.initials[k], self.transitions[k]) for k in range(self.K)]

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "alphabet": list(self.alphabet),
            "weights": self.weights.tolist(),
            "initials": self.initials.tolist(),
            "transitions": self.transitions.tolist(),
            "log_likelihood": self.log_likelihood,
            "objective": self.objective,
            "n_iterations": self.n_iterations,
            "seed": self.seed,
            "smoothing_alpha": self.smoothing_alpha,
            "converged": self.converged,
            "history": list(self.history),
        }

    @classmethod
    def from_json(cls, data: dict) -> "StrategyMixture":
        return cls(
            weights=np.asarray(data["weights"], dtype=float),
            initials=np.asarray(data["initials"], dtype=float),
            transitions=np.asarray(data["transitions"], dtype=float),
            log_likelihood=data["log_likelihood"],
            objective=data["objective"],
            n_iterations=data["n_iterations"],
            seed=data["seed"],
            smoothing_alpha=data["smoothing_alpha"],
            history=list(data.get("history", [])),
            converged=data.get("converged", True),
            alphabet=tuple(data.get("alphabet", PROCESS_ALPHABET)),
        )


@dataclass(frozen=True)
class Assignment:
    student_id: str
    session_id: str
    cluster: int
    posterior: tuple[float, ...]


def _encode(seqs: Sequence[ProcessSequence], min_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence flattened transition counts (N, S*S) and first-state one-hots (N, S)."""
    n = len(seqs)
    counts = np.zeros((n, N_STATES, N_STATES))
    first = np.zeros((n, N_STATES))
    for row, seq in enumerate(seqs):
        if len(seq.labels) < min_len:
            raise ClusterError(f"sequence {seq.student_id}/{seq.session_id} has fewer than {min_len} labels")
        try:
            idx = [LABEL_INDEX[lab] for lab in seq.labels]
        except KeyError as exc:
            raise ClusterError(
                f"sequence {seq.student_id}/{seq.session_id} contains label {exc.args[0]!r} outside the alphabet"
            ) from None
        first[row, idx[0]] = 1.0
        np.add.at(counts[row], (idx[:-1], idx[1:]), 1.0)
    return counts.reshape(n, -1), first


def _component_loglik(counts, first, initials, transitions) -> np.ndarray:
    """log p(x_n | k) as an (N, K) array.

    Uses elementwise products and numpy's fixed-order reductions instead of
    BLAS so results do not depend on thread count.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.log(transitions.reshape(len(transitions), -1))
        log_i = np.log(initials)
        # 0 * log(0) contributes nothing
        trans = np.where(counts[:, None, :] > 0, counts[:, None, :] * log_t[None, :, :], 0.0).sum(axis=2)
        init = np.where(first[:, None, :] > 0, log_i[None, :, :], 0.0).sum(axis=2)
    return trans + init


def _e_step(counts, first, weights, initials, transitions, seqs):
    lp = _component_loglik(counts, first, initials, transitions)
    with np.errstate(divide="ignore"):
        joint = lp + np.log(weights)[None, :]
    per_seq = logsumexp(joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_seq))
    if bad.size:
        s = seqs[bad[0]]
        raise ClusterError(f"non-finite likelihood for sequence {s.student_id}/{s.session_id}")
    # normalizing by the sum keeps exact ties exact
    resp = np.exp(joint - joint.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    return resp, float(math.fsum(per_seq))


def _log_prior(initials, transitions, alpha: float) -> float:
    if alpha == 0:
        return 0.0
    return float(alpha * (np.log(transitions).sum() + np.log(initials).sum()))


def _m_step(counts, first, resp, alpha: float):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    K = resp.shape[1]
    wc = np.einsum("nk,nj->kj", resp, counts).reshape(K, N_STATES, N_STATES) + alpha
    rows = wc.sum(axis=2, keepdims=True)
    transitions = np.divide(wc, rows, out=np.full_like(wc, 1.0 / N_STATES), where=rows > 0)
    wf = np.einsum("nk,nj->kj", resp, first) + alpha
    tot = wf.sum(axis=1, keepdims=True)
    initials = np.divide(wf, tot, out=np.full_like(wf, 1.0 / N_STATES), where=tot > 0)
    return weights, initials, transitions


def _seed_components(counts, first, K, alpha, rng):
    """k-means++ seeding over flattened, smoothed per-sequence transition matrices."""
    n = counts.shape[0]
    per = counts.reshape(n, N_STATES, N_STATES) + max(alpha, 1e-3)
    flat = (per / per.sum(axis=2, keepdims=True)).reshape(n, -1)
    centers = [int(rng.integers(n))]
    d2 = ((flat - flat[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((flat - flat[nxt]) ** 2).sum(axis=1))
    transitions = flat[centers].reshape(K, N_STATES, N_STATES)
    init = first.sum(axis=0) + max(alpha, 1e-3)
    initials = np.tile(init / init.sum(), (K, 1))
    weights = np.full(K, 1.0 / K)
    return weights, initials, transitions


def _run_em(counts, first, K, cfg: EMConfig, rng, seqs):
    weights, initials, transitions = _seed_components(counts, first, K, cfg.smoothing_alpha, rng)
    history: list[float] = []
    converged = False
    loglik = float("nan")
    for _ in range(cfg.max_iter):
        resp, loglik = _e_step(counts, first, weights, initials, transitions, seqs)
        objective = loglik + _log_prior(initials, transitions, cfg.smoothing_alpha)
        history.append(objective)
        if len(history) > 1 and abs(history[-1] - history[-2]) < cfg.tol:
            converged = True
            break
        weights, initials, transitions = _m_step(counts, first, resp, cfg.smoothing_alpha)
    return weights, initials, transitions, loglik, history, converged


def _canonical(weights, initials, transitions):
    order = np.argsort(-weights, kind="stable")
    return weights[order], initials[order], transitions[order]


def _fit_gmm(counts, first, K, cfg: EMConfig, seqs) -> StrategyMixture:
    from sklearn.mixture import GaussianMixture

    n = counts.shape[0]
    per = counts.reshape(n, N_STATES, N_STATES) + max(cfg.smoothing_alpha, 1e-3)
    flat = (per / per.sum(axis=2, keepdims=True)).reshape(n, -1)
    gmm = GaussianMixture(
        n_components=K, covariance_type="diag", n_init=cfg.n_restarts, max_iter=cfg.max_iter,
        tol=cfg.tol, random_state=cfg.seed, reg_covar=1e-6,
    ).fit(flat)
    resp = gmm.predict_proba(flat)
    weights, initials, transitions = _m_step(counts, first, resp, cfg.smoothing_alpha)
    weights, initials, transitions = _canonical(weights, initials, transitions)
    _, loglik = _e_step(counts, first, weights, initials, transitions, seqs)
    return StrategyMixture(
        weights, initials, transitions, loglik,
        loglik + _log_prior(initials, transitions, cfg.smoothing_alpha),
        int(gmm.n_iter_), cfg.seed, cfg.smoothing_alpha, [], bool(gmm.converged_),
    )


def fit_em(seqs: Sequence[ProcessSequence], K: int, config: Optional[EMConfig] = None) -> StrategyMixture:
    """Fit a K-component Markov-chain mixture; best of ``n_restarts`` runs."""
    cfg = config or EMConfig()
    if K < 1:
        raise ClusterError("K must be at least 1")
    if K > len(seqs):
        raise ClusterError(f"K={K} exceeds the number of sequences ({len(seqs)})")
    counts, first = _encode(seqs, min_len=2)
    if cfg.method == "gmm":
        return _fit_gmm(counts, first, K, cfg, seqs)
    if cfg.method != "markov":
        raise ClusterError(f"unknown clustering method {cfg.method!r}")
    best = None
    for r, child in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)):
        rng = np.random.default_rng(child)
        result = _run_em(counts, first, K, cfg, rng, seqs)
        log.debug("restart %d: objective %.6f after %d iterations", r, result[4][-1], len(result[4]))
        if best is None or result[4][-1] > best[4][-1]:
            best = result
    weights, initials, transitions, loglik, history, converged = best
    weights, initials, transitions = _canonical(weights, initials, transitions)
    return StrategyMixture(
        weights=weights,
        initials=initials,
        transitions=transitions,
        log_likelihood=loglik,
        objective=history[-1],
        n_iterations=len(history),
        seed=cfg.seed,
        smoothing_alpha=cfg.smoothing_alpha,
        history=history,
        converged=converged,
    )


def assign(mixture: StrategyMixture, seqs: Sequence[ProcessSequence]) -> list[Assignment]:
    """Posterior component membership; ties go to the lowest index."""
    if not seqs:
        return []
    counts, first = _encode(seqs, min_len=1)
    resp, _ = _e_step(counts, first, mixture.weights, mixture.initials, mixture.transitions, seqs)
    out = []
    for seq, post in zip(seqs, resp):
        out.append(Assignment(seq.student_id, seq.session_id, int(np.argmax(post)), tuple(float(p) for p in post)))
    return out


def n_parameters(K: int, n_states: int = N_STATES) -> int:
    return (K - 1) + K * (n_states - 1) + K * n_states * (n_states - 1)


def data_log_likelihood(mixture: StrategyMixture, seqs: Sequence[ProcessSequence]) -> float:
    counts, first = _encode(seqs, min_len=1)
    return _e_step(counts, first, mixture.weights, mixture.initials, mixture.transitions, seqs)[1]


def select_k(seqs: Sequence[ProcessSequence], k_range, config: Optional[EMConfig] = None):
    """Fit each K and score with BIC; returns (rows, recommended K)."""
    ks = list(k_range)
    if not ks:
        raise ClusterError("k_range is empty")
    rows = []
    for K in ks:
        mix = fit_em(seqs, K, config)
        bic = -2.0 * mix.log_likelihood + n_parameters(K) * math.log(len(seqs))
        rows.append({"K": K, "log_likelihood": mix.log_likelihood, "BIC": bic})
    best = min(rows, key=lambda r: (r["BIC"], r["K"]))
    return rows, best["K"]


@dataclass
class StrategyBundle:
    cluster: int
    count: int
    share: float
    relative_frequencies: dict[str, float] = field(default_factory=dict)
    pooled: Optional[TransitionModel] = None
    summarized: Optional[TransitionModel] = None


def strategy_report(
    assignments: Sequence[Assignment], seqs: Sequence[ProcessSequence], K: Optional[int] = None, threshold: float = 0.10
) -> list[StrategyBundle]:
    by_key = {(a.student_id, a.session_id): a.cluster for a in assignments}
    missing = [s.key for s in seqs if s.key not in by_key]
    if missing:
        raise ClusterError(f"no assignment for sequence {missing[0][0]}/{missing[0][1]}")
    if K is None:
        K = 1 + max(by_key.values(), default=-1)
    total = len(seqs)
    bundles = []
    for k in range(K):
        members = [s for s in seqs if by_key[s.key] == k]
        bundle = StrategyBundle(k, len(members), len(members) / total if total else 0.0)
        if members:
            bundle.relative_frequencies = relative_frequencies(members)
            bundle.pooled = pooled_fomm(members)
            try:
                bundle.summarized = summarize_model(bundle.pooled, bundle.relative_frequencies, threshold)
            except ModelError:
                bundle.summarized = None
        bundles.append(bundle)
    return bundles


def write_assignments(assignments: Sequence[Assignment], K: int, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "session_id", "cluster", *(f"posterior_{k}" for k in range(K))])
        for a in assignments:
            w.writerow([a.student_id, a.session_id, a.cluster, *(repr(p) for p in a.posterior)])


def read_assignments(path: Union[str, Path]) -> list[Assignment]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            post = tuple(float(v) for k, v in row.items() if k.startswith("posterior_"))
            out.append(Assignment(row["student_id"], row["session_id"], int(row["cluster"]), post))
    return out


def write_mixture(mixture: StrategyMixture, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(mixture.to_json(), indent=2) + "\n", encoding="utf-8")


def read_mixture(path: Union[str, Path]) -> StrategyMixture:
    return StrategyMixture.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
