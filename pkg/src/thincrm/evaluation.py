"""Held-out evaluation, synthetic data generators and the experiment protocols."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtr

from .chain import run_chain
from .corpus import Corpus
from .crm_core import MIN_MASS
from .lfm import LfmData, LfmHyper, LfmTruth, init_lfm_state, lfm_generate, lfm_gibbs_sweep, lfm_predict_missing
from .tgap_pfa import TopicHyper, TopicState, gibbs_sweep, init_topic_state, predictive_rate, sample_dirichlet_rows
from .thinning import ProbitRvmKernel, SingleLocationKernel, squared_distances

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass
class HeldoutSplit:
    """Word-level split: ``train`` and ``heldout`` cover the same documents."""

    train: Corpus
    heldout: Corpus
    fraction: float

    def save(self, path) -> None:
        h = self.heldout
        payload = {
            "kind": "words",
            "fraction": self.fraction,
            "P": h.P,
            "times": h.times.tolist(),
            "doc_time": h.doc_time.tolist(),
            "doc_ids": list(h.doc_ids),
            "train": [self.train.cell_doc.tolist(), self.train.cell_word.tolist(), self.train.cell_count.tolist()],
            "heldout": [h.cell_doc.tolist(), h.cell_word.tolist(), h.cell_count.tolist()],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, vocab=None) -> "HeldoutSplit":
        d = json.loads(Path(path).read_text())
        if d.get("kind") != "words":
            raise ValueError(f"{path}: not a word-level split file")

        def build(cells):
            return Corpus(*cells, d["doc_time"], d["times"], d["P"], d["doc_ids"], vocab)

        return cls(build(d["train"]), build(d["heldout"]), d["fraction"])


def split_words(corpus: Corpus, fraction: float, rng) -> HeldoutSplit:
    """Hold out each token independently with probability ``fraction``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    held = rng.binomial(corpus.cell_count, fraction)
    return HeldoutSplit(corpus.with_counts(corpus.cell_count - held), corpus.with_counts(held), fraction)


def split_documents(groups, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Per group, hold out round(fraction * size) documents (at least one when size >= 2).

    Returns sorted (train, test) document indices.
    """
    groups = np.asarray(groups)
    test = []
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        n = int(round(fraction * len(members)))
        if len(members) >= 2:
            n = min(max(n, 1), len(members) - 1)
        test.extend(rng.choice(members, size=n, replace=False).tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(groups)), test)
    return train, test


def kfold_indices(n: int, n_folds: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def perplexity(samples, heldout: Corpus) -> float:
    """exp(-(1/y..) sum y log q) with q the sample-averaged word distribution per document.

    The samples must have been fit on documents aligned with ``heldout``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("at least one posterior sample is required")
    total = heldout.cell_count.sum()
    if total <= 0:
        raise ValueError("held-out set is empty")
    num = np.zeros(heldout.C)
    den = np.zeros(heldout.D)
    for s in samples:
        if s.beta.shape[0] != heldout.D:
            raise ValueError("posterior sample does not match the held-out documents")
        doc_rate = s.r * s.pi[None, :] * s.beta                     # (D, K)
        num += np.einsum("ck,kc->c", doc_rate[heldout.cell_doc], s.theta[:, heldout.cell_word])
        den += doc_rate @ s.theta.sum(axis=1)
    logq = np.log(np.maximum(num, MIN_MASS)) - np.log(np.maximum(den[heldout.cell_doc], MIN_MASS))
    return float(np.exp(-np.dot(heldout.cell_count, logq) / total))


def poisson_score(counts, rate) -> float:
    """Poisson log-likelihood without the count-only term."""
    counts = np.asarray(counts, dtype=float)
    rate = np.asarray(rate, dtype=float)
    return float(np.dot(counts, np.log(rate)) - rate.sum())


def decade_scores(samples, counts, decades: dict) -> dict:
    """Best per-timestamp score within each decade."""
    samples = list(samples)
    out = {}
    for label, stamps in decades.items():
        out[label] = max(poisson_score(counts, predictive_rate(samples, t)) for t in stamps)
    return out


def decade_predict(samples, counts, decades: dict):
    """Label of the decade with the largest predictive likelihood.

    ``decades`` maps label -> timestamps.  Ties go to the decade whose
    earliest timestamp is smallest.
    """
    if not decades:
        raise ValueError("no candidate decades")
    return pick_decade(decade_scores(samples, counts, decades), decades)


def pick_decade(scores: dict, decades: dict):
    """Argmax of ``scores`` with ties going to the earliest decade."""
    order = sorted(decades, key=lambda lab: min(decades[lab]))
    best = order[0]
    for lab in order[1:]:
        if scores[lab] > scores[best]:
            best = lab
    return best


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth differ in length")
    if pred.size == 0:
        raise ValueError("need at least one value")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def report(metric: str, values, seed) -> dict:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    return {
        "metric": metric,
        "value": float(values.mean()),
        "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        "n_folds": int(len(values)),
        "seed": seed,
    }


def match_features(true_A, learned_A) -> tuple[np.ndarray, np.ndarray]:
    """Optimal one-to-one matching of true to learned rows by Pearson correlation.

    Returns (learned index per true row, matched correlations).  Learned rows
    that are constant get correlation 0.
    """
    T = np.asarray(true_A, dtype=float)
    L = np.asarray(learned_A, dtype=float)
    if L.shape[0] < T.shape[0]:
        raise ValueError("fewer learned than true features")

    def standardize(X):
        X = X - X.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(X, axis=1, keepdims=True)
        return np.divide(X, norm, out=np.zeros_like(X), where=norm > 0)

    C = standardize(T) @ standardize(L).T
    rows, cols = linear_sum_assignment(-C)
    match = np.empty(T.shape[0], dtype=np.int64)
    match[rows] = cols
    return match, C[rows, cols][np.argsort(rows)]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def spike_slab_curves(grid, n_curves: int, phi: float, rng, slab_var: float = 4.0, min_peak: float = 0.5):
    """Probit-RVM curves with spike-and-slab weights on centers ``grid``.

    Each curve draws kappa ~ U(0, 1) and every weight is 0 with probability
    kappa, else N(0, slab_var).  Curves whose maximum stays below
    ``min_peak`` are redrawn so that every feature shows up somewhere.
    Returns (curves (n, T), omegas (n, T + 1)).
    """
    grid = np.asarray(grid, dtype=float)
    design = np.exp(-phi * squared_distances(grid, grid[:, None]))
    curves, omegas = [], []
    while len(curves) < n_curves:
        kappa = rng.random()
        w = np.where(rng.random(len(grid) + 1) < kappa, 0.0, rng.normal(0.0, np.sqrt(slab_var), len(grid) + 1))
        p = ndtr(w[0] + design @ w[1:])
        if p.max() >= min_peak:
            curves.append(p)
            omegas.append(w)
    return np.array(curves), np.array(omegas)


def generate_bag_of_items(
    rng,
    n_features: int = 8,
    n_pixels: int = 64,
    covariates=None,
    points_per_covariate: int = 100,
    noise_var: float = 0.25,
    phi: float = 0.1,
) -> tuple[LfmTruth, LfmData]:
    """Binary image features switched on and off along a one-dimensional covariate.

    Features are random binary images of ``n_pixels`` pixels (every feature
    has at least one pixel on), masses pi_k ~ U(0.3, 0.7) and thinning curves are
    spike-and-slab probit-RVM expansions on the covariate grid.
    """
    grid = np.arange(1, 21, dtype=float) if covariates is None else np.asarray(covariates, dtype=float)
    A = (rng.random((n_features, n_pixels)) < 0.5).astype(float)
    for k in np.flatnonzero(A.sum(axis=1) == 0):
        A[k, rng.integers(n_pixels)] = 1.0
    pi = rng.uniform(0.3, 0.7, n_features)
    curves, omegas = spike_slab_curves(grid, n_features, phi, rng)
    kernels = [ProbitRvmKernel(w, phi, grid[:, None]) for w in omegas]
    truth = LfmTruth(pi, A, curves, noise_var, kernels)
    data = lfm_generate(truth, grid, np.full(len(grid), points_per_covariate), rng)
    return truth, data


def bump_curves(times, n_curves: int, rng, bandwidth: float = 5.0) -> np.ndarray:
    """Era-localized curves: Gaussian bumps of height 1 centered uniformly over the time range."""
    times = np.asarray(times, dtype=float)
    centers = rng.uniform(times.min(), times.max(), n_curves)
    return np.array([SingleLocationKernel([c], bandwidth=bandwidth)(times) for c in centers])


@dataclass
class TopicTruth:
    state: TopicState
    curves: np.ndarray          # (K, T) thinning probabilities per timestamp
    corpus: Corpus
    alloc: np.ndarray           # (C, K)
    redrawn_documents: int = 0


def generate_synthetic_corpus(
    K_true: int,
    P: int,
    timestamps,
    docs_per_t: int,
    rng,
    words_per_doc: float = 100.0,
    alpha_theta: float = 0.1,
    e: float = 1.0,
    phi: float = 0.1,
    curves=None,
) -> TopicTruth:
    """Forward simulation of the thinned Poisson factor model.

    Topics ~ Dir(alpha_theta), pi_k ~ Gamma(2, .) scaled so that an average
    document has about ``words_per_doc`` tokens, curves spike-and-slab
    probit-RVM (or given as a (K, T) array).  Documents that come out empty
    are redrawn from the same process, so the corpus is drawn from the model
    conditioned on nonempty documents.
    """
    times = np.asarray(timestamps, dtype=float)
    T = len(times)
    if curves is None:
        curves, _ = spike_slab_curves(times, K_true, phi, rng)
    curves = np.asarray(curves, dtype=float).reshape(K_true, T)
    theta = sample_dirichlet_rows(np.full((K_true, P), alpha_theta), rng)
    mean_active = max(float(curves.mean()) * K_true, 1e-3)
    pi = rng.gamma(2.0, 0.5 * words_per_doc / (mean_active * e), K_true)

    doc_time = np.repeat(np.arange(T), docs_per_t)
    D = len(doc_time)
    r = np.zeros((D, K_true), dtype=np.int8)
    beta = np.zeros((D, K_true))
    counts = np.zeros((D, P, K_true), dtype=np.int64)
    redrawn = 0
    for n in range(D):
        while True:
            r[n] = rng.random(K_true) < curves[:, doc_time[n]]
            beta[n] = np.maximum(rng.gamma(e, 1.0, K_true), MIN_MASS)
            counts[n] = rng.poisson((r[n] * pi * beta[n])[None, :] * theta.T)
            if counts[n].sum() > 0:
                break
            redrawn += 1
    W = counts.sum(axis=2)
    d, p = np.nonzero(W)
    corpus = Corpus(d, p, W[d, p], doc_time, times, P)
    state = TopicState(
        theta=theta, pi=pi, beta=beta, r=r, alloc=counts[d, p, :],
        omega=np.zeros((K_true, T + 1)), phi=np.full(K_true, phi), lam=np.ones((K_true, T + 1)),
        centers=times[:, None].copy(), hyper=TopicHyper(alpha_theta=alpha_theta, e=e), static=False,
    )
    return TopicTruth(state, curves, corpus, counts[d, p, :], redrawn)


# --------------------------------------------------------------------------
# fitting helpers used by the protocols and the CLI
# --------------------------------------------------------------------------

def fit_topics(corpus: Corpus, K: int, hyper: TopicHyper, iters: int, burnin: int, thin: int, rng,
               static: bool = False, trace_row=None, on_sweep=None):
    state = init_topic_state(corpus, K, hyper, rng, static=static)
    return run_chain(state, lambda s: gibbs_sweep(s, corpus, rng), iters, burnin, thin, trace_row, on_sweep)


def fit_lfm(data: LfmData, K: int, hyper: LfmHyper, iters: int, burnin: int, thin: int, rng,
            static: bool = False, trace_row=None, on_sweep=None):
    state = init_lfm_state(data, K, hyper, rng, static=static)
    return run_chain(state, lambda s: lfm_gibbs_sweep(s, data, rng, hyper), iters, burnin, thin, trace_row, on_sweep)


def learned_curves(samples, grid) -> np.ndarray:
    """Posterior mean of p_k(t) on ``grid``, shape (K, len(grid))."""
    samples = list(samples)
    return sum(s.thinning_probs(grid) for s in samples) / len(samples)


def missing_entry_rmse(
    data: LfmData, test_rows, K: int, hyper: LfmHyper, iters: int, burnin: int, thin: int, rng,
    static: bool = False, observed_entry=None, predict_sweeps: int = 20,
) -> float:
    """Fit on the other rows, reveal one entry of each test row and predict the rest.

    ``observed_entry[i]`` is the coordinate revealed for ``test_rows[i]``
    (random when omitted).  RMSE is over all hidden entries.
    """
    test_rows = np.asarray(test_rows)
    train_rows = np.setdiff1d(np.arange(data.N), test_rows)
    if observed_entry is None:
        observed_entry = rng.integers(data.d, size=len(test_rows))
    result = fit_lfm(data.subset(train_rows), K, hyper, iters, burnin, thin, rng, static=static)
    preds, truth = [], []
    for row, j in zip(test_rows, observed_entry):
        observed = np.zeros(data.d, dtype=bool)
        observed[j] = True
        t = data.covariates[data.tidx[row]]
        preds.append(lfm_predict_missing(result.samples, t, data.Y[row], observed, rng, n_sweeps=predict_sweeps))
        truth.append(data.Y[row, ~observed])
    return rmse(np.concatenate(preds), np.concatenate(truth))
