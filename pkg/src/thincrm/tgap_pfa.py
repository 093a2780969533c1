"""Thinned gamma process Poisson factor analysis (tGaP-PFA).

    pi_k             ~ Gamma(gamma/K, lambda)          truncated gamma process
    theta_k          ~ Dirichlet(alpha_theta)          topics over P words
    r_k^{n,t}        ~ Bernoulli(p_k(t))               probit-RVM thinning
    beta_k^{n,t}     ~ Gamma(e, 1)
    w~_{pntk}        ~ Poisson(theta_kp r_k^{n,t} pi_k beta_k^{n,t})
    w_{pnt}          = sum_k w~_{pntk}

Allocations are stored per nonzero corpus cell as a (C, K) integer array.
Because every theta_k sums to one, the total rate of topic k in a
document is r pi_k beta_k, which keeps the indicator update cheap.

``static=True`` fixes every r = 1 (the stationary model).
``force_active`` keeps at least one topic active in every document; it
only binds on documents without counts, since any topic holding counts is
always active.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .corpus import Corpus
from .crm_core import MIN_MASS
from .thinning import ProbitRvmKernel, rvm_prior_draw, rvm_update, squared_distances

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (0.01, 0.05, 0.1, 0.5, 1.0)


class InvariantViolation(RuntimeError):
    pass


@dataclass
class TopicHyper:
    alpha_theta: float = 0.05
    e: float = 1.0
    c0: float = 1.0
    d0: float = 1.0
    widths: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_WIDTHS))
    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    force_active: bool = True

    def __post_init__(self):
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=float))
        for name in ("alpha_theta", "e", "c0", "d0", "gamma_shape", "gamma_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["widths"] = self.widths.tolist()
        return d


@dataclass
class TopicState:
    theta: np.ndarray       # (K, P)
    pi: np.ndarray          # (K,)
    beta: np.ndarray        # (D, K)
    r: np.ndarray           # (D, K) int8
    alloc: np.ndarray       # (C, K) int64
    omega: np.ndarray       # (K, L + 1)
    phi: np.ndarray         # (K,)
    lam: np.ndarray         # (K, L + 1)
    centers: np.ndarray     # (L, 1)
    hyper: TopicHyper
    static: bool = False

    @property
    def K(self) -> int:
        return len(self.pi)

    def kernel(self, k: int) -> ProbitRvmKernel:
        return ProbitRvmKernel(self.omega[k], self.phi[k], self.centers)

    def thinning_probs(self, t) -> np.ndarray:
        """(n, K) matrix of p_k(t) for covariates t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.static:
            return np.ones((len(t), self.K))
        return np.array([self.kernel(k)(t) for k in range(self.K)]).T

    def topic_counts(self) -> np.ndarray:
        return self.alloc.sum(axis=0)

    def copy(self) -> "TopicState":
        return TopicState(**{
            k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()
        })

    def check(self, corpus: Corpus) -> None:
        """Raise InvariantViolation if any structural invariant fails."""
        if np.any(np.abs(self.theta.sum(axis=1) - 1.0) > 1e-12) or np.any(self.theta <= 0):
            raise InvariantViolation("topic off the simplex")
        if np.any(self.pi <= 0) or np.any(self.beta <= 0):
            raise InvariantViolation("nonpositive rate")
        if not np.array_equal(self.alloc.sum(axis=1), corpus.cell_count):
            raise InvariantViolation("allocations do not sum to the observed counts")
        if np.any(self.alloc < 0):
            raise InvariantViolation("negative allocation")
        if np.any((self.alloc > 0) & (self.r[corpus.cell_doc] == 0)):
            raise InvariantViolation("words allocated to a thinned topic")
        if self.hyper.force_active and np.any(self.r.sum(axis=1) == 0):
            raise InvariantViolation("document with every topic thinned")

    def to_dict(self) -> dict:
        """Snapshot used for evaluation (allocations are not stored)."""
        return {
            "theta": self.theta.tolist(),
            "pi": self.pi.tolist(),
            "beta": self.beta.tolist(),
            "r": self.r.astype(int).tolist(),
            "kernels": [self.kernel(k).to_dict() for k in range(self.K)],
            "lam": self.lam.tolist(),
            "hyper": self.hyper.to_dict(),
            "static": bool(self.static),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopicState":
        kernels = [ProbitRvmKernel.from_dict(k) for k in d["kernels"]]
        K = len(d["pi"])
        return cls(
            theta=np.array(d["theta"]), pi=np.array(d["pi"]), beta=np.array(d["beta"]).reshape(-1, K),
            r=np.array(d["r"], dtype=np.int8).reshape(-1, K), alloc=np.zeros((0, K), dtype=np.int64),
            omega=np.array([k.omega for k in kernels]), phi=np.array([k.phi for k in kernels]),
            lam=np.array(d["lam"]), centers=kernels[0].centers,
            hyper=TopicHyper(**d["hyper"]), static=d.get("static", False),
        )


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _per_doc(corpus: Corpus, alloc: np.ndarray) -> np.ndarray:
    """(D, K) sums of allocations over words."""
    K = alloc.shape[1]
    out = np.empty((corpus.D, K), dtype=np.int64)
    for k in range(K):
        out[:, k] = np.bincount(corpus.cell_doc, alloc[:, k], minlength=corpus.D)
    return out


def _per_word(corpus: Corpus, alloc: np.ndarray) -> np.ndarray:
    """(K, P) sums of allocations over documents."""
    K = alloc.shape[1]
    out = np.empty((K, corpus.P), dtype=np.int64)
    for k in range(K):
        out[k] = np.bincount(corpus.cell_word, alloc[:, k], minlength=corpus.P)
    return out


def sample_dirichlet_rows(alpha: np.ndarray, rng) -> np.ndarray:
    """Row-wise Dirichlet draws that stay strictly positive for tiny alpha.

    Uses Gamma(a) = Gamma(a + 1) U^(1/a) in the log domain.
    """
    alpha = np.asarray(alpha, dtype=float)
    g = rng.gamma(alpha + 1.0)
    logx = np.log(g) + np.log(rng.random(alpha.shape)) / alpha
    x = np.exp(logx - logsumexp(logx, axis=-1, keepdims=True))
    x = np.maximum(x, MIN_MASS)
    return x / x.sum(axis=-1, keepdims=True)


def _positive_gamma(shape, rate, rng) -> np.ndarray:
    return np.maximum(rng.gamma(shape, 1.0 / np.asarray(rate)), MIN_MASS)


def _doc_sqdist(state: TopicState, corpus: Corpus) -> np.ndarray:
    return squared_distances(corpus.times, state.centers)


def doc_thinning_probs(state: TopicState, corpus: Corpus) -> np.ndarray:
    """(D, K) thinning probabilities at each document's timestamp."""
    return state.thinning_probs(corpus.times)[corpus.doc_time]


def indicator_case3_masses(p, R) -> np.ndarray:
    """Normalized masses of the three sub-cases for a topic with no allocated words.

    (u = 0, r = 1), (some u > 0, r = 0), (u = 0, r = 0) with the fictitious
    counts u ~ Poisson(rho_p) and R = sum_p rho_p.  Stacked on the last axis.
    """
    p = np.asarray(p, dtype=float)
    R = np.asarray(R, dtype=float)
    none = np.exp(-R)
    masses = np.stack([p * none, (1.0 - p) * -np.expm1(-R), (1.0 - p) * none], axis=-1)
    return masses / masses.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# conditional updates
# --------------------------------------------------------------------------

def sample_topics(state: TopicState, corpus: Corpus, rng) -> np.ndarray:
    return sample_dirichlet_rows(state.hyper.alpha_theta + _per_word(corpus, state.alloc), rng)


def pi_posterior(state: TopicState) -> tuple[np.ndarray, np.ndarray]:
    """Gamma (shape, rate) of each pi_k given allocations, beta and r."""
    h = state.hyper
    shape = state.alloc.sum(axis=0) + h.gamma_shape / state.K
    rate = (state.r * state.beta).sum(axis=0) + h.gamma_rate
    return shape, rate


def sample_pi(state: TopicState, rng) -> np.ndarray:
    shape, rate = pi_posterior(state)
    return _positive_gamma(shape, rate, rng)


def beta_posterior(state: TopicState, corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    shape = _per_doc(corpus, state.alloc) + state.hyper.e
    rate = state.r * state.pi[None, :] + 1.0
    return shape, rate


def sample_beta(state: TopicState, corpus: Corpus, rng) -> np.ndarray:
    shape, rate = beta_posterior(state, corpus)
    return _positive_gamma(shape, rate, rng)


def allocation_probs(state: TopicState, corpus: Corpus) -> np.ndarray:
    """(C, K) unnormalized rates theta_pk r pi_k beta_k for every cell."""
    doc_rate = state.r * state.pi[None, :] * state.beta
    return state.theta[:, corpus.cell_word].T * doc_rate[corpus.cell_doc]


def sample_allocations(state: TopicState, corpus: Corpus, rng) -> np.ndarray:
    """Multinomial split of every cell count, via sequential conditional binomials."""
    rates = allocation_probs(state, corpus)
    tail = np.cumsum(rates[:, ::-1], axis=1)[:, ::-1]
    if np.any((tail[:, 0] <= 0) & (corpus.cell_count > 0)):
        raise InvariantViolation("a word has zero rate under every active topic")
    remaining = corpus.cell_count.copy()
    alloc = np.zeros(rates.shape, dtype=np.int64)
    K = rates.shape[1]
    for k in range(K - 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            prob = np.where(tail[:, k] > 0, rates[:, k] / tail[:, k], 0.0)
        x = rng.binomial(remaining, np.clip(prob, 0.0, 1.0))
        alloc[:, k] = x
        remaining -= x
    alloc[:, K - 1] = remaining
    return alloc


def sample_indicators(state: TopicState, corpus: Corpus, rng) -> np.ndarray:
    """Resample r given allocations.

    A topic holding words is active.  A topic with no words is active with
    the first of the three fictitious-count sub-cases.  With force_active,
    documents without any words are scanned topic by topic and the last
    candidate is switched on if every other topic is off.
    """
    if state.static:
        return np.ones_like(state.r)
    p = doc_thinning_probs(state, corpus)
    n_dk = _per_doc(corpus, state.alloc)
    R = state.pi[None, :] * state.beta
    masses = indicator_case3_masses(p, R)
    u = rng.random(p.shape)
    r = np.where(n_dk > 0, 1, u < masses[..., 0]).astype(np.int8)

    if state.hyper.force_active:
        empty = np.flatnonzero(n_dk.sum(axis=1) == 0)
        for n in empty:
            row = r[n].copy()
            for k in range(state.K):
                others = row.sum() - row[k]
                row[k] = 1 if others == 0 else int(u[n, k] < masses[n, k, 0])
            r[n] = row
    return r


def sample_rvm(state: TopicState, corpus: Corpus, rng):
    sqdist = _doc_sqdist(state, corpus)
    omega, phi, lam = state.omega.copy(), state.phi.copy(), state.lam.copy()
    h = state.hyper
    for k in range(state.K):
        omega[k], phi[k], lam[k] = rvm_update(
            state.r[:, k], sqdist, omega[k], phi[k], lam[k], h.c0, h.d0, h.widths, rng,
            groups=corpus.doc_time,
        )
    return omega, phi, lam


def gibbs_sweep(state: TopicState, corpus: Corpus, rng) -> TopicState:
    """Allocations, indicators, topics, pi, beta, then the RVM kernels."""
    s = state.copy()
    s.alloc = sample_allocations(s, corpus, rng)
    s.r = sample_indicators(s, corpus, rng)
    s.theta = sample_topics(s, corpus, rng)
    s.pi = sample_pi(s, rng)
    s.beta = sample_beta(s, corpus, rng)
    if not s.static:
        s.omega, s.phi, s.lam = sample_rvm(s, corpus, rng)
    return s


# --------------------------------------------------------------------------
# initialization, likelihood, forward simulation
# --------------------------------------------------------------------------

def init_topic_state(corpus: Corpus, K: int, hyper: TopicHyper, rng, static: bool = False) -> TopicState:
    """Random allocations followed by conditional draws of theta, pi and beta."""
    L = corpus.T
    alloc = rng.multinomial(corpus.cell_count, np.full(K, 1.0 / K)) if corpus.C else np.zeros((0, K), dtype=np.int64)
    state = TopicState(
        theta=np.full((K, corpus.P), 1.0 / corpus.P), pi=np.ones(K),
        beta=np.ones((corpus.D, K)), r=np.ones((corpus.D, K), dtype=np.int8),
        alloc=np.asarray(alloc, dtype=np.int64),
        omega=np.tile(np.r_[1.0, np.zeros(L)], (K, 1)),
        phi=np.full(K, hyper.widths[len(hyper.widths) // 2]),
        lam=np.ones((K, L + 1)), centers=corpus.times[:, None].copy(),
        hyper=hyper, static=static,
    )
    state.theta = sample_topics(state, corpus, rng)
    state.pi = sample_pi(state, rng)
    state.beta = sample_beta(state, corpus, rng)
    return state


def log_likelihood(state: TopicState, corpus: Corpus) -> float:
    """log p(w | theta, pi, beta, r)."""
    rate = allocation_probs(state, corpus).sum(axis=1)
    total = float((state.r * state.pi[None, :] * state.beta).sum())
    w = corpus.cell_count
    return float(np.sum(w * np.log(rate) - gammaln(w + 1.0)) - total)


def active_topics(state: TopicState) -> int:
    return int((state.topic_counts() > 0).sum())


def topic_prior_draw(K: int, corpus: Corpus, hyper: TopicHyper, rng, static: bool = False) -> TopicState:
    """Every latent variable from the prior on the corpus layout (documents and times)."""
    P, D, L = corpus.P, corpus.D, corpus.T
    theta = sample_dirichlet_rows(np.full((K, P), hyper.alpha_theta), rng)
    pi = _positive_gamma(np.full(K, hyper.gamma_shape / K), hyper.gamma_rate, rng)
    omega = np.empty((K, L + 1))
    phi = np.empty(K)
    lam = np.empty((K, L + 1))
    for k in range(K):
        omega[k], phi[k], lam[k] = rvm_prior_draw(L + 1, hyper.c0, hyper.d0, hyper.widths, rng)
    state = TopicState(theta, pi, np.ones((D, K)), np.ones((D, K), dtype=np.int8),
                       np.zeros((corpus.C, K), dtype=np.int64), omega, phi, lam,
                       corpus.times[:, None].copy(), hyper, static)
    if not static:
        state.r = (rng.random((D, K)) < doc_thinning_probs(state, corpus)).astype(np.int8)
    state.beta = _positive_gamma(np.full((D, K), hyper.e), 1.0, rng)
    return state


def simulate_counts(state: TopicState, corpus: Corpus, rng) -> tuple[Corpus, np.ndarray]:
    """Draw w~ ~ Poisson(theta r pi beta) on corpus's documents.

    Returns the new corpus (nonzero cells only) and its (C, K) allocations.
    """
    P = state.theta.shape[1]
    doc_rate = state.r * state.pi[None, :] * state.beta
    wt = rng.poisson(doc_rate[:, None, :] * state.theta.T[None, :, :])   # (D, P, K)
    W = wt.sum(axis=2)
    d, p = np.nonzero(W)
    new = Corpus(d, p, W[d, p], corpus.doc_time, corpus.times, P, corpus.doc_ids, corpus.vocab)
    return new, wt[d, p, :].astype(np.int64)


# --------------------------------------------------------------------------
# prediction and reports
# --------------------------------------------------------------------------

def predictive_rate(samples, t) -> np.ndarray:
    """Expected word rates for a new document at covariate t.

    Per sample the rate is sum_k theta_k pi_k E[r_k] E[beta_k] with
    E[r_k] = p_k(t) and E[beta_k] = e; samples are averaged.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("at least one posterior sample is required")
    total = 0.0
    for s in samples:
        weight = s.pi * s.thinning_probs(t)[0] * s.hyper.e
        total = total + weight @ s.theta
    rate = total / len(samples)
    return np.maximum(rate, MIN_MASS)


def activation_curves(samples, corpus: Corpus) -> np.ndarray:
    """(K, T) mean of r over documents at each timestamp, averaged over samples."""
    counts = np.maximum(corpus.docs_per_time, 1)
    curves = 0.0
    samples = list(samples)
    for s in samples:
        sums = np.array([np.bincount(corpus.doc_time, s.r[:, k], minlength=corpus.T) for k in range(s.K)])
        curves = curves + sums / counts
    return curves / len(samples)


def top_words(theta_k: np.ndarray, vocab, n: int = 5) -> list[tuple[str, float]]:
    order = np.argsort(-theta_k, kind="stable")[:n]
    return [(vocab[i] if vocab is not None else str(i), float(theta_k[i])) for i in order]
