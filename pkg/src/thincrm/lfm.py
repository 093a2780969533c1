"""Covariate-dependent linear-Gaussian latent feature model.

    pi_k      ~ Beta(1/K, 1 - 1/K)                  (truncated beta process)
    r_k^t     ~ Bernoulli(p_k(t))                   (probit-RVM thinning)
    z_k^{n,t} ~ Bernoulli(r_k^t pi_k)
    A_k       ~ N(0, sigma_A^2 I)
    y^{n,t}   ~ N(sum_k z_k^{n,t} A_k, sigma^2 I)

Inference writes z = b AND r with b_k^{n,t} ~ Bernoulli(pi_k), which makes
the pi update conjugate.  The pair (r_k^t, b_k^{., t}) is drawn jointly:
r marginally with the b's summed out, then each b given r.

``static=True`` fixes r = 1 everywhere, giving the exchangeable
beta-Bernoulli feature model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, log_ndtr, logsumexp

from .crm_core import DimensionError, MIN_MASS
from .thinning import (
    NumericalError,
    ProbitRvmKernel,
    rvm_prior_draw,
    rvm_update,
    squared_distances,
)

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (0.01, 0.05, 0.1, 0.5, 1.0)


@dataclass
class LfmHyper:
    c0: float = 1.0
    d0: float = 1.0
    widths: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_WIDTHS))
    noise_shape: float = 1.0
    noise_scale: float = 1.0
    feature_shape: float = 1.0
    feature_scale: float = 1.0

    def __post_init__(self):
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=float))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["widths"] = self.widths.tolist()
        return d


@dataclass
class LfmData:
    """Observations y^{n,t} with covariate index ``tidx[n]`` into ``covariates``.

    ``covariates`` may contain values without data (plotting grid).
    ``mask[n, d]`` is True where the entry is observed.  ``Z``/``r`` hold the
    generating latent variables for synthetic data.
    """

    Y: np.ndarray
    tidx: np.ndarray
    covariates: np.ndarray
    mask: np.ndarray | None = None
    Z: np.ndarray | None = None
    r: np.ndarray | None = None

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.tidx = np.asarray(self.tidx, dtype=np.int64)
        cov = np.asarray(self.covariates, dtype=float)
        self.covariates = cov[:, None] if cov.ndim == 1 else cov
        if self.mask is None:
            self.mask = ~np.isnan(self.Y)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.Y.shape:
            raise DimensionError("mask must match the data shape")
        if self.tidx.shape != (self.Y.shape[0],):
            raise DimensionError("every observation needs a covariate")
        if len(self.tidx) and (self.tidx.min() < 0 or self.tidx.max() >= len(self.covariates)):
            raise DimensionError("covariate index out of range")
        self.Y = np.where(self.mask, self.Y, 0.0)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def d(self) -> int:
        return self.Y.shape[1]

    @property
    def T(self) -> int:
        return self.covariates.shape[0]

    @classmethod
    def from_points(cls, t, Y, mask=None) -> "LfmData":
        t = np.asarray(t, dtype=float)
        grid, tidx = np.unique(t, return_inverse=True)
        return cls(Y, tidx.reshape(-1), grid, mask)

    def subset(self, rows) -> "LfmData":
        rows = np.asarray(rows)
        return LfmData(
            self.Y[rows], self.tidx[rows], self.covariates, self.mask[rows],
            None if self.Z is None else self.Z[rows], self.r,
        )

    def save(self, path) -> None:
        """Tab-separated rows ``t  y_1 ... y_d`` (unobserved entries as nan)."""
        lines = []
        for n in range(self.N):
            t = self.covariates[self.tidx[n]]
            tcol = repr(float(t[0])) if t.size == 1 else ",".join(repr(float(v)) for v in t)
            vals = [repr(float(v)) if m else "nan" for v, m in zip(self.Y[n], self.mask[n])]
            lines.append("\t".join([tcol, *vals]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "LfmData":
        rows = [ln.split("\t") for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not rows:
            raise ValueError(f"{path}: no data rows")
        t = np.array([float(r[0]) for r in rows])
        Y = np.array([[float(v) for v in r[1:]] for r in rows])
        return cls.from_points(t, Y)


@dataclass
class LfmTruth:
    """Generating parameters: masses, features, curves p_k(t) on the covariate grid."""

    pi: np.ndarray
    A: np.ndarray
    curves: np.ndarray
    sigma2: float
    kernels: list | None = None


@dataclass
class LfmState:
    pi: np.ndarray
    A: np.ndarray
    omega: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    r: np.ndarray
    b: np.ndarray
    Z: np.ndarray
    sigma2: float
    sigma_a2: float
    centers: np.ndarray
    static: bool = False

    @property
    def K(self) -> int:
        return len(self.pi)

    def kernel(self, k: int) -> ProbitRvmKernel:
        return ProbitRvmKernel(self.omega[k], self.phi[k], self.centers)

    def thinning_probs(self, covariates) -> np.ndarray:
        """(K, n) matrix of p_k(t)."""
        if self.static:
            return np.ones((self.K, len(np.atleast_1d(covariates))))
        return np.array([self.kernel(k)(covariates) for k in range(self.K)])

    def check(self) -> None:
        if self.Z.shape != self.b.shape:
            raise DimensionError("Z and b disagree in shape")
        if not np.all((0 < self.pi) & (self.pi < 1)):
            raise ValueError("feature masses left (0, 1)")

    def copy(self) -> "LfmState":
        return LfmState(**{
            k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()
        })

    def to_dict(self) -> dict:
        return {
            "pi": self.pi.tolist(),
            "A": self.A.tolist(),
            "kernels": [self.kernel(k).to_dict() for k in range(self.K)],
            "lam": self.lam.tolist(),
            "r": self.r.astype(int).tolist(),
            "sigma2": float(self.sigma2),
            "sigma_a2": float(self.sigma_a2),
            "static": bool(self.static),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LfmState":
        kernels = [ProbitRvmKernel.from_dict(k) for k in d["kernels"]]
        K, dim = len(d["pi"]), len(d["A"][0])
        return cls(
            pi=np.array(d["pi"]), A=np.array(d["A"]),
            omega=np.array([k.omega for k in kernels]),
            phi=np.array([k.phi for k in kernels]),
            lam=np.array(d["lam"]), r=np.array(d["r"], dtype=np.int8),
            b=np.zeros((0, K), dtype=np.int8), Z=np.zeros((0, K), dtype=np.int8),
            sigma2=d["sigma2"], sigma_a2=d["sigma_a2"],
            centers=kernels[0].centers if kernels else np.zeros((0, dim)),
            static=d.get("static", False),
        )


def _log_thin_probs(state: LfmState, sqdist: np.ndarray):
    """log p_k(t), log(1 - p_k(t)) on the covariate grid, each (K, T)."""
    K = state.K
    act = np.array([
        state.omega[k, 0] + np.exp(-state.phi[k] * sqdist) @ state.omega[k, 1:] for k in range(K)
    ]).reshape(K, -1)
    return log_ndtr(act), log_ndtr(-act)


def br_cell_probs(pi: float, p: float, log_l1: float, log_l0: float) -> np.ndarray:
    """Normalized joint of (b, r) for one point: rows b in (0, 1), columns r in (0, 1).

    z = b*r, so only the (1, 1) cell sees the feature-on likelihood.
    """
    with np.errstate(divide="ignore"):
        lb = np.log([1.0 - pi, pi])
        lr = np.log([1.0 - p, p])
    logw = lb[:, None] + lr[None, :] + log_l0
    logw[1, 1] += log_l1 - log_l0
    return np.exp(logw - logsumexp(logw))


def init_lfm_state(data: LfmData, K: int, hyper: LfmHyper, rng, static: bool = False) -> LfmState:
    N, d, T = data.N, data.d, data.T
    centers = data.covariates
    L = centers.shape[0]
    observed = data.Y[data.mask]
    var = float(observed.var()) if observed.size > 1 else 1.0
    b = (rng.random((N, K)) < 0.2).astype(np.int8)
    r = np.ones((K, T), dtype=np.int8)
    state = LfmState(
        pi=np.full(K, 0.2),
        A=np.zeros((K, d)),
        omega=np.zeros((K, L + 1)) + np.r_[1.0, np.zeros(L)],
        phi=np.full(K, hyper.widths[len(hyper.widths) // 2]),
        lam=np.ones((K, L + 1)),
        r=r, b=b, Z=b.copy(),
        sigma2=max(var / 2, 1e-3), sigma_a2=max(var, 1e-3),
        centers=centers, static=static,
    )
    state.A = _sample_features(state, data, rng)
    return state


def _sample_features(state: LfmState, data: LfmData, rng) -> np.ndarray:
    K, d = state.K, data.d
    Z = state.Z.astype(float)
    s2, sa2 = state.sigma2, state.sigma_a2
    eye = np.eye(K) / sa2
    if data.mask.all():
        blocks = [(slice(None), Z.T @ Z / s2 + eye)]
    else:
        M = data.mask.astype(float)
        blocks = [(j, (Z * M[:, j:j + 1]).T @ Z / s2 + eye) for j in range(d)]
    A = np.empty((K, d))
    noise = rng.standard_normal((K, d))
    for cols, Q in blocks:
        try:
            chol = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("feature posterior precision is not positive definite") from exc
        rhs = Z.T @ data.Y[:, cols] / s2
        mean = cho_solve((chol, True), rhs)
        A[:, cols] = mean + solve_triangular(chol.T, noise[:, cols], lower=False)
    return A


def lfm_gibbs_sweep(state: LfmState, data: LfmData, rng, hyper: LfmHyper | None = None) -> LfmState:
    """One systematic scan: (b, r) per feature, A, pi, RVM kernels, noise scales."""
    hyper = hyper or LfmHyper()
    s = state.copy()
    K, N, T = s.K, data.N, data.T
    M = data.mask.astype(float)
    tidx = data.tidx
    sqdist = squared_distances(data.covariates, s.centers)

    # (b, r) jointly, feature by feature
    E = (data.Y - s.Z @ s.A) * M
    if not s.static:
        logp1, logp0 = _log_thin_probs(s, sqdist)
    for k in range(K):
        Ak = s.A[k]
        zk = s.Z[:, k]
        Ek = E + zk[:, None] * Ak * M
        delta = (Ek @ Ak - 0.5 * M @ (Ak**2)) / s.sigma2
        lpi, l1pi = np.log(s.pi[k]), np.log1p(-s.pi[k])
        if s.static:
            rk = np.ones(T, dtype=bool)
        else:
            on = np.logaddexp(lpi + delta, l1pi)
            log_r1 = logp1[k] + np.bincount(tidx, on, minlength=T)
            rk = rng.random(T) < expit(log_r1 - logp0[k])
        rk_pt = rk[tidx]
        pb = np.where(rk_pt, expit(lpi + delta - l1pi), s.pi[k])
        bk = rng.random(N) < pb
        znew = bk & rk_pt
        s.r[k] = rk
        s.b[:, k] = bk
        s.Z[:, k] = znew
        E = Ek - znew[:, None] * Ak * M

    s.A = _sample_features(s, data, rng)

    m = s.b.sum(axis=0)
    pi = rng.beta(1.0 / K + m, 1.0 - 1.0 / K + N - m)
    s.pi = np.clip(pi, MIN_MASS, np.nextafter(1.0, 0.0))

    if not s.static:
        for k in range(K):
            s.omega[k], s.phi[k], s.lam[k] = rvm_update(
                s.r[k], sqdist, s.omega[k], s.phi[k], s.lam[k],
                hyper.c0, hyper.d0, hyper.widths, rng,
            )

    resid = (data.Y - s.Z @ s.A) * M
    n_obs = M.sum()
    sse = float((resid**2).sum())
    s.sigma2 = 1.0 / rng.gamma(hyper.noise_shape + 0.5 * n_obs, 1.0 / (hyper.noise_scale + 0.5 * sse))
    s.sigma_a2 = 1.0 / rng.gamma(
        hyper.feature_shape + 0.5 * s.A.size, 1.0 / (hyper.feature_scale + 0.5 * float((s.A**2).sum()))
    )
    return s


def log_likelihood(state: LfmState, data: LfmData) -> float:
    resid = (data.Y - state.Z @ state.A) * data.mask
    n_obs = data.mask.sum()
    return float(-0.5 * n_obs * np.log(2 * np.pi * state.sigma2) - 0.5 * (resid**2).sum() / state.sigma2)


def active_features(state: LfmState) -> int:
    return int((state.Z.sum(axis=0) > 0).sum())


# --------------------------------------------------------------------------
# forward simulation
# --------------------------------------------------------------------------

def lfm_generate(truth: LfmTruth, covariates, counts, rng) -> LfmData:
    """Draw data from the generative model given truth on a covariate grid.

    ``counts[t]`` points are generated at ``covariates[t]``; the drawn
    indicators r (K, T) and assignments Z (N, K) are attached to the result.
    """
    covariates = np.asarray(covariates, dtype=float)
    counts = np.asarray(counts, dtype=int)
    K, d = truth.A.shape
    T = len(counts)
    curves = np.asarray(truth.curves, dtype=float).reshape(K, T)
    r = (rng.random((K, T)) < curves).astype(np.int8)
    tidx = np.repeat(np.arange(T), counts)
    N = len(tidx)
    prob = r[:, tidx].T * np.asarray(truth.pi)[None, :]
    Z = (rng.random((N, K)) < prob).astype(np.int8)
    Y = Z @ truth.A + np.sqrt(truth.sigma2) * rng.standard_normal((N, d))
    return LfmData(Y, tidx, covariates, np.ones((N, d), dtype=bool), Z=Z, r=r)


def lfm_prior_draw(K: int, d: int, data: LfmData, hyper: LfmHyper, rng, static: bool = False) -> LfmState:
    """Every latent quantity drawn from the prior, on data's covariate layout."""
    centers = data.covariates
    L, T, N = centers.shape[0], data.T, data.N
    pi = np.clip(rng.beta(1.0 / K, 1.0 - 1.0 / K, size=K), MIN_MASS, np.nextafter(1.0, 0.0))
    omega = np.empty((K, L + 1))
    phi = np.empty(K)
    lam = np.empty((K, L + 1))
    for k in range(K):
        omega[k], phi[k], lam[k] = rvm_prior_draw(L + 1, hyper.c0, hyper.d0, hyper.widths, rng)
    sigma2 = 1.0 / rng.gamma(hyper.noise_shape, 1.0 / hyper.noise_scale)
    sigma_a2 = 1.0 / rng.gamma(hyper.feature_shape, 1.0 / hyper.feature_scale)
    A = np.sqrt(sigma_a2) * rng.standard_normal((K, d))
    state = LfmState(pi, A, omega, phi, lam, np.ones((K, T), dtype=np.int8),
                     np.zeros((N, K), dtype=np.int8), np.zeros((N, K), dtype=np.int8),
                     sigma2, sigma_a2, centers, static)
    if not static:
        state.r = (rng.random((K, T)) < state.thinning_probs(data.covariates)).astype(np.int8)
    state.b = (rng.random((N, K)) < pi).astype(np.int8)
    state.Z = state.b * state.r[:, data.tidx].T
    return state


def lfm_simulate(state: LfmState, data: LfmData, rng) -> LfmData:
    """Fresh observations y ~ N(Z A, sigma^2 I) on data's layout."""
    Y = state.Z @ state.A + np.sqrt(state.sigma2) * rng.standard_normal((data.N, state.A.shape[1]))
    return LfmData(Y, data.tidx, data.covariates)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def _indicators_at(state: LfmState, t, rng) -> np.ndarray:
    if state.static:
        return np.ones(state.K, dtype=bool)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    match = np.flatnonzero(np.all(np.isclose(state.centers, t[None, :]), axis=1))
    if match.size and state.r.shape[1] == state.centers.shape[0]:
        return state.r[:, match[0]].astype(bool)
    return rng.random(state.K) < state.thinning_probs(t)[:, 0]


def lfm_predict_missing(samples, t, y, observed, rng, n_sweeps: int = 20, burn: int = 5) -> np.ndarray:
    """Predict the unobserved coordinates of one test point.

    For every posterior sample the point's assignments are Gibbs-sampled
    given its observed entries (z_k ~ Bernoulli(r_k^t pi_k) a priori); the
    prediction is the average of Z A over sweeps and samples.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("at least one posterior sample is required")
    y = np.asarray(y, dtype=float)
    obs = np.asarray(observed, dtype=bool)
    miss = ~obs
    total = np.zeros(miss.sum())
    for s in samples:
        r = _indicators_at(s, t, rng)
        A_obs, A_miss = s.A[:, obs], s.A[:, miss]
        logit_pi = np.log(s.pi) - np.log1p(-s.pi)
        z = r & (rng.random(s.K) < s.pi)
        acc = np.zeros(miss.sum())
        for sweep in range(n_sweeps):
            for k in np.flatnonzero(r):
                z[k] = False
                e = y[obs] - z @ A_obs
                delta = (e @ A_obs[k] - 0.5 * A_obs[k] @ A_obs[k]) / s.sigma2
                z[k] = rng.random() < expit(logit_pi[k] + delta)
            if sweep >= burn:
                acc += z @ A_miss
        total += acc / (n_sweeps - burn)
    return total / len(samples)
