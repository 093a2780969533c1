"""Thinning kernels and the thinned-CRM construction.

Each atom k carries a thinning function p_k(t) in [0, 1].  At covariate t
the atom is kept with an independent Bernoulli(p_k(t)) indicator, giving
the measure B_t = sum_k r_k^t pi_k delta_{theta_k}.

Two kernel families are provided: a single-location unimodal profile and
the probit-transformed RVM expansion

    p(t) = Phi(w_0 + sum_l w_l exp(-phi ||t - t_l||^2)).

The second comes with a Gibbs block (Albert-Chib augmentation, conjugate
weight/precision updates, dictionary search for phi) shared by the latent
feature model and the topic model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri_exp

from .crm_core import DimensionError, ParameterError, TruncatedCRM, as_generator

TRUNCNORM_EPS = 1e-12


class UndefinedCorrelationError(ValueError):
    pass


class EmptyMeasureError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Fatal numerical failure (e.g. a posterior precision that is not positive definite)."""


def as_points(t, dim: int) -> np.ndarray:
    """Coerce covariate(s) into an (n, dim) array."""
    return np.asarray(t, dtype=float).reshape(-1, dim)


def squared_distances(t, centers: np.ndarray) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
    pts = as_points(t, centers.shape[1])
    return ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def design_matrix(sqdist: np.ndarray, phi: float) -> np.ndarray:
    """Rows (1, exp(-phi d_1), ..., exp(-phi d_L)) for squared distances d."""
    sqdist = np.atleast_2d(sqdist)
    return np.hstack([np.ones((sqdist.shape[0], 1)), np.exp(-phi * sqdist)])


def gaussian_profile(bandwidth: float, peak: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    if not 0.0 < peak <= 1.0:
        raise ParameterError("profile peak must lie in (0, 1]")
    if bandwidth <= 0:
        raise ParameterError("bandwidth must be positive")

    def profile(distance):
        distance = np.asarray(distance, dtype=float)
        return peak * np.exp(-0.5 * (distance / bandwidth) ** 2)

    return profile


@dataclass
class SingleLocationKernel:
    """p(t) = f(||t - center||) for a unimodal profile f peaking at distance 0.

    The default profile is a Gaussian bump of height ``peak``.  Custom
    profiles must map distances to [0, 1] and be nonincreasing.
    """

    center: np.ndarray
    bandwidth: float = 1.0
    peak: float = 1.0
    profile: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        if self.profile is None:
            self.profile = gaussian_profile(self.bandwidth, self.peak)

    def __call__(self, t) -> np.ndarray:
        pts = as_points(t, self.center.size)
        dist = np.sqrt(((pts - self.center) ** 2).sum(axis=1))
        return np.clip(self.profile(dist), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "bandwidth": self.bandwidth, "peak": self.peak}


@dataclass
class ProbitRvmKernel:
    omega: np.ndarray
    phi: float
    centers: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        centers = np.asarray(self.centers, dtype=float)
        self.centers = centers[:, None] if centers.ndim == 1 else centers
        if self.omega.shape != (self.centers.shape[0] + 1,):
            raise DimensionError(
                f"need {self.centers.shape[0] + 1} weights for {self.centers.shape[0]} centers"
            )
        if not self.phi > 0:
            raise ParameterError("kernel width must be positive")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def activation(self, t) -> np.ndarray:
        return design_matrix(squared_distances(t, self.centers), self.phi) @ self.omega

    def __call__(self, t) -> np.ndarray:
        return ndtr(self.activation(t))

    def to_dict(self) -> dict:
        return {"omega": self.omega.tolist(), "phi": float(self.phi), "centers": self.centers.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbitRvmKernel":
        return cls(np.array(d["omega"]), d["phi"], np.array(d["centers"]))


def thinning_probability(kernel, t):
    """Evaluate a kernel at one covariate (float) or several (array)."""
    p = np.asarray(kernel(t), dtype=float)
    return float(p[0]) if p.size == 1 else p


@dataclass
class ThinnedMeasure:
    source: TruncatedCRM
    indicators: np.ndarray
    covariate: object = None

    def __post_init__(self):
        self.indicators = np.asarray(self.indicators, dtype=np.int8)
        if self.indicators.shape != (self.source.K,):
            raise DimensionError("one indicator per atom is required")

    @property
    def masses(self) -> np.ndarray:
        """Per-atom masses: pi_k where retained, exactly 0 otherwise."""
        return np.where(self.indicators == 1, self.source.masses, 0.0)

    @property
    def retained(self) -> np.ndarray:
        return np.flatnonzero(self.indicators)

    def total_mass(self) -> float:
        return float(self.masses.sum())


def _kernel_probs(crm: TruncatedCRM, kernels: Sequence, t) -> np.ndarray:
    if len(kernels) != crm.K:
        raise DimensionError(f"need one kernel per atom ({crm.K}), got {len(kernels)}")
    return np.array([thinning_probability(k, t) for k in kernels], dtype=float)


def thin(crm: TruncatedCRM, kernels: Sequence, t, rng) -> ThinnedMeasure:
    rng = as_generator(rng)
    p = _kernel_probs(crm, kernels, t)
    r = rng.random(crm.K) < p
    return ThinnedMeasure(crm, r.astype(np.int8), t)


def kbp_expectation(crm: TruncatedCRM, kernels: Sequence, t) -> np.ndarray:
    """Per-atom expected masses p_k(t) pi_k of the thinned measure at t."""
    return _kernel_probs(crm, kernels, t) * crm.masses


def correlation(p, q, v=None) -> float:
    """Correlation of B_t(A) and B_t'(A) from per-atom thinning probabilities.

        sum_k v_k p_k q_k / sqrt(sum_k v_k p_k * sum_k v_k q_k)

    with v_k = Var(pi_k).  The denominator uses E[r^2] = E[r] = p, i.e.
    plain sums of p rather than Euclidean norms; the two only agree for 0/1
    probabilities.  Indicators at different covariates are independent.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise DimensionError("p and q must be vectors of equal length")
    v = np.ones_like(p) if v is None else np.asarray(v, dtype=float)
    if v.shape != p.shape:
        raise DimensionError("variance vector must match p")
    if np.any(v <= 0):
        raise ParameterError("variances must be positive")
    sp, sq = np.dot(v, p), np.dot(v, q)
    if sp <= 0 or sq <= 0:
        raise UndefinedCorrelationError("correlation undefined when a thinning vector is identically zero")
    return float(np.dot(v, p * q) / (np.sqrt(sp) * np.sqrt(sq)))


def normalize(m: ThinnedMeasure) -> np.ndarray:
    """Probability weights over the retained atoms (in atom order)."""
    masses = m.source.masses[m.retained]
    total = masses.sum()
    if masses.size == 0 or total <= 0:
        raise EmptyMeasureError("cannot normalize a measure with zero total mass")
    return masses / total


# --------------------------------------------------------------------------
# probit-RVM Gibbs block
# --------------------------------------------------------------------------

@dataclass
class RvmPrior:
    c0: float
    d0: float
    widths: np.ndarray
    precisions: np.ndarray = field(default=None)

    def __post_init__(self):
        self.widths = np.atleast_1d(np.asarray(self.widths, dtype=float))
        if self.c0 <= 0 or self.d0 <= 0:
            raise ParameterError("c0 and d0 must be positive")
        if self.widths.size < 1 or np.any(self.widths <= 0):
            raise ParameterError("width dictionary needs at least one positive entry")
        if self.precisions is not None:
            self.precisions = np.asarray(self.precisions, dtype=float)
            if np.any(self.precisions <= 0):
                raise ParameterError("precisions must be positive")


def parse_widths(text: str) -> np.ndarray:
    widths = np.array([float(s) for s in text.split(",") if s.strip()])
    if widths.size == 0 or np.any(widths <= 0):
        raise ParameterError(f"invalid width dictionary {text!r}")
    return widths


def sample_truncated_normal(mean, positive, rng, eps: float = TRUNCNORM_EPS) -> np.ndarray:
    """Unit-variance normal around ``mean`` restricted to x > 0 (positive) or x < 0.

    Inverse-CDF draw done in the log domain so that far-tail truncations
    (|mean| of several tens) stay finite.
    """
    mean = np.asarray(mean, dtype=float)
    s = np.where(np.asarray(positive, dtype=bool), 1.0, -1.0)
    u = np.clip(rng.random(mean.shape), eps, 1.0 - eps)
    w = ndtri_exp(np.log(u) + log_ndtr(s * mean))
    # s * x = s * mean - w > 0 analytically; guard against rounding at the boundary
    sx = np.maximum(s * mean - w, 1e-300)
    return s * sx


def _group_counts(r, groups, n_groups):
    r = np.asarray(r, dtype=bool)
    n1 = np.bincount(groups, r, minlength=n_groups)
    n0 = np.bincount(groups, ~r, minlength=n_groups)
    return n1, n0


def width_log_probs(r, sqdist, omega, widths, groups=None) -> np.ndarray:
    """Normalized log posterior over the width dictionary (uniform prior).

    The likelihood is prod_i p(t_i)^r_i (1 - p(t_i))^(1 - r_i) with the
    auxiliaries integrated out.
    """
    sqdist = np.atleast_2d(sqdist)
    groups = np.arange(len(r)) if groups is None else np.asarray(groups)
    n1, n0 = _group_counts(r, groups, sqdist.shape[0])
    logp = np.empty(len(widths))
    for m, phi in enumerate(widths):
        act = design_matrix(sqdist, phi) @ omega
        logp[m] = n1 @ log_ndtr(act) + n0 @ log_ndtr(-act)
    return logp - logsumexp(logp)


def sample_categorical_log(logp, rng) -> int:
    probs = np.exp(logp - logsumexp(logp))
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(idx, len(probs) - 1)


def rvm_update(r, sqdist, omega, phi, lam, c0, d0, widths, rng, groups=None):
    """One pass of the probit-RVM block on plain arrays.

    r       (n,) binary observations
    sqdist  (G, L) squared distances from the distinct covariates to the centers
    groups  (n,) row of ``sqdist`` used by each observation (identity if None)

    Returns new (omega, phi, lam).
    """
    r = np.asarray(r, dtype=bool)
    sqdist = np.atleast_2d(sqdist) if len(r) else np.zeros((0, len(omega) - 1))
    groups = np.arange(len(r)) if groups is None else np.asarray(groups)
    n_groups = sqdist.shape[0]
    D = design_matrix(sqdist, phi) if n_groups else np.zeros((0, len(omega)))

    aux = sample_truncated_normal((D @ omega)[groups], r, rng)

    size = np.bincount(groups, minlength=n_groups).astype(float)
    Q = np.diag(lam) + (D.T * size) @ D
    try:
        chol = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("RVM weight posterior precision is not positive definite") from exc
    rhs = D.T @ np.bincount(groups, aux, minlength=n_groups)
    mean = solve_triangular(chol.T, solve_triangular(chol, rhs, lower=True), lower=False)
    omega = mean + solve_triangular(chol.T, rng.standard_normal(len(lam)), lower=False)

    lam = rng.gamma(c0 + 0.5, 1.0 / (d0 + 0.5 * omega**2))
    lam = np.maximum(lam, np.finfo(float).tiny)

    widths = np.asarray(widths, dtype=float)
    phi = float(widths[sample_categorical_log(width_log_probs(r, sqdist, omega, widths, groups), rng)])
    return omega, phi, lam


def rvm_gibbs_block(indicators, covariates, kernel: ProbitRvmKernel, prior: RvmPrior, rng):
    """Update (auxiliaries, weights, precisions, width) of one probit-RVM kernel.

    ``indicators[i]`` is the binary thinning outcome observed at
    ``covariates[i]``.  Returns the updated kernel and the updated prior
    (carrying the new precisions).
    """
    rng = as_generator(rng)
    r = np.asarray(indicators).reshape(-1)
    if len(r):
        sqdist = squared_distances(covariates, kernel.centers)
        if sqdist.shape[0] != len(r):
            raise DimensionError("one covariate per indicator is required")
    else:
        sqdist = np.zeros((0, kernel.centers.shape[0]))
    lam = prior.precisions if prior.precisions is not None else np.ones(len(kernel.omega))
    if lam.shape != kernel.omega.shape:
        raise DimensionError("one precision per weight is required")
    omega, phi, lam = rvm_update(r, sqdist, kernel.omega, kernel.phi, lam, prior.c0, prior.d0, prior.widths, rng)
    return (
        ProbitRvmKernel(omega, phi, kernel.centers),
        RvmPrior(prior.c0, prior.d0, prior.widths, lam),
    )


def rvm_prior_draw(n_weights: int, c0: float, d0: float, widths, rng):
    """(omega, phi, lam) from NiG(0, c0, d0) weights and a uniform width."""
    lam = np.maximum(rng.gamma(c0, 1.0 / d0, size=n_weights), np.finfo(float).tiny)
    omega = rng.standard_normal(n_weights) / np.sqrt(lam)
    widths = np.asarray(widths, dtype=float)
    phi = float(widths[rng.integers(len(widths))])
    return omega, phi, lam
