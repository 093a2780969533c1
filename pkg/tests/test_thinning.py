import numpy as np
import pytest
from scipy.stats import norm

from thincrm.crm_core import Atom, DimensionError, LevySpec, TruncatedCRM, draw_truncated_crm
from thincrm.geweke import geweke_z, getting_it_right
from thincrm.thinning import (
    EmptyMeasureError,
    ProbitRvmKernel,
    RvmPrior,
    SingleLocationKernel,
    ThinnedMeasure,
    UndefinedCorrelationError,
    correlation,
    kbp_expectation,
    normalize,
    parse_widths,
    rvm_gibbs_block,
    rvm_prior_draw,
    rvm_update,
    sample_truncated_normal,
    squared_distances,
    thin,
    thinning_probability,
    width_log_probs,
)


class Const:
    def __init__(self, p):
        self.p = p

    def __call__(self, t):
        return np.full(np.size(t), self.p)


def crm_of(masses):
    fam = LevySpec.gamma(len(masses))
    return TruncatedCRM([Atom(m) for m in masses], fam)


# kernels ------------------------------------------------------------------

def test_probit_rvm_zero_weights_is_half():
    k = ProbitRvmKernel(np.zeros(4), 0.5, np.arange(3.0))
    assert thinning_probability(k, 1.7) == 0.5


def test_probit_rvm_intercept_one():
    k = ProbitRvmKernel(np.r_[1.0, 0, 0, 0], 0.5, np.arange(3.0))
    assert thinning_probability(k, 2.3) == pytest.approx(0.8413447460685429, abs=1e-15)


def test_probit_rvm_activation_by_hand():
    k = ProbitRvmKernel(np.array([0.2, -1.0, 0.5]), 0.3, np.array([0.0, 2.0]))
    t = 1.5
    act = 0.2 - np.exp(-0.3 * 1.5**2) + 0.5 * np.exp(-0.3 * 0.5**2)
    assert thinning_probability(k, t) == pytest.approx(norm.cdf(act), rel=1e-14)


def test_single_location_peak_and_monotone():
    k = SingleLocationKernel(center=[2.0], bandwidth=1.5)
    assert thinning_probability(k, 2.0) == 1.0
    p = k(np.array([2.0, 2.5, 3.0, 5.0, 10.0]))
    assert np.all(np.diff(p) <= 0) and np.all((p >= 0) & (p <= 1))


def test_kernel_weight_count_checked():
    with pytest.raises(DimensionError):
        ProbitRvmKernel(np.zeros(3), 0.5, np.arange(3.0))


# thinning -------------------------------------------------------------------

def test_thin_degenerate_cases():
    crm = crm_of([0.3, 0.2, 0.9])
    full = thin(crm, [Const(1.0)] * 3, 0.0, np.random.default_rng(0))
    assert full.indicators.tolist() == [1, 1, 1]
    np.testing.assert_array_equal(full.masses, crm.masses)
    empty = thin(crm, [Const(0.0)] * 3, 0.0, np.random.default_rng(0))
    assert empty.total_mass() == 0.0
    with pytest.raises(DimensionError):
        thin(crm, [Const(1.0)] * 2, 0.0, np.random.default_rng(0))


def test_thin_binomial_band():
    crm = draw_truncated_crm(LevySpec.gamma(1000), np.random.default_rng(1))
    m = thin(crm, [Const(0.3)] * 1000, 0.0, np.random.default_rng(2))
    assert abs(len(m.retained) - 300) <= 58
    assert set(np.unique(m.masses[m.retained] == crm.masses[m.retained])) == {True}


def test_thin_deterministic():
    crm = crm_of([0.3, 0.2, 0.9, 0.1])
    a = thin(crm, [Const(0.5)] * 4, 0.0, np.random.default_rng(3))
    b = thin(crm, [Const(0.5)] * 4, 0.0, np.random.default_rng(3))
    np.testing.assert_array_equal(a.indicators, b.indicators)


def test_kbp_expectation_examples():
    crm = crm_of([0.4, 0.6])
    np.testing.assert_allclose(kbp_expectation(crm, [Const(0.5), Const(0.25)], 0.0), [0.2, 0.15], atol=1e-15)
    np.testing.assert_array_equal(kbp_expectation(crm, [Const(1.0)] * 2, 0.0), crm.masses)
    np.testing.assert_array_equal(kbp_expectation(crm, [Const(0.0)] * 2, 0.0), [0.0, 0.0])


def test_kbp_expectation_matches_thin_average():
    crm = crm_of([0.4, 0.6])
    kernels = [Const(0.5), Const(0.25)]
    rng = np.random.default_rng(4)
    draws = np.array([thin(crm, kernels, 0.0, rng).masses for _ in range(100_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - [0.2, 0.15]) < 4 * se)


def test_correlation_examples():
    assert correlation(np.ones(3), np.ones(3)) == pytest.approx(1.0)
    assert correlation([1, 0], [0, 1]) == 0.0
    assert correlation([0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.5)
    assert correlation([0.5, 0.5], [0.5, 0.0]) == pytest.approx(0.25 / np.sqrt(0.5), abs=1e-12)
    with pytest.raises(UndefinedCorrelationError):
        correlation([0, 0], [0.5, 0.5])


def test_correlation_monte_carlo_small():
    # two atoms with centered masses so that the closed form is exact
    rng = np.random.default_rng(5)
    n = 1_000_000
    p, q = np.array([0.5, 0.5]), np.array([0.5, 0.0])
    pi = rng.standard_normal((n, 2))
    b1 = ((rng.random((n, 2)) < p) * pi).sum(axis=1)
    b2 = ((rng.random((n, 2)) < q) * pi).sum(axis=1)
    assert np.corrcoef(b1, b2)[0, 1] == pytest.approx(correlation(p, q), abs=0.01)


def test_normalize_examples():
    crm = crm_of([1.0, 2.0, 3.0])
    np.testing.assert_allclose(normalize(ThinnedMeasure(crm, [1, 0, 1])), [0.25, 0.75])
    assert normalize(ThinnedMeasure(crm, [0, 1, 0])).tolist() == [1.0]
    with pytest.raises(EmptyMeasureError):
        normalize(ThinnedMeasure(crm, [0, 0, 0]))
    g = draw_truncated_crm(LevySpec.gamma(16), np.random.default_rng(6))
    w = normalize(ThinnedMeasure(g, np.ones(16)))
    assert abs(w.sum() - 1.0) < 1e-12


# RVM block ----------------------------------------------------------------

def test_truncated_normal_signs_and_tails():
    rng = np.random.default_rng(7)
    x = sample_truncated_normal(np.array([-40.0, 40.0, 0.0, 3.0]), [True, False, True, False], rng)
    assert x[0] > 0 and x[1] < 0 and x[2] > 0 and x[3] < 0
    assert np.all(np.isfinite(x))
    draws = sample_truncated_normal(np.zeros(200_000), np.ones(200_000, bool), rng)
    assert draws.mean() == pytest.approx(np.sqrt(2 / np.pi), abs=0.01)


def test_lambda_update_with_zero_weight():
    # lambda | omega = 0 is Ga(c0 + 1/2, rate d0): check through many draws
    # lambda * (d0 + omega^2 / 2) ~ Ga(c0 + 1/2, 1) given the freshly drawn omega
    rng = np.random.default_rng(8)
    scaled = []
    for _ in range(20_000):
        omega, _, lam = rvm_update(np.zeros(0, bool), np.zeros((0, 1)), np.zeros(2), 1.0, np.ones(2),
                                   2.0, 3.0, [1.0], rng)
        scaled.append(lam * (3.0 + 0.5 * omega**2))
    scaled = np.array(scaled)
    np.testing.assert_allclose(scaled.mean(axis=0), 2.5, rtol=0.03)
    np.testing.assert_allclose(scaled.var(axis=0), 2.5, rtol=0.08)


def test_zero_observations_weight_posterior_is_prior():
    rng = np.random.default_rng(9)
    lam = np.array([4.0, 0.25])
    draws = np.array([
        rvm_update(np.zeros(0, bool), np.zeros((0, 1)), np.zeros(2), 1.0, lam, 1.0, 1.0, [1.0], rng)[0]
        for _ in range(20_000)
    ])
    np.testing.assert_allclose(draws.var(axis=0), 1.0 / lam, rtol=0.05)
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.05)


def test_single_width_dictionary_keeps_phi():
    k = ProbitRvmKernel(np.zeros(3), 0.7, np.array([0.0, 1.0]))
    prior = RvmPrior(1.0, 1.0, [0.7])
    rng = np.random.default_rng(10)
    for _ in range(20):
        k, prior = rvm_gibbs_block([1, 0, 1], [0.0, 1.0, 0.5], k, prior, rng)
        assert k.phi == 0.7
        assert prior.precisions.shape == (3,)


def test_width_log_probs_normalized():
    sq = squared_distances(np.array([0.0, 1.0, 2.0]), np.array([[0.0], [2.0]]))
    lp = width_log_probs(np.array([1, 0, 1]), sq, np.array([0.1, 2.0, -1.0]), np.array([0.01, 0.1, 1.0, 10.0]))
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12


def test_grouped_update_matches_ungrouped_likelihood():
    sq = squared_distances(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))
    r = np.array([1, 1, 0, 1])
    groups = np.array([0, 0, 1, 1])
    omega = np.array([0.3, -0.5, 1.0])
    widths = np.array([0.1, 1.0, 3.0])
    a = width_log_probs(r, sq, omega, widths, groups)
    b = width_log_probs(r, sq[groups], omega, widths)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_parse_widths():
    np.testing.assert_array_equal(parse_widths("0.1, 1,10"), [0.1, 1.0, 10.0])
    with pytest.raises(ValueError):
        parse_widths("0.1,-1")


def test_rvm_block_getting_it_right_three_observations():
    centers = np.array([[0.0], [1.0], [2.5]])
    covs = np.array([0.0, 1.0, 2.5])
    sq = squared_distances(covs, centers)
    widths = np.array([0.3, 1.0, 3.0])
    c0, d0 = 3.0, 2.0

    def prior(rng):
        return rvm_prior_draw(4, c0, d0, widths, rng)

    def simulate(params, rng):
        omega, phi, _ = params
        return rng.random(3) < ProbitRvmKernel(omega, phi, centers)(covs)

    def gibbs(params, r, rng):
        return rvm_update(r, sq, *params, c0, d0, widths, rng)

    def stats(params, r):
        omega, phi, lam = params
        return np.r_[omega, omega**2, phi, np.log(lam[:2]), r.astype(float)]

    f, c = getting_it_right(prior, simulate, gibbs, stats, 10_000, np.random.default_rng(11))
    z = geweke_z(f, c)
    assert np.all(np.abs(z) < 4), z
