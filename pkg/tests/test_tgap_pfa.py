import numpy as np
import pytest

from thincrm.corpus import Corpus
from thincrm.geweke import geweke_z, getting_it_right
from thincrm.tgap_pfa import (
    InvariantViolation,
    TopicHyper,
    TopicState,
    beta_posterior,
    gibbs_sweep,
    indicator_case3_masses,
    init_topic_state,
    pi_posterior,
    predictive_rate,
    sample_allocations,
    sample_dirichlet_rows,
    sample_indicators,
    sample_topics,
    simulate_counts,
    topic_prior_draw,
)


def toy_corpus():
    W = np.array([[3, 0, 1], [0, 2, 0], [1, 1, 1], [0, 0, 4]])
    return Corpus.from_dense(W, [0.0, 0.0, 1.0, 1.0])


def state_for(corpus, K, rng, **hyper):
    return init_topic_state(corpus, K, TopicHyper(**hyper), rng)


def test_dirichlet_rows_on_simplex_with_tiny_alpha():
    rng = np.random.default_rng(0)
    x = sample_dirichlet_rows(np.full((50, 997), 0.05), rng)
    assert np.all(x > 0)
    assert np.all(np.abs(x.sum(axis=1) - 1.0) <= 1e-12)


def test_topics_prior_recovery_and_posterior_mean():
    corpus = toy_corpus()
    rng = np.random.default_rng(1)
    s = state_for(corpus, 1, rng, alpha_theta=0.05)
    s.alloc = np.zeros_like(s.alloc)
    draws = np.array([sample_topics(s, corpus, rng)[0] for _ in range(20_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 1 / 3, atol=0.01)

    big = Corpus.from_dense(np.array([[10_000, 0, 0]]), [0.0])
    s = state_for(big, 1, rng, alpha_theta=0.05)
    s.alloc = np.array([[10_000]])
    mean = np.mean([sample_topics(s, big, rng)[0, 0] for _ in range(2000)])
    assert mean == pytest.approx(10000.05 / 10000.15, abs=1e-5)


def test_pi_posterior_parameters():
    corpus = Corpus.from_dense(np.array([[3, 0, 1], [0, 2, 0], [1, 1, 0], [0, 0, 4]]), [0.0, 0.0, 1.0, 1.0])
    s = state_for(corpus, 4, np.random.default_rng(2))
    s.alloc = np.zeros_like(s.alloc)
    s.alloc[:, 0] = corpus.cell_count            # 12 words on topic 0
    s.r[:] = 1
    s.beta[:] = 0.75                             # sum over 4 docs = 3
    shape, rate = pi_posterior(s)
    assert shape[0] == pytest.approx(12.25) and rate[0] == pytest.approx(4.0)
    assert shape[1] == pytest.approx(0.25) and rate[1] == pytest.approx(4.0)


def test_pi_posterior_without_documents_is_prior():
    empty = Corpus([], [], [], [], [], 3)
    s = state_for(empty, 5, np.random.default_rng(3))
    shape, rate = pi_posterior(s)
    np.testing.assert_allclose(shape, 0.2)
    np.testing.assert_allclose(rate, 1.0)


def test_beta_posterior_parameters():
    corpus = Corpus.from_dense(np.array([[7, 0]]), [0.0])
    s = state_for(corpus, 2, np.random.default_rng(4), e=1.0)
    s.alloc = np.array([[7, 0]])
    s.r[:] = [[1, 0]]
    s.pi = np.array([2.0, 5.0])
    shape, rate = beta_posterior(s, corpus)
    assert (shape[0, 0], rate[0, 0]) == (8.0, 3.0)
    assert (shape[0, 1], rate[0, 1]) == (1.0, 1.0)


def test_allocations_conserve_and_respect_indicators():
    corpus = toy_corpus()
    rng = np.random.default_rng(5)
    s = state_for(corpus, 3, rng)
    s.r[:, 1] = 0
    for _ in range(50):
        a = sample_allocations(s, corpus, rng)
        np.testing.assert_array_equal(a.sum(axis=1), corpus.cell_count)
        assert a[:, 1].sum() == 0


def test_allocation_single_topic_and_symmetry():
    corpus = Corpus.from_dense(np.array([[6]]), [0.0])
    rng = np.random.default_rng(6)
    s = state_for(corpus, 2, rng)
    s.theta = np.ones((2, 1))
    s.r[:] = [[1, 0]]
    assert sample_allocations(s, corpus, rng).tolist() == [[6, 0]]
    s.r[:] = 1
    s.pi = np.ones(2)
    s.beta[:] = 1.0
    draws = np.array([sample_allocations(s, corpus, rng)[0, 0] for _ in range(50_000)])
    assert draws.mean() == pytest.approx(3.0, abs=0.03)
    assert draws.var() == pytest.approx(1.5, abs=0.05)


def test_allocation_mean_with_unequal_rates():
    corpus = Corpus.from_dense(np.array([[6]]), [0.0])
    rng = np.random.default_rng(7)
    s = state_for(corpus, 3, rng)
    s.theta = np.ones((3, 1))
    s.r[:] = 1
    s.pi = np.array([2.0, 1.0, 1.0])
    s.beta[:] = 1.0
    draws = np.array([sample_allocations(s, corpus, rng)[0] for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), [3.0, 1.5, 1.5], atol=0.02)


def test_allocation_zero_rate_is_an_error():
    corpus = Corpus.from_dense(np.array([[2]]), [0.0])
    s = state_for(corpus, 2, np.random.default_rng(8))
    s.r[:] = 0
    with pytest.raises(InvariantViolation):
        sample_allocations(s, corpus, np.random.default_rng(8))


def test_case3_masses():
    m = indicator_case3_masses(0.5, 0.0)
    assert m[0] == pytest.approx(0.5)
    m = indicator_case3_masses(0.5, np.log(2.0))
    # unnormalized masses are 0.25 each
    np.testing.assert_allclose(m, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    grid = indicator_case3_masses(np.linspace(0, 1, 11)[:, None], np.linspace(0, 50, 7)[None, :])
    assert np.all(grid >= 0)
    assert np.all(np.abs(grid.sum(axis=-1) - 1) < 1e-12)


def test_case3_against_enumeration():
    # P = 1: joint of (r, u) with u ~ Poisson(r' rho) observed through "no words seen",
    # i.e. the word count w = r u = 0. Enumerate r in {0, 1}.
    p, rho = 0.3, 0.7
    joint_r1 = p * np.exp(-rho)                # r = 1 forces u = 0
    joint_r0 = 1 - p                           # any u is compatible
    assert indicator_case3_masses(p, rho)[0] == pytest.approx(joint_r1 / (joint_r1 + joint_r0))


def _indicator_state(p_const, R):
    corpus = Corpus.from_dense(np.zeros((1, 2), int), [0.0])
    s = state_for(corpus, 2, np.random.default_rng(9))
    s.alloc = np.zeros((0, 2), dtype=np.int64)
    s.pi = np.array([R, R])
    s.beta[:] = 1.0
    s.omega = np.tile(np.r_[0.0, 0.0], (2, 1))  # p = 1/2
    s.hyper.force_active = False
    return corpus, s


def test_indicator_probability_case3():
    corpus, s = _indicator_state(0.5, np.log(2.0))
    rng = np.random.default_rng(10)
    draws = np.array([sample_indicators(s, corpus, rng) for _ in range(60_000)])
    assert draws.mean() == pytest.approx(1 / 3, abs=0.006)


def test_indicator_case2_and_force_active():
    corpus = Corpus.from_dense(np.array([[3, 0], [0, 0]]), [0.0, 0.0])
    rng = np.random.default_rng(11)
    s = state_for(corpus, 3, rng)
    s.omega[:] = 0.0
    s.omega[:, 0] = -8.0                          # p ~ 6e-16
    s.alloc = np.array([[0, 3, 0]])
    for _ in range(200):
        r = sample_indicators(s, corpus, rng)
        assert r[0, 1] == 1
        assert r[1].sum() >= 1


def test_sweep_invariants_and_replay():
    corpus = toy_corpus()

    def run(seed):
        rng = np.random.default_rng(seed)
        s = state_for(corpus, 4, rng)
        states = []
        for _ in range(30):
            s = gibbs_sweep(s, corpus, rng)
            s.check(corpus)
            states.append(s)
        return states

    a, b = run(12), run(12)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.alloc, y.alloc)
        np.testing.assert_array_equal(x.theta, y.theta)
        np.testing.assert_array_equal(x.omega, y.omega)


def test_static_keeps_all_indicators_on():
    corpus = toy_corpus()
    rng = np.random.default_rng(13)
    s = init_topic_state(corpus, 3, TopicHyper(), rng, static=True)
    for _ in range(10):
        s = gibbs_sweep(s, corpus, rng)
    assert s.r.min() == 1


def _sample(theta, pi, omega0, e=1.0):
    K = len(pi)
    return TopicState(theta=np.asarray(theta, float), pi=np.asarray(pi, float), beta=np.ones((1, K)),
                      r=np.ones((1, K), np.int8), alloc=np.zeros((0, K), np.int64),
                      omega=np.c_[omega0, np.zeros(K)], phi=np.ones(K), lam=np.ones((K, 2)),
                      centers=np.zeros((1, 1)), hyper=TopicHyper(e=e))


def test_predictive_rate_examples():
    big = 40.0                                  # p = 1 to machine precision
    s = _sample([[0.2, 0.8]], [3.0], [big], e=2.0)
    np.testing.assert_allclose(predictive_rate([s], 0.0), [1.2, 4.8])
    np.testing.assert_array_equal(predictive_rate([s, s], 0.0), predictive_rate([s], 0.0))
    s1 = _sample([[0.5, 0.5], [1.0, 1e-300]], [1.0, 2.0], [big, 0.0])
    s2 = _sample([[0.1, 0.9], [0.3, 0.7]], [4.0, 1.0], [-big, big])
    # sample 1: 1*1*(.5,.5) + 2*.5*(1,0) = (1.5, .5); sample 2: 0 + 1*1*(.3,.7)
    np.testing.assert_allclose(predictive_rate([s1, s2], 0.0), [0.9, 0.6])
    assert np.all(predictive_rate([s2], 0.0) > 0)
    with pytest.raises(ValueError):
        predictive_rate([], 0.0)


def test_state_dict_round_trip():
    corpus = toy_corpus()
    s = state_for(corpus, 3, np.random.default_rng(14))
    back = TopicState.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.theta, s.theta)
    np.testing.assert_array_equal(back.beta, s.beta)
    np.testing.assert_array_equal(back.thinning_probs([0.0, 1.0]), s.thinning_probs([0.0, 1.0]))


def test_simulated_counts_match_allocations():
    corpus = toy_corpus()
    rng = np.random.default_rng(15)
    s = topic_prior_draw(3, corpus, TopicHyper(), rng)
    new, alloc = simulate_counts(s, corpus, rng)
    np.testing.assert_array_equal(alloc.sum(axis=1), new.cell_count)


def tiny_layout():
    return Corpus([], [], [], [0, 0, 1, 1], [0.0, 1.0], 3)


def test_getting_it_right_quick():
    # shorter version of the acceptance check; same statistics
    layout = tiny_layout()
    hyper = TopicHyper(alpha_theta=1.0, e=2.0, c0=2.0, d0=2.0, widths=[0.3, 1.0], gamma_shape=4.0,
                       force_active=False)

    def stats(s, c):
        return np.r_[s.theta[:, 0], s.pi, s.r.sum(), c.cell_count.sum(), s.beta.mean(), s.omega[:, 0]]

    f, c = getting_it_right(
        lambda rng: topic_prior_draw(2, layout, hyper, rng),
        lambda s, rng: simulate_counts(s, layout, rng)[0],
        lambda s, data, rng: gibbs_sweep(s, data, rng),
        stats, 3000, np.random.default_rng(16))
    z = geweke_z(f, c)
    assert np.all(np.abs(z) < 4), z
