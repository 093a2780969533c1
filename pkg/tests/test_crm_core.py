import json

import numpy as np
import pytest

from thincrm.crm_core import (
    Atom,
    DimensionError,
    LevySpec,
    ParameterError,
    TruncatedCRM,
    draw_truncated_crm,
    expected_mass,
    sample_masses,
)


def test_spec_validation():
    with pytest.raises(ParameterError):
        LevySpec.beta(1)
    with pytest.raises(ParameterError):
        LevySpec.gamma(4, shape=0.0)
    with pytest.raises(ParameterError):
        LevySpec.gamma(4, rate=-1.0)
    with pytest.raises(ParameterError):
        LevySpec("stable", 4)
    with pytest.raises(ParameterError):
        LevySpec.beta(4, concentration=0.0)


def test_gamma_k4_atoms_and_mean():
    spec = LevySpec.gamma(4)
    crm = draw_truncated_crm(spec, np.random.default_rng(0))
    assert crm.K == 4 and len(crm.atoms) == 4
    assert np.all(crm.masses > 0)
    assert spec.mean_total_mass == 1.0


def test_beta_k2_is_arcsine():
    spec = LevySpec.beta(2, concentration=7.0)
    m = sample_masses(spec, np.random.default_rng(1), size=200_000)
    # Be(1/2, 1/2): mean 1/2, variance 1/8
    assert abs(m.mean() - 0.5) < 0.005
    assert abs(m.var() - 0.125) < 0.003
    assert np.all((m > 0) & (m < 1))
    assert abs(m.sum(axis=1).mean() - 1.0) < 0.01


def test_gamma_k64_total_mass_within_three_se():
    spec = LevySpec.gamma(64)
    tot = sample_masses(spec, np.random.default_rng(2), size=100_000).sum(axis=1)
    se = tot.std(ddof=1) / np.sqrt(len(tot))
    assert abs(tot.mean() - 1.0) < 3 * se


def test_mass_variance_matches_empirical():
    for spec in (LevySpec.beta(8), LevySpec.gamma(8, shape=2.0, rate=3.0)):
        m = sample_masses(spec, np.random.default_rng(3), size=200_000)
        assert m.var() == pytest.approx(spec.mass_variance(), rel=0.03)


def test_draw_deterministic_and_samplers_do_not_perturb_masses():
    spec = LevySpec.gamma(5)
    a = draw_truncated_crm(spec, np.random.default_rng(9))
    b = draw_truncated_crm(spec, np.random.default_rng(9),
                           param_sampler=lambda r: r.dirichlet(np.ones(3)),
                           location_sampler=lambda r: r.normal(size=2))
    np.testing.assert_array_equal(a.masses, b.masses)
    c = draw_truncated_crm(spec, np.random.default_rng(9),
                           param_sampler=lambda r: r.dirichlet(np.ones(3)),
                           location_sampler=lambda r: r.normal(size=2))
    for x, y in zip(b.atoms, c.atoms):
        np.testing.assert_array_equal(x.theta, y.theta)
        np.testing.assert_array_equal(x.location, y.location)


def test_expected_mass_examples():
    crm = TruncatedCRM([Atom(0.2), Atom(0.3)], LevySpec.beta(2))
    assert expected_mass(crm, [0.0, 0.0]) == 0.0
    assert expected_mass(crm, [1.0, 1.0]) == crm.masses.sum()
    assert expected_mass(crm) == crm.masses.sum()
    assert expected_mass(crm, [0.5, 1.0]) == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(DimensionError):
        expected_mass(crm, [0.5])


def test_expected_mass_matches_bernoulli_average():
    crm = TruncatedCRM([Atom(0.2), Atom(0.3)], LevySpec.beta(2))
    rng = np.random.default_rng(4)
    r = rng.random((100_000, 2)) < np.array([0.5, 1.0])
    emp = (r * crm.masses).sum(axis=1)
    se = emp.std() / np.sqrt(len(emp))
    assert abs(emp.mean() - 0.4) < 4 * se


def test_atom_invariants_enforced():
    with pytest.raises(ParameterError):
        TruncatedCRM([Atom(1.0), Atom(0.5)], LevySpec.beta(2))
    with pytest.raises(ParameterError):
        TruncatedCRM([Atom(0.0)], LevySpec.gamma(1))
    with pytest.raises(DimensionError):
        TruncatedCRM([Atom(0.5)], LevySpec.beta(2))


def test_json_round_trip():
    spec = LevySpec.gamma(3, shape=2.0)
    crm = draw_truncated_crm(spec, np.random.default_rng(5), param_sampler=lambda r: r.dirichlet(np.ones(4)))
    d = json.loads(crm.to_json())
    assert d["family"] == "gamma" and d["K"] == 3
    assert set(d["atoms"][0]) == {"pi", "theta", "x"}
    back = TruncatedCRM.from_json(crm.to_json())
    np.testing.assert_array_equal(back.masses, crm.masses)
    assert back.spec == spec
