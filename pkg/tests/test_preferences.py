import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annuity_auctions.preferences import (
    BequestPrefDist,
    GroupKey,
    InfoCostTable,
    RiskPrefGroup,
    contract_choice,
    info_cost_from_elasticity,
    ri_choice_probs,
    sample_preferences,
)
from annuity_auctions.population import default_bequest_dists, default_info_costs, default_risk_groups


class TestRiChoiceProbs:
    def test_two_way_symmetry(self):
        probs = ri_choice_probs([1.5], eu_bargain=1.5, priors=[1.0], alpha=0.02)
        assert probs == pytest.approx([0.5, 0.5])

    def test_large_alpha_returns_priors(self):
        priors = np.array([0.5, 0.3, 0.2])
        probs = ri_choice_probs([3.0, -1.0, 10.0], eu_bargain=2.0, priors=priors, alpha=1e12)
        expected = np.append(priors, 1.0)
        expected = expected / expected.sum()
        assert probs == pytest.approx(expected, abs=1e-9)

    def test_small_alpha_concentrates_on_argmax(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            J = rng.integers(1, 8)
            U = rng.normal(0, 1, J)
            eu = float(rng.normal(0, 1))
            priors = rng.dirichlet(np.ones(J)) * rng.uniform(0.5, 1.0)
            probs = ri_choice_probs(U, eu, priors, alpha=1e-9)
            assert int(np.argmax(probs)) == int(np.argmax(np.append(U, eu)))
            assert probs.max() > 0.999

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            J = rng.integers(1, 10)
            U = rng.normal(0, 2, J)
            eu = float(rng.normal())
            priors = rng.dirichlet(np.ones(J)) * 0.9
            a = float(rng.uniform(0.001, 0.1))
            p1 = ri_choice_probs(U, eu, priors, a)
            assert p1.sum() == pytest.approx(1.0, abs=1e-12)
            c = float(rng.normal(0, 5))
            p2 = ri_choice_probs(U + c, eu + c, priors, a)
            assert p2 == pytest.approx(p1, abs=1e-10)

    def test_monotone_in_own_utility(self):
        U = np.array([0.1, 0.2, 0.05])
        base = ri_choice_probs(U, 0.15, [0.3, 0.3, 0.3], 0.05)
        up = U.copy()
        up[0] += 0.01
        bumped = ri_choice_probs(up, 0.15, [0.3, 0.3, 0.3], 0.05)
        assert bumped[0] > base[0]
        assert all(bumped[k] <= base[k] for k in range(1, 4))

    def test_zero_prior_excludes_option(self):
        probs = ri_choice_probs([5.0, 1.0], 0.0, [0.0, 0.5], alpha=0.1)
        assert probs[0] == 0.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            ri_choice_probs([1.0], 0.0, [1.0], alpha=0.0)
        with pytest.raises(ValueError):
            ri_choice_probs([1.0, 2.0], 0.0, [0.9, 0.4], alpha=0.1)


class TestInfoCostFromElasticity:
    def test_arithmetic(self):
        assert info_cost_from_elasticity(0.5, 25.0) == pytest.approx(0.01)

    def test_forward_simulate_then_invert(self):
        # Generate choice probabilities from the logit-with-priors formula
        # with a known cost, finite-difference the pension utility, invert.
        alpha = 0.013
        U = np.array([0.02, 0.05, 0.01])
        priors = np.array([0.3, 0.4, 0.3])
        eu = 0.04
        h = 1e-7
        for j in range(3):
            up = U.copy()
            up[j] += h
            dn = U.copy()
            dn[j] -= h
            sigma = ri_choice_probs(U, eu, priors, alpha)[j]
            deriv = (ri_choice_probs(up, eu, priors, alpha)[j] - ri_choice_probs(dn, eu, priors, alpha)[j]) / (
                2 * h
            )
            assert info_cost_from_elasticity(float(sigma), float(deriv)) == pytest.approx(alpha, rel=1e-6)

    def test_elasticity_identity_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            J = int(rng.integers(2, 9))
            U = rng.normal(0, 0.05, J)
            priors = rng.dirichlet(np.ones(J)) * 0.95
            alpha = float(rng.uniform(0.005, 0.05))
            eu = float(rng.normal(0, 0.05))
            j = int(rng.integers(0, J))
            h = 1e-7
            up, dn = U.copy(), U.copy()
            up[j] += h
            dn[j] -= h
            sigma = ri_choice_probs(U, eu, priors, alpha)[j]
            deriv = (
                ri_choice_probs(up, eu, priors, alpha)[j] - ri_choice_probs(dn, eu, priors, alpha)[j]
            ) / (2 * h)
            assert sigma * (1 - sigma) / deriv == pytest.approx(alpha, rel=1e-4)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            info_cost_from_elasticity(1.0, 2.0)
        with pytest.raises(ValueError):
            info_cost_from_elasticity(0.5, -1.0)


class TestContractChoice:
    def test_theta_zero_picks_max_pension_utility(self):
        menu = [(-1.0, -0.5), (-0.8, -2.0), (-1.2, -0.1)]
        assert contract_choice(0.0, menu) == 1

    def test_threshold_tie_goes_to_lower_bequest(self):
        # theta exactly at the threshold: utilities tie by construction.
        menu = [(-1.0, -2.0), (-0.5, -4.0)]
        theta = 0.25  # (rho1 - rho2)/(b2 - b1) with exact dyadic arithmetic
        u = [rho + theta * b for rho, b in menu]
        assert u[0] == u[1]
        assert contract_choice(theta, menu) == 1  # entry with smaller b

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            n = int(rng.integers(1, 7))
            menu = [(float(-rng.uniform(0.1, 2)), float(-rng.uniform(0, 2))) for _ in range(n)]
            theta = float(rng.uniform(0, 10))
            utilities = [rho + theta * b for rho, b in menu]
            assert utilities[contract_choice(theta, menu)] == max(utilities)

    def test_affine_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            menu = [(float(-rng.uniform(0.1, 2)), float(-rng.uniform(0.01, 2))) for _ in range(4)]
            theta = float(rng.uniform(0, 5))
            a = float(rng.uniform(0.1, 3.0))
            scaled = [(a * rho, a * b) for rho, b in menu]
            assert contract_choice(theta, menu) == contract_choice(theta, scaled)

    def test_empty_menu(self):
        with pytest.raises(ValueError):
            contract_choice(1.0, [])


class TestBequestPrefDist:
    def test_mass_at_zero_monte_carlo(self):
        dist = default_bequest_dists()[3]
        rng = np.random.default_rng(17)
        draws = dist.sample(rng, 1_000_000)
        assert np.mean(draws == 0.0) == pytest.approx(dist.zeta, abs=0.002)

    def test_degenerate_mass_point(self):
        grid = np.linspace(0.01, 20.0, 100)
        dist = BequestPrefDist(1, 1.0, grid, np.linspace(0.01, 1.0, 100))
        rng = np.random.default_rng(3)
        assert np.all(dist.sample(rng, 1000) == 0.0)

    def test_sample_quantiles_match_cdf(self):
        dist = default_bequest_dists()[1]
        rng = np.random.default_rng(23)
        draws = dist.sample(rng, 400_000)
        for t in (0.5, 2.0, 5.0, 12.0):
            assert np.mean(draws <= t) == pytest.approx(dist.cdf(t), abs=0.003)

    def test_default_means_increase_with_quintile(self):
        dists = default_bequest_dists()
        means = [dists[q].mean() for q in range(1, 6)]
        assert all(a < b for a, b in zip(means, means[1:]))
        # Mass point and overall level match the calibration targets.
        assert dists[1].zeta == pytest.approx(0.40)
        assert means[0] == pytest.approx(2.78, abs=0.15)
        assert means[4] == pytest.approx(3.81, abs=0.30)

    def test_json_roundtrip(self):
        dist = default_bequest_dists()[2]
        back = BequestPrefDist.from_json(dist.to_json())
        assert back.zeta == dist.zeta
        assert np.array_equal(back.theta_grid, dist.theta_grid)
        payload = json.loads(dist.to_json())
        assert set(payload) == {"quintile", "zeta", "theta_grid", "theta_cdf"}

    def test_invalid_cdf(self):
        grid = np.linspace(0.01, 20.0, 50)
        with pytest.raises(ValueError):
            BequestPrefDist(1, 0.4, grid, np.linspace(0.5, 0.9, 50))  # does not reach 1


class TestSamplePreferences:
    def test_deterministic_under_seed(self):
        dist = default_bequest_dists()[1]
        group = default_risk_groups()["male|at_nra|q1|afp"]
        a = sample_preferences(dist, group, np.random.default_rng(5))
        b = sample_preferences(dist, group, np.random.default_rng(5))
        assert a == b

    def test_beta_moments(self):
        dist = default_bequest_dists()[1]
        group = default_risk_groups()["male|at_nra|q1|afp"]
        rng = np.random.default_rng(7)
        betas = np.array([sample_preferences(dist, group, rng)[1] for _ in range(20_000)])
        assert betas.mean() == pytest.approx(group.beta_mean, abs=4 * np.sqrt(group.beta_var / 20_000))
        assert betas.var() == pytest.approx(group.beta_var, rel=0.1)


class TestGroupsAndTables:
    def test_ninety_groups(self):
        assert len(GroupKey.all_groups()) == 90
        assert len(default_risk_groups()) == 90

    def test_group_label_roundtrip(self):
        for key in GroupKey.all_groups():
            assert GroupKey.from_label(key.label) == key

    def test_info_cost_csv_roundtrip(self, tmp_path):
        table = default_info_costs()
        path = tmp_path / "alpha.csv"
        table.to_csv(path)
        back = InfoCostTable.from_csv(path)
        for (ch, q), a in table.items():
            assert back.alpha(ch, q) == pytest.approx(a, rel=1e-6)

    def test_info_cost_reference_anchors(self):
        table = default_info_costs()
        assert table.alpha("afp", 1) == pytest.approx(0.009)
        assert table.alpha("sales_agent", 1) == pytest.approx(0.027)
        assert table.alpha("advisor", 1) == pytest.approx(0.006)
        # Channel ordering holds in every quintile; costs fall with savings.
        for q in range(1, 6):
            assert table.alpha("sales_agent", q) > table.alpha("afp", q) > table.alpha("advisor", q)
        for ch in ("afp", "sales_agent", "advisor"):
            vals = [table.alpha(ch, q) for q in range(1, 6)]
            assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_risk_group_serialization(self):
        group = default_risk_groups()["female|before_nra|q2|advisor"]
        back = RiskPrefGroup.from_dict(group.to_dict())
        assert back == group


@settings(max_examples=100, deadline=None)
@given(
    J=st.integers(1, 8),
    alpha=st.floats(1e-4, 10.0),
    shift=st.floats(-50.0, 50.0),
)
def test_ri_probs_property(J, alpha, shift):
    rng = np.random.default_rng(J * 1000 + int(alpha * 7) + int(shift) % 97)
    U = rng.normal(0, 1, J)
    eu = float(rng.normal())
    priors = rng.dirichlet(np.ones(J)) * 0.99
    p = ri_choice_probs(U, eu, priors, alpha)
    assert p.shape == (J + 1,)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(p >= 0)
