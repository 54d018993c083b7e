import json
import math

import numpy as np
import pytest

from annuity_auctions.lifetables import (
    CovariateVector,
    FitError,
    GompertzModel,
    MortalityRecord,
    conditional_survival,
    fit_gompertz,
    loglik_at,
    median_expected_life,
    read_mortality_csv,
    sample_death_ages,
    survival_horizon,
    write_mortality_csv,
    _loglik_parts,
    _design_matrix,
)
from annuity_auctions.population import default_mortality_model, synth_mortality_records

from conftest import gauss_legendre_integral


def flat_model(g, lam):
    """Model with lam(x) = lam for every covariate vector."""
    return GompertzModel(g=g, tau=np.array([math.log(lam), 0.0, 0.0, 0.0, 0.0, 0.0]))


ANY_COV = CovariateVector(780.0, "male", False, 50_000.0, 1950.0)


class TestConditionalSurvival:
    def test_equals_one_at_conditioning_point(self, mortality, male65):
        assert conditional_survival(mortality, male65, 780.0, 780.0) == 1.0

    def test_no_hazard_limit(self):
        model = flat_model(0.01, 1e-300)
        assert conditional_survival(model, ANY_COV, 2000.0, 780.0) == pytest.approx(1.0, abs=1e-12)

    def test_matches_hazard_integration_oracle(self):
        # Independent oracle: integrate the hazard lam*exp(g*s) over [t0, t]
        # with fixed-order Gauss-Legendre panels and exponentiate.
        g, lam, t0, t = 0.01, 1e-4, 780.0, 900.0
        model = flat_model(g, lam)
        cum_hazard = gauss_legendre_integral(lambda s: lam * np.exp(g * s), t0, t)
        oracle = math.exp(-cum_hazard)
        closed = conditional_survival(model, ANY_COV, t, t0)
        assert closed == pytest.approx(oracle, rel=1e-12)

    def test_domain_errors(self, mortality, male65):
        with pytest.raises(ValueError):
            conditional_survival(mortality, male65, 700.0, 780.0)
        with pytest.raises(ValueError):
            GompertzModel(g=-0.01, tau=np.zeros(6))

    def test_monotone_decreasing_to_zero(self, mortality, male65):
        ts = np.linspace(780.0, 2400.0, 200)
        vals = [conditional_survival(mortality, male65, t, 780.0) for t in ts]
        assert vals[0] == 1.0
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-8

    def test_savings_shifts_survival_right(self, mortality):
        # tau_savings < 0 in the default truth: richer retirees survive more.
        t = 1100.0
        vals = []
        for s in [20_000.0, 80_000.0, 320_000.0]:
            cov = CovariateVector(780.0, "male", False, s, 1950.0)
            vals.append(conditional_survival(mortality, cov, t, 780.0))
        assert vals[0] < vals[1] < vals[2]

    def test_survival_horizon_hits_eps(self, mortality, male65):
        t = survival_horizon(mortality, male65, 780.0, 1e-12)
        assert conditional_survival(mortality, male65, t, 780.0) == pytest.approx(1e-12, rel=1e-6)


class TestMedianExpectedLife:
    def test_bracketing_with_huge_hazard(self):
        model = flat_model(0.01, 0.9)
        t0 = 780.0
        assert conditional_survival(model, ANY_COV, t0 + 1.0, t0) < 0.5
        years = median_expected_life(model, ANY_COV, t0)
        assert t0 / 12.0 < years < (t0 + 1.0) / 12.0

    def test_root_residual(self, mortality, male65):
        years = median_expected_life(mortality, male65, 780.0)
        assert abs(conditional_survival(mortality, male65, years * 12.0, 780.0) - 0.5) < 1e-8

    def test_reference_magnitudes(self, mortality, male65, female60):
        # Reference magnitude class: Q1-ish male ~85, female ~94 years.
        m = median_expected_life(mortality, male65, 780.0)
        f = median_expected_life(mortality, female60, 720.0)
        assert 82.0 < m < 90.0
        assert 91.0 < f < 98.0
        assert f > m


class TestFitGompertz:
    def test_simulate_and_refit_recovers_truth(self):
        truth = default_mortality_model()
        records = synth_mortality_records(20_000, seed=42, model=truth)
        cens = np.mean([not r.died for r in records])
        assert 0.2 < cens < 0.4
        fit = fit_gompertz(records)
        se = fit.standard_errors()
        theta_hat = np.concatenate(([fit.g], fit.tau))
        theta_true = np.concatenate(([truth.g], truth.tau))
        assert np.all(np.abs(theta_hat - theta_true) <= 2.0 * se), (
            (theta_hat - theta_true) / se
        )

    def test_all_censored_raises(self, male65):
        records = [
            MortalityRecord(covariates=ANY_COV, entry_age=780.0, exit_age=900.0, died=False)
            for _ in range(50)
        ]
        with pytest.raises(FitError, match="no events"):
            fit_gompertz(records)

    def test_mle_beats_truth_on_sample(self):
        truth = default_mortality_model()
        records = synth_mortality_records(4000, seed=7, model=truth)
        fit = fit_gompertz(records)
        assert fit.loglik >= loglik_at(truth, records)

    def test_gradient_zero_at_optimum_and_fd_agreement(self):
        truth = default_mortality_model()
        records = synth_mortality_records(4000, seed=11, model=truth)
        fit = fit_gompertz(records)
        X = _design_matrix(records)
        entry = np.array([r.entry_age for r in records])
        exit_ = np.array([r.exit_age for r in records])
        died = np.array([1.0 if r.died else 0.0 for r in records])

        _, grad, _ = _loglik_parts(fit.g, fit.tau, X, entry, exit_, died)
        # Covariates are on raw scale here, so normalize each gradient entry
        # by its column scale before applying the stationarity bound.
        col_scale = np.concatenate(([1.0], np.maximum(np.abs(X).mean(axis=0), 1.0)))
        assert np.max(np.abs(grad) / col_scale / max(1.0, abs(fit.loglik))) < 1e-6

        # Central finite differences at a perturbed (non-stationary) point.
        # Steps are sized so the linear-index perturbation is ~3e-3 for every
        # coefficient regardless of its column's raw scale.
        g0 = fit.g * 1.05
        tau0 = fit.tau * 0.97
        _, grad_a, _ = _loglik_parts(g0, tau0, X, entry, exit_, died)
        theta = np.concatenate(([g0], tau0))
        steps = np.concatenate(([1e-6 * g0], 3e-3 / np.maximum(np.abs(X).mean(axis=0), 1e-12)))
        for k in range(len(theta)):
            h = steps[k]
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            lp = _loglik_parts(tp[0], tp[1:], X, entry, exit_, died)[0]
            lm = _loglik_parts(tm[0], tm[1:], X, entry, exit_, died)[0]
            fd = (lp - lm) / (2.0 * h)
            assert fd == pytest.approx(grad_a[k], rel=1e-4)

    def test_rank_deficient_covariates(self):
        # All-male sample: the gender column is constant.
        rng = np.random.default_rng(0)
        records = []
        for i in range(200):
            cov = CovariateVector(780.0, "male", False, float(rng.uniform(2e4, 2e5)), 1950.0)
            records.append(MortalityRecord(cov, 780.0, 780.0 + float(rng.uniform(1, 300)), True))
        with pytest.raises(FitError, match="rank-deficient"):
            fit_gompertz(records)

    def test_female_median_exceeds_male_after_refit(self):
        truth = default_mortality_model()
        records = synth_mortality_records(20_000, seed=13, model=truth)
        fit = fit_gompertz(records)
        m = median_expected_life(fit, CovariateVector(780.0, "male", False, 74_515.0, 1950.0), 780.0)
        f = median_expected_life(fit, CovariateVector(720.0, "female", False, 74_515.0, 1955.0), 720.0)
        assert f > m


class TestPersistence:
    def test_model_json_roundtrip(self):
        truth = default_mortality_model()
        records = synth_mortality_records(2000, seed=3, model=truth)
        fit = fit_gompertz(records)
        text = fit.to_json()
        payload = json.loads(text)
        assert set(payload) >= {"g", "tau", "cov", "loglik"}
        back = GompertzModel.from_json(text)
        assert back.g == fit.g
        assert np.array_equal(back.tau, fit.tau)
        assert np.array_equal(back.cov, fit.cov)

    def test_mortality_csv_roundtrip(self, tmp_path):
        records = synth_mortality_records(100, seed=5)
        path = tmp_path / "mortality.csv"
        write_mortality_csv(path, records)
        back = read_mortality_csv(path)
        assert len(back) == len(records)
        for a, b in zip(records, back):
            assert a.died == b.died
            assert a.exit_age == pytest.approx(b.exit_age, abs=1e-5)
            assert a.covariates.gender == b.covariates.gender

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,age_entry_m\n1,780\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_mortality_csv(path)


def test_sampled_death_ages_match_cdf(mortality, male65):
    rng = np.random.default_rng(99)
    draws = sample_death_ages(mortality, male65, 780.0, rng, 200_000)
    for t in [850.0, 1000.0, 1150.0]:
        emp = float(np.mean(draws > t))
        assert emp == pytest.approx(conditional_survival(mortality, male65, t, 780.0), abs=0.005)
