"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Empirical magnitudes from the reference setting are not reproducible from
proprietary data, so every criterion is property-based on synthetic markets
with calibrated primitives (mass at zero 0.40, P(cost ratio < 1) of 6% for
the bottom three and 14% for the top two savings quintiles, 13-15 potential
bidders).  Run with `pytest tests/test_acceptance.py -v -s` to see the
criterion lines as they complete.
"""

import filecmp
import time

import numpy as np
import pytest

from annuity_auctions.config import load_config
from annuity_auctions.counterfactual import (
    current_pension,
    draw_cost_matrix,
    english_pension,
    full_info_pension,
    gross_utilities,
)
from annuity_auctions.estimation import (
    estimate_alpha,
    estimate_bequest_dist,
    estimate_beta_groups,
    estimate_cost_law,
    gradient_observations,
    order_stat_invert,
    runner_up_logit,
    second_round_observations,
)
from annuity_auctions.lifetables import CovariateVector, fit_gompertz, median_expected_life
from annuity_auctions.market import bargain_closed_form, bargain_game, max_pension
from annuity_auctions.pipeline import run_pipeline
from annuity_auctions.population import (
    BETA_MEANS_BY_QUINTILE,
    default_cost_laws,
    default_info_costs,
    default_mortality_model,
    synth_mortality_records,
)
from annuity_auctions.preferences import GroupKey
from annuity_auctions.valuation import (
    ContractSpec,
    CrraParams,
    LifeFactors,
    bequest_utility,
    invert_pension,
    life_factors,
    pension_utility,
)

from conftest import random_auction_instance, safe_epsilon
from test_valuation import mc_life_factors


def report(number: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


def test_criterion_1_valuation_oracle(mortality, crra, married_male65):
    """Quadrature life factors vs a 1e6-draw Monte Carlo on a 3x3x2 grid."""
    cov, sp = married_male65
    t0 = time.perf_counter()
    worst = 0.0
    for d in (0.0, 12.0, 36.0):
        for g in (0.0, 120.0, 240.0):
            for married in (False, True):
                contract = ContractSpec(deferral=d, guarantee=g, spouse_covered=married)
                spouse = sp if married else None
                f = life_factors(mortality, cov, spouse, contract, crra)
                mc = mc_life_factors(mortality, cov, spouse, contract, crra, n=1_000_000, seed=101)
                for got, want in zip((f.D_R, f.D_R_DP, f.G_F, f.S_F), mc):
                    # Relative criterion with a one-month floor so that
                    # near-zero factors do not divide away the tolerance.
                    err = abs(got - want) / max(abs(want), 1.0)
                    worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 0.005 and elapsed < 60.0
    report(1, ok, f"valuation vs 1e6-draw Monte Carlo: worst rel err {worst:.2e}, {elapsed:.1f}s (< 60s)")
    assert worst < 0.005
    assert elapsed < 60.0


def test_criterion_2_inversion_round_trip(crra):
    """invert_pension recovers the pension from rho + theta*b at 1e-9."""
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        f = LifeFactors(
            D_R=float(rng.uniform(60.0, 250.0)),
            D_R_DP=float(rng.uniform(0.0, 40.0)),
            G_F=float(rng.uniform(0.0, 30.0)),
            S_F=float(rng.uniform(0.0, 90.0)),
        )
        P = float(rng.uniform(10.0, 5000.0))
        theta = float(rng.uniform(0.0, 20.0))
        w = pension_utility(P, f, crra) + theta * bequest_utility(P, f, crra)
        back = invert_pension(w, theta, f, crra)
        worst = max(worst, abs(back - P) / P)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5.0
    report(2, ok, f"1e4 inversion round-trips: worst rel err {worst:.2e}, {elapsed:.2f}s (< 5s)")
    assert worst < 1e-9
    assert elapsed < 5.0


def test_criterion_3_lemma_equivalence(crra):
    """Explicit increment game agrees with the closed form on 10,000 auctions."""
    rng = np.random.default_rng(31337)
    mismatches = 0
    worst_gap_ratio = 0.0
    for k in range(10_000):
        entrants, theta, beta, f, savings, margin = random_auction_instance(rng)
        floors = {e.id: max_pension(e, f, savings) / (1.0 + margin) for e in entrants}
        cf = bargain_closed_form(entrants, theta, beta, f, savings, crra, floors=floors)
        eps = safe_epsilon(cf, entrants, theta, f, savings)
        game = bargain_game(entrants, theta, beta, f, savings, eps, floors, crra)
        if game.winner != cf.winner:
            mismatches += 1
            continue
        winner = next(e for e in entrants if e.id == cf.winner)
        runner = next(e for e in entrants if e.id == cf.runner_up)
        u_cf = beta * winner.rating + pension_utility(cf.pension, f, crra) + theta * bequest_utility(
            cf.pension, f, crra
        )
        K = f.k_pension() + theta * f.k_bequest()
        # One-increment utility bound: the binding slope is the steeper of the
        # winner's near its settlement pension and the runner-up's near its
        # break-even (pensions differ when ratings differ).
        p_ref = max(min(cf.pension, max_pension(runner, f, savings)) - 2.0 * eps, 0.4 * cf.pension)
        step = eps * K / p_ref**3
        gap = abs(game.winner_score - u_cf)
        worst_gap_ratio = max(worst_gap_ratio, gap / step if step > 0 else 0.0)

    # Epsilon sweep on fixed instances: nested decimal increments shrink the gap.
    sweep_rng = np.random.default_rng(777)
    sweep_ok = True
    for _ in range(25):
        entrants, theta, beta, f, savings, margin = random_auction_instance(sweep_rng, n_firms=6)
        floors = {e.id: max_pension(e, f, savings) / (1.0 + margin) for e in entrants}
        cf = bargain_closed_form(entrants, theta, beta, f, savings, crra, floors=floors)
        pmax_w = max_pension(next(e for e in entrants if e.id == cf.winner), f, savings)
        gaps = []
        for eps in (1.0, 0.1, 0.01):
            game = bargain_game(entrants, theta, beta, f, savings, eps, floors, crra)
            gaps.append(abs(game.pension - cf.pension))
        sweep_ok &= gaps[1] <= gaps[0] + 1e-9 * pmax_w and gaps[2] <= gaps[1] + 1e-9 * pmax_w

    ok = mismatches == 0 and worst_gap_ratio <= 1.001 and sweep_ok
    report(
        3,
        ok,
        f"10,000 auctions: {mismatches} winner mismatches, worst gap {worst_gap_ratio:.3f} "
        f"one-increment steps, decimal sweep monotone: {sweep_ok}",
    )
    assert mismatches == 0
    assert worst_gap_ratio <= 1.001
    assert sweep_ok


def test_criterion_4_order_statistic_inversion():
    """Second-highest CDF from 1e6 simulated auctions inverts to the parent."""
    rng = np.random.default_rng(4242)
    J = 14
    draws = rng.random((1_000_000, J))
    second_highest = np.partition(draws, J - 2, axis=1)[:, J - 2]
    sorted_draws = np.sort(second_highest)
    grid = np.linspace(0.001, 0.999, 999)
    G_emp = np.searchsorted(sorted_draws, grid, side="right") / len(sorted_draws)
    F = order_stat_invert(G_emp, J)
    # The second-highest of 14 draws carries no mass in the bottom of the
    # support; recovery is judged where the empirical CDF resolves with at
    # least ~50 observations of mass on each side (binomial resolution).
    interior = (G_emp > 5e-5) & (G_emp < 1.0 - 5e-5)
    sup = float(np.max(np.abs(F[interior] - grid[interior])))
    ok = sup < 0.01
    report(4, ok, f"uniform parent, J=14, 1e6 auctions: sup-norm {sup:.4f} on the resolvable range (< 0.01)")
    assert sup < 0.01


def test_criterion_5_gompertz_recovery():
    """MLE on 50,000 records with ~30% censoring lands within two SEs."""
    truth = default_mortality_model()
    records = synth_mortality_records(50_000, seed=42, model=truth)
    censored = np.mean([not r.died for r in records])
    fit = fit_gompertz(records)
    se = fit.standard_errors()
    theta_hat = np.concatenate(([fit.g], fit.tau))
    theta_true = np.concatenate(([truth.g], truth.tau))
    dev = np.abs(theta_hat - theta_true) / se
    male = median_expected_life(fit, CovariateVector(780.0, "male", False, 74_515.0, 1950.0), 780.0)
    female = median_expected_life(fit, CovariateVector(720.0, "female", False, 74_515.0, 1955.0), 720.0)
    ok = bool(np.all(dev <= 2.0) and female > male and 0.2 < censored < 0.4)
    report(
        5,
        ok,
        f"50k records ({censored:.0%} censored): max |dev| {dev.max():.2f} SE, "
        f"median life female {female:.1f} > male {male:.1f}",
    )
    assert 0.2 < censored < 0.4
    assert np.all(dev <= 2.0), dev
    assert female > male


def test_criterion_6_end_to_end_identification(market20k):
    """Simulate 20,000 retirees, re-estimate, recover every primitive."""
    prims, pop, transcripts = market20k
    crra = prims.crra
    t0 = time.perf_counter()

    grad_obs = gradient_observations(transcripts, crra)
    pooled, _ = estimate_bequest_dist(grad_obs, None)
    zeta_err = abs(pooled.zeta - 0.40)
    bequest = {q: estimate_bequest_dist(grad_obs, q)[0] for q in range(1, 6)}

    runner = runner_up_logit(transcripts)
    obs = second_round_observations(transcripts, runner.runner_up, crra)

    beta_groups = estimate_beta_groups(
        obs, bequest, n_draws=10_000, bootstrap=200, seed=2026, confidence=runner.confidence
    )
    cover, qmeans = [], {q: [] for q in range(1, 6)}
    for g, est in beta_groups.items():
        if not est.identified:
            continue
        q = GroupKey.from_label(g).quintile
        cover.append(est.ci_low <= BETA_MEANS_BY_QUINTILE[q - 1] <= est.ci_high)
        qmeans[q].append(est.beta_hat)
    coverage = float(np.mean(cover))
    low_mean = float(np.mean(qmeans[1] + qmeans[2]))
    high_mean = float(np.mean(qmeans[3] + qmeans[4] + qmeans[5]))
    ordering_ok = low_mean > 0 and low_mean > 5.0 * abs(high_mean)

    alpha_table, _ = estimate_alpha(transcripts, crra)
    truth_alpha = default_info_costs()
    ratios = [
        alpha_table.alpha(ch, q) / truth_alpha.alpha(ch, q)
        for ch in ("afp", "sales_agent", "advisor")
        for q in range(1, 6)
    ]
    alpha_med = float(np.median(ratios))

    truth_w = default_cost_laws()
    sup_w = {}
    for q in range(1, 6):
        est = estimate_cost_law(obs, bequest, q, crra, seed=2026)
        r_star = prims.r_star_by_quintile[q]
        w_true = truth_w[q].truncated(r_star)
        grid = np.linspace(truth_w[q].r_low, r_star, 600)
        w_hat = np.interp(grid, est.law.grid, est.law.cdf, left=0.0, right=1.0)
        sup_w[q] = float(np.max(np.abs(w_hat - w_true.cdf_at(grid))))
    elapsed = time.perf_counter() - t0

    ok = (
        zeta_err <= 0.03
        and max(sup_w.values()) < 0.05
        and coverage >= 0.85
        and ordering_ok
        and abs(alpha_med - 1.0) <= 0.15
        and elapsed < 1800.0
    )
    report(
        6,
        ok,
        f"20k-retiree market: |zeta_hat - 0.40| = {zeta_err:.3f} (<= 0.03), "
        f"W sup-norm by quintile {max(sup_w.values()):.3f} (< 0.05), "
        f"beta coverage {coverage:.0%} (>= 85%) with low-quintile ordering {ordering_ok}, "
        f"alpha median ratio {alpha_med:.3f} (within 15%), estimation {elapsed:.0f}s (< 1800s)",
    )
    assert zeta_err <= 0.03
    assert max(sup_w.values()) < 0.05, sup_w
    assert coverage >= 0.85
    assert ordering_ok
    assert abs(alpha_med - 1.0) <= 0.15
    assert elapsed < 1800.0


def test_criterion_7_counterfactual_dominance(crra):
    """Per-draw mechanism dominance and the pension-vs-utility contrast.

    The current mechanism is replicated rating-neutrally (its pension
    coincides with the English outcome when all potential bidders take
    part), so the per-draw chain holds exactly; the qualitative welfare
    claim is checked as: the utility gap between the English and current
    mechanisms is at least an order of magnitude smaller, relative to the
    current utility level, than the full-information pension gap that
    asymmetric information leaves on the table.
    """
    laws = default_cost_laws()
    rng = np.random.default_rng(7007)
    violations = 0
    mean_by_bidders = {13: [], 14: [], 15: []}
    rel_pension_gaps, rel_utility_gaps = [], []
    for rid in range(300):
        q = int(rng.integers(1, 6))
        f = LifeFactors(
            D_R=float(rng.uniform(120.0, 220.0)),
            D_R_DP=float(rng.uniform(0.0, 15.0)),
            G_F=float(rng.uniform(0.0, 25.0)),
            S_F=float(rng.uniform(0.0, 80.0)),
        )
        savings = float(np.exp(rng.uniform(np.log(2e4), np.log(4e5))))
        n_potential = int(rng.choice([13, 14, 15]))
        theta = float(rng.uniform(0.0, 6.0))
        beta = BETA_MEANS_BY_QUINTILE[q - 1]
        costs = draw_cost_matrix(laws[q], 2000, n_potential, seed=99, retiree_id=rid)
        p_full = full_info_pension(savings, f, laws[q], n_potential, costs=costs)
        p_eng = english_pension(savings, f, laws[q], n_potential, costs=costs)
        p_cur = current_pension(savings, f, laws[q], n_potential, costs=costs)
        violations += int(np.any(p_full < p_eng) or np.any(p_eng < p_cur))
        mean_by_bidders[n_potential].append(p_full.mean() / savings)

        z_win = np.full(len(p_cur), 2.0)
        u_full, _ = gross_utilities(p_full, theta, beta, z_win, f, crra)
        u_eng, _ = gross_utilities(p_eng, theta, beta, z_win, f, crra)
        u_cur, _ = gross_utilities(p_cur, theta, beta, z_win, f, crra)
        rel_pension_gaps.append(p_full.mean() / p_cur.mean() - 1.0)
        rel_utility_gaps.append(abs(u_eng.mean() - u_cur.mean()) / abs(u_cur.mean()))

    means = {j: float(np.mean(v)) for j, v in mean_by_bidders.items()}
    monotone = means[13] < means[14] < means[15]
    pension_gap = float(np.median(rel_pension_gaps))
    utility_gap = float(np.median(rel_utility_gaps))
    ok = violations == 0 and monotone and utility_gap <= 0.1 * pension_gap
    report(
        7,
        ok,
        f"dominance violations {violations}/300 retirees x 2000 draws, "
        f"mean pension rises with bidders {monotone} ({means[13]:.4f} < {means[14]:.4f} < {means[15]:.4f}), "
        f"median rel utility gap {utility_gap:.2e} <= 0.1 x median rel pension gap {pension_gap:.3f}",
    )
    assert violations == 0
    assert monotone
    assert utility_gap <= 0.1 * pension_gap


def test_criterion_8_pipeline_determinism(tmp_path):
    """Two identically configured pipeline runs leave byte-identical trees."""
    cfg = load_config(
        seed=314,
        population_size=600,
        mortality_synth_n=2500,
        cf_sample=60,
        cf_sims=400,
        estimation_draws=200,
        estimation_bootstrap=30,
    )
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    run_pipeline(cfg, out1, verbose=False)
    run_pipeline(cfg, out2, verbose=False)
    files1 = sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file())
    same_tree = files1 == files2
    diffs = [str(rel) for rel in files1 if not filecmp.cmp(out1 / rel, out2 / rel, shallow=False)]
    ok = same_tree and not diffs
    report(8, ok, f"byte-identical output directories over {len(files1)} files" + (f"; diffs: {diffs}" if diffs else ""))
    assert same_tree
    assert not diffs
