import numpy as np
import pytest

from annuity_auctions.lifetables import CovariateVector
from annuity_auctions.population import default_mortality_model, spouse_covariates
from annuity_auctions.valuation import CrraParams

# The acceptance market: 20,000 retirees with 13-15 potential bidders under
# the paper-pattern calibration.  Built once per session; both the module
# tests and the acceptance suite read from it.
ACCEPTANCE_POPULATION = 20_000
ACCEPTANCE_POP_SEED = 606
ACCEPTANCE_MARKET_SEED = 808


@pytest.fixture(scope="session")
def market20k():
    from annuity_auctions.market import simulate_market
    from annuity_auctions.population import default_primitives, synth_population

    prims = default_primitives()
    pop = synth_population(ACCEPTANCE_POPULATION, seed=ACCEPTANCE_POP_SEED)
    transcripts = simulate_market(pop, prims, seed=ACCEPTANCE_MARKET_SEED)
    return prims, pop, transcripts


@pytest.fixture(scope="session")
def mortality():
    return default_mortality_model()


@pytest.fixture(scope="session")
def crra():
    return CrraParams.from_annual_return(0.03)


@pytest.fixture(scope="session")
def male65():
    return CovariateVector(
        age_at_retirement=780.0, gender="male", married=False, savings=74_515.0, birth_cohort=1950.0
    )


@pytest.fixture(scope="session")
def female60():
    return CovariateVector(
        age_at_retirement=720.0, gender="female", married=False, savings=74_515.0, birth_cohort=1955.0
    )


@pytest.fixture(scope="session")
def married_male65(male65):
    cov = CovariateVector(
        age_at_retirement=780.0, gender="male", married=True, savings=74_515.0, birth_cohort=1950.0
    )
    return cov, spouse_covariates(cov, -36.0)


def gauss_legendre_integral(f, a, b, n_panels=40, order=64):
    """Composite fixed-order quadrature used as an independent oracle."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n_panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        total += half * np.sum(weights * f(mid + half * nodes))
    return total


def random_auction_instance(rng, n_firms=None):
    """Random bargaining instance for game-vs-closed-form comparisons."""
    from annuity_auctions.market import FirmState
    from annuity_auctions.valuation import LifeFactors

    J = int(n_firms if n_firms is not None else rng.integers(2, 16))
    f = LifeFactors(
        D_R=float(rng.uniform(120.0, 220.0)),
        D_R_DP=float(rng.uniform(0.0, 15.0)),
        G_F=float(rng.uniform(0.0, 25.0)),
        S_F=float(rng.uniform(0.0, 90.0)),
    )
    savings = float(np.exp(rng.uniform(np.log(2e4), np.log(4e5))))
    theta = 0.0 if rng.random() < 0.4 else float(rng.uniform(0.0, 10.0))
    # Rating taste scaled to the auction's utility level so it matters
    # without dominating.
    best_pmax = savings / (0.6 * f.unc)
    u_scale = (f.k_pension() + theta * f.k_bequest()) / (2.0 * best_pmax**2)
    beta = float(rng.uniform(0.0, 0.15) * u_scale)
    entrants = [
        FirmState(id=j, rating=int(rng.integers(1, 4)), cost_ratio=float(rng.uniform(0.6, 5.0)))
        for j in range(J)
    ]
    margin = float(rng.uniform(0.02, 0.10))
    return entrants, theta, beta, f, savings, margin


def safe_epsilon(outcome_cf, entrants, theta, f, savings, cap_frac=0.02):
    """Per-instance increment small enough for exact winner agreement.

    The winner is guaranteed whenever one epsilon step near its break-even
    moves utility by less than the top-two score gap; the local slope of
    rho + theta*b at P is K/P^3.
    """
    K = f.k_pension() + theta * f.k_bequest()
    winner = next(e for e in entrants if e.id == outcome_cf.winner)
    pmax_w = savings / (winner.cost_ratio * f.unc)
    gap = outcome_cf.winner_score - outcome_cf.target_score
    slope = K / (0.95 * pmax_w) ** 3
    eps = 0.5 * gap / slope if gap > 0 else cap_frac * pmax_w
    return float(min(max(eps, 1e-9 * pmax_w), cap_frac * pmax_w))
