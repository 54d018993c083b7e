"""Synthetic population generation and default (paper-pattern) calibration.

Everything here is calibration: a mortality truth whose implied median lives
sit near the reference magnitudes (female above male, rising with savings),
a lognormal savings law matched to the reference median/mean, bequest
distributions with a 40% mass at zero and quintile-increasing means, risk
rating tastes positive only in the two lowest savings quintiles, and an
information-cost table whose first-quintile row anchors the reference values
with the channel ordering sales agent > AFP > advisor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import gamma as gamma_dist

from .lifetables import CovariateVector, GompertzModel, MortalityRecord, sample_death_ages
from .market import RATING_SHARES, CostLaw, EntryConfig, MarketPrimitives, OfferPolicy
from .preferences import (
    CHANNELS,
    QUINTILES,
    THETA_BAR_DEFAULT,
    THETA_GRID_SIZE,
    BequestPrefDist,
    GroupKey,
    InfoCostTable,
    RiskPrefGroup,
)
from .valuation import ContractSpec, CrraParams

__all__ = [
    "RetireeProfile",
    "default_mortality_model",
    "spouse_covariates",
    "synth_population",
    "synth_mortality_records",
    "default_bequest_dists",
    "default_risk_groups",
    "default_info_costs",
    "default_cost_laws",
    "default_primitives",
    "write_population_csv",
    "nra_months",
    "age_bin_of",
    "SAVINGS_MEDIAN",
    "SAVINGS_LOG_SIGMA",
    "QUINTILE_CUTPOINTS",
]

# Savings law matched to reference median ~74,515 and mean ~112,471.
SAVINGS_MEDIAN = 74_515.0
SAVINGS_LOG_SIGMA = 0.9075
QUINTILE_CUTPOINTS = (34_716.0, 59_212.0, 93_775.0, 159_938.0)

# Mortality truth.  Median expected lives implied by these values:
# male 65y ~86.7, female 60y ~94.9, increasing in savings.
DEFAULT_GOMPERTZ_SHAPE = 0.0070  # per month
DEFAULT_GOMPERTZ_TAU = (-4.1009, -0.0005, -0.81613, -0.10, -2.0e-6, -0.004)

# Mean bequest weight by quintile (mass point excluded); with zeta = 0.4 the
# implied total means rise from ~2.78 to ~3.81 across quintiles.
BEQUEST_ZETA = 0.40
BEQUEST_CONT_MEANS = (4.640, 4.832, 4.952, 5.347, 6.353)
BEQUEST_GAMMA_SHAPE = 1.5

# Risk-rating taste: positive only for the two lowest savings quintiles,
# sized relative to each quintile's utility scale (the CRRA level
# (unc/S)^2 K/2 falls steeply with savings).  Large enough to detect in the
# second-round regression, small enough that rating-driven winner flips stay
# rare (they contaminate the second-order-statistic sample through runner-up
# misclassification).
BETA_MEANS_BY_QUINTILE = (1.5e-3, 3.5e-4, 0.0, 0.0, 0.0)
BETA_VAR_BY_QUINTILE = tuple((0.4 * b) ** 2 for b in (1.5e-3, 3.5e-4, 1.0e-4, 4.0e-5, 1.0e-5))

# Information costs: first-quintile row anchors the reference table; the
# quintile profile additionally shrinks with the cell's utility scale so that
# posted-offer choice stays responsive in every cell (utilities are CRRA
# levels and fall roughly with 1/savings^2).
ALPHA_Q1 = {"afp": 0.009, "sales_agent": 0.027, "advisor": 0.006}
ALPHA_PATTERN = {
    "afp": (1.0, 0.667, 0.556, 0.556, 0.556),
    "sales_agent": (1.0, 0.704, 0.481, 0.444, 0.444),
    "advisor": (1.0, 0.667, 0.5, 0.5, 0.5),
}
ALPHA_SCALE_BY_QUINTILE = (1.0, 0.31, 0.135, 0.057, 0.017)

COST_MEAN_R = 2.75
COST_SUPPORT = (0.5, 6.5)
COST_P_BELOW_ONE = (0.06, 0.06, 0.06, 0.14, 0.14)

ENTRY_QUANTILE = 0.33  # default exogenous participation threshold W(r*) level


def nra_months(gender: str) -> float:
    return 780.0 if gender == "male" else 720.0


def age_bin_of(age_months: float, gender: str) -> str:
    nra = nra_months(gender)
    if age_months < nra:
        return "before_nra"
    if age_months < nra + 1.0:
        return "at_nra"
    return "after_nra"


@dataclass(frozen=True)
class RetireeProfile:
    """One retiree: the unit of each auction."""

    id: int
    covariates: CovariateVector
    spouse: CovariateVector | None
    quintile: int
    channel: str

    @property
    def savings(self) -> float:
        return self.covariates.savings

    @property
    def group_key(self) -> GroupKey:
        return GroupKey(
            gender=self.covariates.gender,
            age_bin=age_bin_of(self.covariates.age_at_retirement, self.covariates.gender),
            quintile=self.quintile,
            channel=self.channel,
        )

    @property
    def group_label(self) -> str:
        return self.group_key.label


def default_mortality_model() -> GompertzModel:
    return GompertzModel(g=DEFAULT_GOMPERTZ_SHAPE, tau=np.array(DEFAULT_GOMPERTZ_TAU))


def spouse_covariates(retiree: CovariateVector, age_gap_months: float) -> CovariateVector:
    """Spouse of the opposite gender, sharing household savings and cohort shift."""
    return CovariateVector(
        age_at_retirement=max(240.0, retiree.age_at_retirement + age_gap_months),
        gender="male" if retiree.gender == "female" else "female",
        married=True,
        savings=retiree.savings,
        birth_cohort=retiree.birth_cohort - age_gap_months / 12.0,
    )


def _draw_covariates(rng: np.random.Generator, n: int):
    female = rng.random(n) < 0.5
    # Retirement timing: mostly at the normal retirement age, some early/late.
    u = rng.random(n)
    offset = np.zeros(n)
    early = u < 0.15
    late = u > 0.70
    offset[early] = -rng.integers(1, 37, early.sum())
    offset[late] = rng.integers(1, 61, late.sum())
    nra = np.where(female, 720.0, 780.0)
    age = nra + offset
    married = rng.random(n) < 0.70
    savings = np.exp(rng.normal(math.log(SAVINGS_MEDIAN), SAVINGS_LOG_SIGMA, n))
    year = rng.integers(2007, 2018, n)
    cohort = year - age / 12.0
    return female, age, married, savings, cohort


def quintile_of(savings: float, cutpoints=QUINTILE_CUTPOINTS) -> int:
    return 1 + int(np.searchsorted(np.asarray(cutpoints), savings, side="right"))


def synth_population(
    n: int, seed: int, channel_probs=(0.45, 0.35, 0.20), cutpoints=QUINTILE_CUTPOINTS
) -> list[RetireeProfile]:
    """Draw a retiree population with spouse links and channel assignment."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    female, age, married, savings, cohort = _draw_covariates(rng, n)
    channels = rng.choice(len(CHANNELS), size=n, p=np.asarray(channel_probs))
    # Spouses: husbands older on average, by the same gap either way.
    gap = np.clip(rng.normal(36.0, 18.0, n), -24.0, 120.0)

    out = []
    for i in range(n):
        cov = CovariateVector(
            age_at_retirement=float(age[i]),
            gender="female" if female[i] else "male",
            married=bool(married[i]),
            savings=float(savings[i]),
            birth_cohort=float(cohort[i]),
        )
        spouse = None
        if married[i]:
            signed_gap = gap[i] if female[i] else -gap[i]  # spouse male & older for female retiree
            spouse = spouse_covariates(cov, float(signed_gap))
        out.append(
            RetireeProfile(
                id=i,
                covariates=cov,
                spouse=spouse,
                quintile=quintile_of(float(savings[i]), cutpoints),
                channel=CHANNELS[int(channels[i])],
            )
        )
    return out


def synth_mortality_records(
    n: int, seed: int, model: GompertzModel | None = None
) -> list[MortalityRecord]:
    """Right-censored survival records drawn from the (given) truth.

    Follow-up windows of 310-530 months produce roughly 30% censoring under
    the default calibration.
    """
    model = model or default_mortality_model()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    female, age, married, savings, cohort = _draw_covariates(rng, n)
    records = []
    for i in range(n):
        cov = CovariateVector(
            age_at_retirement=float(age[i]),
            gender="female" if female[i] else "male",
            married=bool(married[i]),
            savings=float(savings[i]),
            birth_cohort=float(cohort[i]),
        )
        death = float(sample_death_ages(model, cov, float(age[i]), rng, 1)[0])
        fup = float(rng.uniform(310.0, 530.0))
        died = death <= age[i] + fup
        records.append(
            MortalityRecord(
                covariates=cov,
                entry_age=float(age[i]),
                exit_age=death if died else float(age[i] + fup),
                died=bool(died),
            )
        )
    return records


# ---------------------------------------------------------------------------
# Preference and cost defaults
# ---------------------------------------------------------------------------


def default_bequest_dists(
    zeta: float = BEQUEST_ZETA,
    cont_means=BEQUEST_CONT_MEANS,
    theta_bar: float = THETA_BAR_DEFAULT,
    n_grid: int = THETA_GRID_SIZE,
) -> dict[int, BequestPrefDist]:
    out = {}
    grid = np.linspace(theta_bar / n_grid, theta_bar, n_grid)
    for q in QUINTILES:
        scale = cont_means[q - 1] / BEQUEST_GAMMA_SHAPE
        cdf = gamma_dist.cdf(grid, BEQUEST_GAMMA_SHAPE, scale=scale)
        cdf = cdf / cdf[-1]  # truncate to (0, theta_bar]
        out[q] = BequestPrefDist(q, zeta, grid, cdf)
    return out


def default_risk_groups(
    beta_means=BETA_MEANS_BY_QUINTILE, beta_vars=BETA_VAR_BY_QUINTILE
) -> dict[str, RiskPrefGroup]:
    out = {}
    for key in GroupKey.all_groups():
        out[key.label] = RiskPrefGroup(
            key=key,
            beta_mean=beta_means[key.quintile - 1],
            beta_var=beta_vars[key.quintile - 1],
        )
    return out


def default_info_costs() -> InfoCostTable:
    values = {}
    for ch in CHANNELS:
        for q in QUINTILES:
            values[(ch, q)] = (
                ALPHA_Q1[ch] * ALPHA_PATTERN[ch][q - 1] * ALPHA_SCALE_BY_QUINTILE[q - 1]
            )
    return InfoCostTable(values)


def default_cost_laws(
    p_below_one=COST_P_BELOW_ONE, mean_r: float = COST_MEAN_R, support=COST_SUPPORT
) -> dict[int, CostLaw]:
    laws = {}
    cache: dict[float, CostLaw] = {}
    for q in QUINTILES:
        p = p_below_one[q - 1]
        if p not in cache:
            cache[p] = CostLaw.calibrated(p, mean_r, tuple(support))
        laws[q] = cache[p]
    return laws


def default_firm_ratings(n_firms: int = 15, seed: int = 12345) -> dict[int, int]:
    """Fixed rating buckets roughly matching the observed rating shares."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    ratings = {}
    levels = np.array(sorted(RATING_SHARES))
    probs = np.array([RATING_SHARES[z] for z in levels])
    draw = rng.choice(levels, size=n_firms, p=probs / probs.sum())
    # Guarantee every bucket appears so rating gaps exist in every market.
    draw[:3] = [1, 2, 3]
    for fid in range(n_firms):
        ratings[fid] = int(draw[fid])
    return ratings


DEFAULT_CONTRACT_MENU = {
    "imm_g0": ContractSpec(deferral=0.0, guarantee=0.0),
    "imm_g180": ContractSpec(deferral=0.0, guarantee=180.0),
}


def default_primitives(
    annual_return: float = 0.03,
    entry_quantile: float | None = ENTRY_QUANTILE,
    margin: float = 1.5,
    jitter: float = 0.30,
    bargain_premium: float = 0.7,
    contracts: dict[str, ContractSpec] | None = None,
) -> MarketPrimitives:
    """Paper-pattern calibrated market primitives.

    entry_quantile sets the exogenous participation threshold as a quantile
    of each quintile's cost law; None disables selective entry.  The default
    first-round margin is deep enough that the winner's binding floor almost
    never censors the bargained pension (the cost-law identification reads
    second order statistics off final pensions).
    """
    laws = default_cost_laws()
    r_star = None
    if entry_quantile is not None:
        r_star = {q: float(laws[q].quantile(entry_quantile)[0]) for q in QUINTILES}
    return MarketPrimitives(
        mortality=default_mortality_model(),
        crra=CrraParams.from_annual_return(annual_return),
        contracts=dict(contracts or DEFAULT_CONTRACT_MENU),
        cost_laws=laws,
        bequest=default_bequest_dists(),
        risk_groups=default_risk_groups(),
        info_costs=default_info_costs(),
        entry=EntryConfig(potential_entrants=(13, 14, 15), participation_cost=0.0, threshold_mode="exogenous", r_star=None),
        policy=OfferPolicy(kind="fixed_margin", margin=margin, jitter=jitter),
        firm_ratings=default_firm_ratings(),
        bargain_premium=bargain_premium,
        r_star_by_quintile=r_star,
    )


def build_primitives(cfg) -> MarketPrimitives:
    """Materialize market primitives from a ScenarioConfig."""
    laws = default_cost_laws(cfg.cost_p_below_one, cfg.cost_mean_r, cfg.cost_support)
    r_star = None
    if cfg.entry_quantile is not None:
        r_star = {q: float(laws[q].quantile(cfg.entry_quantile)[0]) for q in QUINTILES}
    contracts = {
        name: ContractSpec(deferral=spec.get("deferral", 0.0), guarantee=spec.get("guarantee", 0.0))
        for name, spec in cfg.contracts.items()
    }
    return MarketPrimitives(
        mortality=default_mortality_model(),
        crra=CrraParams.from_annual_return(cfg.annual_return, cfg.gamma),
        contracts=contracts,
        cost_laws=laws,
        bequest=default_bequest_dists(cfg.bequest_zeta, cfg.bequest_cont_means),
        risk_groups=default_risk_groups(cfg.beta_means, cfg.beta_vars),
        info_costs=default_info_costs(),
        entry=EntryConfig(
            potential_entrants=(13, 14, 15),
            participation_cost=cfg.participation_cost,
            threshold_mode="exogenous",
            r_star=None,
        ),
        policy=OfferPolicy(kind="fixed_margin", margin=cfg.offer_margin, jitter=cfg.offer_jitter),
        firm_ratings=default_firm_ratings(),
        bargain_premium=cfg.bargain_premium,
        r_star_by_quintile=r_star,
    )


POPULATION_CSV_HEADER = [
    "id",
    "age_months",
    "gender",
    "married",
    "savings",
    "cohort",
    "channel",
    "quintile",
    "spouse_age_months",
]


def write_population_csv(path, population: list[RetireeProfile]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POPULATION_CSV_HEADER)
        for r in population:
            w.writerow(
                [
                    r.id,
                    f"{r.covariates.age_at_retirement:.4f}",
                    r.covariates.gender,
                    int(r.covariates.married),
                    f"{r.savings:.2f}",
                    f"{r.covariates.birth_cohort:.4f}",
                    r.channel,
                    r.quintile,
                    (f"{r.spouse.age_at_retirement:.4f}" if r.spouse is not None else ""),
                ]
            )


def read_population_csv(path) -> list[RetireeProfile]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cov = CovariateVector(
                age_at_retirement=float(row["age_months"]),
                gender=row["gender"],
                married=bool(int(row["married"])),
                savings=float(row["savings"]),
                birth_cohort=float(row["cohort"]),
            )
            spouse = None
            if row["spouse_age_months"]:
                gap = float(row["spouse_age_months"]) - cov.age_at_retirement
                spouse = spouse_covariates(cov, gap)
            out.append(
                RetireeProfile(
                    id=int(row["id"]),
                    covariates=cov,
                    spouse=spouse,
                    quintile=int(row["quintile"]),
                    channel=row["channel"],
                )
            )
    return out
