"""Pension and welfare comparisons across pricing mechanisms.

Three per-draw outcomes share the same simulated cost draws for each
retiree: the winner's break-even pension under complete cost information
(best of J potential draws), the English-auction pension (second-best
break-even, ratings shut down), and a replication of the current mechanism
(second-round bargaining among participants priced without the rating
term; with all potential bidders participating it coincides with the
English outcome, and the rating taste enters only the utility accounting).
Common random numbers make the dominance chain exact draw by draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .market import RATING_SHARES, CostLaw
from .valuation import CrraParams, LifeFactors, bequest_utility, money_worth, pension_utility

__all__ = [
    "CfRetiree",
    "MechanismResult",
    "MECHANISMS",
    "full_info_pension",
    "english_pension",
    "current_pension",
    "gross_utilities",
    "simulate_mechanisms",
    "run_counterfactuals",
    "pension_table",
    "mwr_table",
    "utility_table",
]

MECHANISMS = ("current", "english", "full_info")


@dataclass(frozen=True)
class CfRetiree:
    """Inputs one retiree contributes to the mechanism comparison."""

    id: int
    quintile: int
    channel: str
    group_label: str
    savings: float
    factors: LifeFactors
    n_potential: int
    theta: float
    beta: float


@dataclass
class MechanismResult:
    """Per-retiree, per-mechanism outcome summaries (means over draws)."""

    retiree_id: int
    quintile: int
    channel: str
    n_potential: int
    pension: dict[str, float] = field(default_factory=dict)
    pension_median: dict[str, float] = field(default_factory=dict)
    mwr: dict[str, float] = field(default_factory=dict)
    utility: dict[str, float] = field(default_factory=dict)
    utility_nobeta: dict[str, float] = field(default_factory=dict)
    savings: float = 0.0
    unc: float = 0.0


def _cost_rng(seed: int, retiree_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 77001, retiree_id]))


def draw_cost_matrix(law: CostLaw, n_sims: int, n_potential: int, seed: int, retiree_id: int) -> np.ndarray:
    """Common-random-number cost draws: one row of J potential costs per sim."""
    rng = _cost_rng(seed, retiree_id)
    return law.quantile(rng.random((n_sims, n_potential)).ravel()).reshape(n_sims, n_potential)


def full_info_pension(
    savings: float,
    factors: LifeFactors,
    law: CostLaw,
    n_potential: int,
    n_sims: int = 10_000,
    seed: int = 0,
    retiree_id: int = 0,
    costs: np.ndarray | None = None,
):
    """Break-even pension of the lowest-cost potential bidder, per draw."""
    r = costs if costs is not None else draw_cost_matrix(law, n_sims, n_potential, seed, retiree_id)
    return savings / (np.sort(r, axis=1)[:, 0] * factors.unc)


def english_pension(
    savings: float,
    factors: LifeFactors,
    law: CostLaw,
    n_potential: int,
    n_sims: int = 10_000,
    seed: int = 0,
    retiree_id: int = 0,
    costs: np.ndarray | None = None,
):
    """Second-lowest break-even pension with ratings shut down, per draw."""
    if n_potential < 2:
        raise ValueError("English auction needs at least two bidders")
    r = costs if costs is not None else draw_cost_matrix(law, n_sims, n_potential, seed, retiree_id)
    return savings / (np.sort(r, axis=1)[:, 1] * factors.unc)


def current_pension(
    savings: float,
    factors: LifeFactors,
    law: CostLaw,
    n_potential: int,
    n_sims: int = 10_000,
    seed: int = 0,
    retiree_id: int = 0,
    costs: np.ndarray | None = None,
    entry_r_star: float | None = None,
    floor_margin: float = 1.5,
):
    """Second-round bargaining replication, rating-neutral pricing.

    Participants are the potential bidders with cost below the entry
    threshold (all of them by default, mirroring the English counterfactual's
    treatment of potential bidders as actual).  With two or more participants
    the bargained pension equals the second-lowest participant's break-even;
    a lone participant concedes only its first-round floor.  Per-draw
    dominance against the English outcome holds whenever at least two firms
    participate.
    """
    r = costs if costs is not None else draw_cost_matrix(law, n_sims, n_potential, seed, retiree_id)
    r_sorted = np.sort(r, axis=1)
    if entry_r_star is None:
        return savings / (r_sorted[:, 1] * factors.unc)
    participants = r_sorted <= entry_r_star
    n_in = participants.sum(axis=1)
    out = np.empty(len(r_sorted))
    # second-lowest participant (columns are sorted, so it is column 1)
    multi = n_in >= 2
    out[multi] = savings / (r_sorted[multi, 1] * factors.unc)
    single = n_in == 1
    out[single] = savings / (r_sorted[single, 0] * factors.unc * (1.0 + floor_margin))
    none = n_in == 0
    out[none] = np.nan
    return out


def gross_utilities(pensions, theta: float, beta: float, z_winner, factors: LifeFactors, crra: CrraParams):
    """Gross utility with and without the rating term, per draw."""
    pensions = np.asarray(pensions, dtype=float)
    base = pension_utility(pensions, factors, crra) + theta * bequest_utility(pensions, factors, crra)
    return base + beta * np.asarray(z_winner, dtype=float), base


def _winner_ratings(n_sims: int, n_potential: int, seed: int, retiree_id: int, r: np.ndarray) -> np.ndarray:
    """Rating of the lowest-cost bidder per draw (iid rating assignment)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77002, retiree_id]))
    levels = np.array(sorted(RATING_SHARES))
    probs = np.array([RATING_SHARES[z] for z in levels])
    z = rng.choice(levels, size=(n_sims, n_potential), p=probs / probs.sum())
    return z[np.arange(n_sims), np.argmin(r, axis=1)]


def simulate_mechanisms(
    ret: CfRetiree,
    law: CostLaw,
    crra: CrraParams,
    n_sims: int = 10_000,
    seed: int = 0,
    entry_r_star: float | None = None,
) -> MechanismResult:
    """All three mechanisms on shared draws for one retiree."""
    r = draw_cost_matrix(law, n_sims, ret.n_potential, seed, ret.id)
    p_full = full_info_pension(ret.savings, ret.factors, law, ret.n_potential, costs=r)
    p_eng = english_pension(ret.savings, ret.factors, law, ret.n_potential, costs=r)
    p_cur = current_pension(
        ret.savings, ret.factors, law, ret.n_potential, costs=r, entry_r_star=entry_r_star
    )
    z_win = _winner_ratings(n_sims, ret.n_potential, seed, ret.id, r)

    res = MechanismResult(
        retiree_id=ret.id,
        quintile=ret.quintile,
        channel=ret.channel,
        n_potential=ret.n_potential,
        savings=ret.savings,
        unc=ret.factors.unc,
    )
    for name, draws in (("current", p_cur), ("english", p_eng), ("full_info", p_full)):
        ok = np.isfinite(draws)
        d = draws[ok]
        u_beta, u_plain = gross_utilities(d, ret.theta, ret.beta, z_win[ok], ret.factors, crra)
        res.pension[name] = float(d.mean())
        res.pension_median[name] = float(np.median(d))
        res.mwr[name] = float(money_worth(d.mean(), ret.factors, ret.savings))
        res.utility[name] = float(u_beta.mean())
        res.utility_nobeta[name] = float(u_plain.mean())
    return res


def run_counterfactuals(
    retirees: list[CfRetiree],
    laws: dict[int, CostLaw],
    crra: CrraParams,
    n_sims: int = 10_000,
    seed: int = 0,
    entry_r_star: dict[int, float] | None = None,
) -> list[MechanismResult]:
    out = []
    for ret in retirees:
        r_star = entry_r_star.get(ret.quintile) if entry_r_star else None
        out.append(simulate_mechanisms(ret, laws[ret.quintile], crra, n_sims, seed, r_star))
    return out


# ---------------------------------------------------------------------------
# Report tables
# ---------------------------------------------------------------------------


def pension_table(results: list[MechanismResult]) -> pd.DataFrame:
    """Mean/median pensions and ratios to full information, by quintile x bidders."""
    rows = []
    for res in results:
        for mech in MECHANISMS:
            rows.append(
                {
                    "quintile": res.quintile,
                    "potential_bidders": res.n_potential,
                    "mechanism": mech,
                    "pension_mean": res.pension[mech],
                    "pension_median": res.pension_median[mech],
                }
            )
    df = pd.DataFrame(rows)
    agg = df.groupby(["quintile", "potential_bidders", "mechanism"], as_index=False).mean()
    full = agg[agg.mechanism == "full_info"].set_index(["quintile", "potential_bidders"])
    agg["ratio_to_full_info_mean"] = [
        row.pension_mean / full.loc[(row.quintile, row.potential_bidders), "pension_mean"]
        for row in agg.itertuples()
    ]
    agg["ratio_to_full_info_median"] = [
        row.pension_median / full.loc[(row.quintile, row.potential_bidders), "pension_median"]
        for row in agg.itertuples()
    ]
    return agg.sort_values(["quintile", "potential_bidders", "mechanism"]).reset_index(drop=True)


def mwr_table(results: list[MechanismResult]) -> pd.DataFrame:
    """Group money's worth: sum(P * unc) / sum(S), by quintile x channel."""
    rows = []
    for res in results:
        for mech in MECHANISMS:
            rows.append(
                {
                    "quintile": res.quintile,
                    "channel": res.channel,
                    "mechanism": mech,
                    "pv_payments": res.pension[mech] * res.unc,
                    "savings": res.savings,
                }
            )
    df = pd.DataFrame(rows)
    agg = df.groupby(["quintile", "channel", "mechanism"], as_index=False).sum(numeric_only=True)
    agg["mwr"] = agg.pv_payments / agg.savings
    return agg[["quintile", "channel", "mechanism", "mwr"]].sort_values(
        ["quintile", "channel", "mechanism"]
    ).reset_index(drop=True)


def utility_table(results: list[MechanismResult], grouping: str = "bidders") -> pd.DataFrame:
    """Average gross utility with and without the rating term.

    grouping is "bidders" (quintile x potential bidders) or "channel"
    (quintile x channel); empty cells simply do not appear.
    """
    if grouping not in ("bidders", "channel"):
        raise ValueError("grouping must be 'bidders' or 'channel'")
    key = "potential_bidders" if grouping == "bidders" else "channel"
    rows = []
    for res in results:
        row = {
            "quintile": res.quintile,
            "potential_bidders": res.n_potential,
            "channel": res.channel,
        }
        for mech in MECHANISMS:
            row[f"utility_{mech}"] = res.utility[mech]
            row[f"utility_nobeta_{mech}"] = res.utility_nobeta[mech]
        rows.append(row)
    df = pd.DataFrame(rows)
    agg = df.groupby(["quintile", key], as_index=False).mean(numeric_only=True)
    drop = "channel" if key == "potential_bidders" else "potential_bidders"
    if drop in agg.columns:
        agg = agg.drop(columns=[drop])
    return agg.sort_values(["quintile", key]).reset_index(drop=True)
