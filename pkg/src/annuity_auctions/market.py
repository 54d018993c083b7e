"""Supply side: private costs, selective entry, offers, bargaining.

Firms are symmetric up to a private cost ratio r = UNC_firm / UNC_retiree
drawn per auction from a savings-quintile law.  A firm's break-even pension
is S / (r * unc); the second-round bargaining game among entrants has the
closed-form outcome that the firm offering the highest attainable utility
wins and pays the pension that matches the runner-up's best attainable
utility.  An explicit epsilon-increment game implements the supporting
strategies and is used as the oracle for the closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import beta as beta_dist

from .lifetables import GompertzModel
from .preferences import BequestPrefDist, InfoCostTable, RiskPrefGroup, ri_choice_probs, contract_choice
from .valuation import (
    ContractSpec,
    CrraParams,
    LifeFactors,
    bequest_utility,
    invert_pension,
    life_factors_batch,
    pension_utility,
)

__all__ = [
    "FirmState",
    "CostLaw",
    "EntryConfig",
    "EntryPrimitives",
    "OfferPolicy",
    "AuctionTranscript",
    "BargainOutcome",
    "DegenerateAuctionError",
    "MarketPrimitives",
    "max_pension",
    "entry_threshold",
    "bargain_closed_form",
    "bargain_game",
    "first_round_offers",
    "simulate_market",
    "stage_utility",
    "write_transcripts",
    "read_transcripts",
]

TRANSCRIPT_SCHEMA_VERSION = 1

# Firm rating pool frequencies: below-A, A-to-AA, AA+ buckets.
RATING_SHARES = {1: 0.065, 2: 0.687, 3: 0.248}


class DegenerateAuctionError(RuntimeError):
    """Bargaining requested with fewer than two entrants."""


@dataclass(frozen=True)
class FirmState:
    """One insurer in one auction: identity, rating bucket, private cost."""

    id: int
    rating: int
    cost_ratio: float

    def __post_init__(self):
        if self.rating not in (1, 2, 3):
            raise ValueError("rating must be 1, 2 or 3")
        if self.cost_ratio <= 0:
            raise ValueError("cost ratio must be positive")


class CostLaw:
    """Gridded CDF of the cost ratio r on [r_low, r_high]."""

    def __init__(self, grid: np.ndarray, cdf: np.ndarray):
        grid = np.asarray(grid, dtype=float)
        cdf = np.asarray(cdf, dtype=float)
        if grid.ndim != 1 or grid.shape != cdf.shape or len(grid) < 3:
            raise ValueError("grid and cdf must be matching 1-d arrays")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if cdf[0] > 1e-9 or abs(cdf[-1] - 1.0) > 1e-9 or np.any(np.diff(cdf) < -1e-12):
            raise ValueError("cdf must rise monotonically from 0 to 1")
        self.grid = grid
        self.cdf = np.clip(np.maximum.accumulate(cdf), 0.0, 1.0)
        self.cdf[0] = 0.0
        self.cdf[-1] = 1.0

    @property
    def r_low(self) -> float:
        return float(self.grid[0])

    @property
    def r_high(self) -> float:
        return float(self.grid[-1])

    def cdf_at(self, r):
        return np.interp(np.asarray(r, dtype=float), self.grid, self.cdf, left=0.0, right=1.0)

    def quantile(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        idx = np.clip(np.searchsorted(self.cdf, u, side="left"), 1, len(self.grid) - 1)
        c0, c1 = self.cdf[idx - 1], self.cdf[idx]
        w = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 1.0)
        return self.grid[idx - 1] + w * (self.grid[idx] - self.grid[idx - 1])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.quantile(rng.random(n))

    def truncated(self, r_star: float) -> "CostLaw":
        """Law conditional on r <= r_star (participants' law)."""
        mass = float(self.cdf_at(r_star))
        if mass <= 0:
            raise ValueError("no mass below the threshold")
        keep = self.grid <= r_star
        grid = np.append(self.grid[keep], r_star)
        cdf = np.append(self.cdf[keep], mass) / mass
        return CostLaw(grid, cdf)

    @classmethod
    def calibrated(
        cls,
        p_below_one: float,
        mean_r: float = 2.75,
        support: tuple[float, float] = (0.5, 6.5),
        n_grid: int = 1201,
    ) -> "CostLaw":
        """Beta-on-support law with a pinned mean and pinned P(r < 1).

        The unit-interval mean fixes the Beta mean; the concentration is
        solved so that the CDF at r = 1 hits p_below_one.  Tail mass below
        r = 1 is the object that drives equilibrium pensions.
        """
        lo, hi = support
        if not lo < 1.0 < hi:
            raise ValueError("support must straddle r = 1")
        mu = (mean_r - lo) / (hi - lo)
        x1 = (1.0 - lo) / (hi - lo)

        def tail(conc):
            return beta_dist.cdf(x1, mu * conc, (1.0 - mu) * conc) - p_below_one

        conc = brentq(tail, 0.5, 400.0, xtol=1e-10)
        grid = np.linspace(lo, hi, n_grid)
        x = (grid - lo) / (hi - lo)
        cdf = beta_dist.cdf(x, mu * conc, (1.0 - mu) * conc)
        cdf[0], cdf[-1] = 0.0, 1.0
        return cls(grid, cdf)


@dataclass(frozen=True)
class EntryConfig:
    """Selective-entry configuration.

    potential_entrants lists the admissible counts of interested firms (a
    per-auction draw); participation is truncated at a cost threshold that is
    either configured directly or solved from the zero-profit condition.
    """

    potential_entrants: tuple[int, ...] = (13, 14, 15)
    participation_cost: float = 0.0
    threshold_mode: str = "exogenous"
    r_star: float | None = None

    def __post_init__(self):
        if min(self.potential_entrants) < 2:
            raise ValueError("need at least 2 potential entrants for bargaining")
        if self.participation_cost < 0:
            raise ValueError("participation cost must be non-negative")
        if self.threshold_mode not in ("exogenous", "zero_profit"):
            raise ValueError("threshold_mode must be 'exogenous' or 'zero_profit'")


@dataclass(frozen=True)
class OfferPolicy:
    """First-round offer rule (configurable; no equilibrium claim).

    fixed_margin:    P = P_max / (1 + margin [+ jitter])
    shaded_by_rank:  margin grows with the firm's cost advantage within the
                     auction, so better-cost firms shade more
    replay:          offers read from a {(retiree_id, contract, firm): P} map
    """

    kind: str = "fixed_margin"
    margin: float = 0.04
    jitter: float = 0.0
    shade: float = 0.5
    replay_book: dict | None = None

    def __post_init__(self):
        if self.kind not in ("fixed_margin", "shaded_by_rank", "replay"):
            raise ValueError(f"unknown offer policy {self.kind!r}")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.jitter < 0 or self.shade < 0:
            raise ValueError("jitter and shade must be non-negative")


def stage_utility(P, theta: float, f: LifeFactors, crra: CrraParams):
    """rho(P) + theta * b(P): the pension-and-bequest part of gross utility."""
    return pension_utility(P, f, crra) + theta * bequest_utility(P, f, crra)


def max_pension(firm: FirmState, f: LifeFactors, savings: float) -> float:
    """Break-even pension: the offer at which the firm earns zero profit."""
    if savings <= 0:
        raise ValueError("savings must be positive")
    return savings / (firm.cost_ratio * f.unc)


# ---------------------------------------------------------------------------
# Selective entry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntryPrimitives:
    """Representative-auction primitives used to solve the entry threshold."""

    factors: LifeFactors
    savings: float
    margin: float = 0.04
    theta: float = 0.0
    beta: float = 0.0
    potential: int = 14


def entry_threshold(
    law: CostLaw,
    cfg: EntryConfig,
    prim: EntryPrimitives,
    rng: np.random.Generator | None = None,
    n_sims: int = 4000,
    tol: float = 1e-4,
) -> float:
    """Participation threshold r*: enter exactly when r <= r*.

    In zero-profit mode the marginal type's expected second-stage profit is
    equated to the participation cost by bisection, holding the Monte Carlo
    draws fixed across evaluations.  With the cost above the maximum
    achievable profit the threshold collapses to r_low (no entry beyond the
    infimum).
    """
    if cfg.threshold_mode == "exogenous":
        if cfg.r_star is None:
            raise ValueError("exogenous mode requires r_star")
        return float(cfg.r_star)
    if cfg.participation_cost == 0.0:
        return law.r_high

    rng = rng or np.random.default_rng(0)
    n_rivals = prim.potential - 1
    u = rng.random((n_sims, n_rivals))  # common random numbers across bisection

    def expected_profit(r_star: float) -> float:
        rivals = law.quantile(u.ravel()).reshape(u.shape)
        entered = rivals <= r_star
        # With symmetric stage utilities the marginal type (weakly worst cost
        # among entrants) wins only when no rival enters, then sells at its
        # first-round floor.
        alone = ~entered.any(axis=1)
        floor_profit = prim.savings * prim.margin / (1.0 + prim.margin)
        return float(alone.mean() * floor_profit)

    kappa = cfg.participation_cost
    if expected_profit(law.r_low + 1e-12) < kappa:
        return law.r_low
    lo, hi = law.r_low, law.r_high
    if expected_profit(hi) >= kappa:
        return hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if expected_profit(mid) >= kappa:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Bargaining
# ---------------------------------------------------------------------------


@dataclass
class BargainOutcome:
    winner: int
    runner_up: int | None
    pension: float
    winner_score: float
    target_score: float
    rounds: list = field(default_factory=list)


def _scores(entrants: Sequence[FirmState], pensions: np.ndarray, theta, beta, f, crra) -> np.ndarray:
    z = np.array([e.rating for e in entrants], dtype=float)
    return beta * z + np.asarray(stage_utility(pensions, theta, f, crra))


def _argmax_by_id(values: np.ndarray, entrants: Sequence[FirmState]) -> int:
    """Index of the maximum; exact ties go to the smallest firm id."""
    best = values.max()
    tied = np.flatnonzero(values == best)
    if len(tied) == 1:
        return int(tied[0])
    return int(min(tied, key=lambda i: entrants[i].id))


def bargain_closed_form(
    entrants: Sequence[FirmState],
    theta: float,
    beta: float,
    f: LifeFactors,
    savings: float,
    crra: CrraParams | None = None,
    floors: dict[int, float] | None = None,
) -> BargainOutcome:
    """Limit outcome of the bargaining game as the increment vanishes.

    The winner maximizes beta*Z + rho(P_max) + theta*b(P_max); the final
    pension solves the winner's utility equation against the runner-up's
    best attainable score, floored at the winner's binding first-round offer
    when one is supplied.
    """
    crra = crra or CrraParams()
    if len(entrants) < 2:
        raise DegenerateAuctionError("bargaining needs at least two entrants")
    pmax = np.array([max_pension(e, f, savings) for e in entrants])
    scores = _scores(entrants, pmax, theta, beta, f, crra)

    i_win = _argmax_by_id(scores, entrants)
    others = np.delete(np.arange(len(entrants)), i_win)
    i_rup_local = _argmax_by_id(scores[others], [entrants[i] for i in others])
    i_rup = int(others[i_rup_local])

    target = float(scores[i_rup])
    varpi = target - beta * entrants[i_win].rating
    if varpi >= 0:
        raise ValueError("bargaining target utility is non-negative; inputs inconsistent")
    pension = invert_pension(varpi, theta, f, crra)
    if floors is not None and entrants[i_win].id in floors:
        pension = max(pension, floors[entrants[i_win].id])
    pension = min(pension, float(pmax[i_win]))  # never exceeds break-even
    return BargainOutcome(
        winner=entrants[i_win].id,
        runner_up=entrants[i_rup].id,
        pension=float(pension),
        winner_score=float(scores[i_win]),
        target_score=target,
    )


def bargain_game(
    entrants: Sequence[FirmState],
    theta: float,
    beta: float,
    f: LifeFactors,
    savings: float,
    eps: float,
    floors: dict[int, float],
    crra: CrraParams | None = None,
    keep_log: bool = False,
) -> BargainOutcome:
    """Explicit alternating-offer game with fixed increment eps.

    Firms move round-robin in id order.  A firm improves its standing offer
    by eps exactly when it is currently losing and the next offer stays
    strictly below its break-even pension; the game ends after a full pass
    in which everyone stays.  The round cap is a diagnostic guard sized so
    it cannot bind for eps > 0.
    """
    crra = crra or CrraParams()
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(entrants) < 1:
        raise DegenerateAuctionError("no entrants")
    order = sorted(range(len(entrants)), key=lambda i: entrants[i].id)
    pmax = np.array([max_pension(e, f, savings) for e in entrants])
    standing = np.array([floors[e.id] for e in entrants], dtype=float)
    if np.any(standing > pmax + 1e-9):
        raise ValueError("floors exceed break-even pensions")
    util = _scores(entrants, standing, theta, beta, f, crra)

    total_steps = int(np.ceil((pmax - standing).clip(min=0.0).sum() / eps)) + len(entrants) + 4
    log: list[dict] = []
    rounds = 0
    while True:
        rounds += 1
        if rounds > total_steps:
            raise RuntimeError("bargaining game failed to terminate (round cap hit)")
        improved_this_round: list[tuple[int, float]] = []
        for i in order:
            best_other = max(util[j] for j in range(len(entrants)) if j != i) if len(entrants) > 1 else -np.inf
            losing = util[i] < best_other
            feasible = standing[i] + eps < pmax[i]
            if losing and feasible:
                standing[i] += eps
                util[i] = beta * entrants[i].rating + float(stage_utility(standing[i], theta, f, crra))
                improved_this_round.append((entrants[i].id, float(standing[i])))
        if keep_log:
            log.append({"round": rounds, "improvements": improved_this_round})
        if not improved_this_round:
            break

    i_win = _argmax_by_id(util, entrants)
    runner = None
    if len(entrants) > 1:
        others = np.delete(np.arange(len(entrants)), i_win)
        j = _argmax_by_id(util[others], [entrants[i] for i in others])
        runner = entrants[int(others[j])].id
    return BargainOutcome(
        winner=entrants[i_win].id,
        runner_up=runner,
        pension=float(standing[i_win]),
        winner_score=float(util[i_win]),
        target_score=float(max(np.delete(util, i_win))) if len(entrants) > 1 else float("-inf"),
        rounds=log,
    )


# ---------------------------------------------------------------------------
# First-round offers
# ---------------------------------------------------------------------------


def first_round_offers(
    policy: OfferPolicy,
    entrants: Sequence[FirmState],
    factors: dict[str, LifeFactors],
    savings: float,
    rng: np.random.Generator | None = None,
    retiree_id=None,
) -> dict[str, dict[int, float]]:
    """Offer book {contract_key: {firm_id: pension}}; offers never exceed P_max."""
    book: dict[str, dict[int, float]] = {}
    ranks = {e.id: k for k, e in enumerate(sorted(entrants, key=lambda e: e.cost_ratio))}
    n = len(entrants)
    for key in sorted(factors):
        f = factors[key]
        offers = {}
        for e in entrants:
            pm = max_pension(e, f, savings)
            if policy.kind == "replay":
                if policy.replay_book is None:
                    raise ValueError("replay policy without a replay book")
                offers[e.id] = float(policy.replay_book[(retiree_id, key, e.id)])
                if offers[e.id] > pm + 1e-9:
                    raise ValueError("replayed offer above break-even")
                continue
            if policy.kind == "fixed_margin":
                m = policy.margin
            else:  # shaded_by_rank
                advantage = (n - 1 - ranks[e.id]) / max(1, n - 1)
                m = policy.margin * (1.0 + policy.shade * advantage)
            if policy.jitter > 0:
                if rng is None:
                    raise ValueError("jittered policy needs a generator")
                m = m + policy.jitter * rng.random()
            offers[e.id] = pm / (1.0 + m)
        book[key] = offers
    return book


# ---------------------------------------------------------------------------
# Full market simulation
# ---------------------------------------------------------------------------


@dataclass
class MarketPrimitives:
    """Everything the simulator needs besides the population itself."""

    mortality: GompertzModel
    crra: CrraParams
    contracts: dict[str, ContractSpec]
    cost_laws: dict[int, CostLaw]
    bequest: dict[int, BequestPrefDist]
    risk_groups: dict[str, RiskPrefGroup]
    info_costs: InfoCostTable
    entry: EntryConfig
    policy: OfferPolicy
    firm_ratings: dict[int, int]
    bargain_premium: float = 2.0
    r_star_by_quintile: dict[int, float] | None = None

    def resolved_r_star(self, quintile: int) -> float:
        if self.r_star_by_quintile is not None:
            return self.r_star_by_quintile[quintile]
        if self.entry.threshold_mode == "exogenous" and self.entry.r_star is not None:
            return self.entry.r_star
        return self.cost_laws[quintile].r_high


@dataclass
class AuctionTranscript:
    """One retiree's full market episode.

    Private structural fields (costs, theta, beta, true runner-up) are
    dropped by the observables-only export used for estimation.
    """

    retiree_id: int
    quintile: int
    channel: str
    group_label: str
    savings: float
    age_months: float
    gender: str
    married: bool
    birth_cohort: float
    spouse_age_months: float | None
    factors: dict[str, dict[str, float]]
    potential: list[int]
    ratings: dict[int, int]
    entrants: list[int]
    offers: dict[str, dict[int, float]]
    stage: int
    chosen_contract: str | None
    chosen_firm: int | None
    final_pension: float | None
    rho_final: float | None
    b_final: float | None
    costs: dict[int, float] | None = None
    theta: float | None = None
    beta: float | None = None
    true_runner_up: int | None = None

    def to_dict(self, private: bool = True) -> dict:
        d = {
            "schema_version": TRANSCRIPT_SCHEMA_VERSION,
            "retiree_id": self.retiree_id,
            "quintile": self.quintile,
            "channel": self.channel,
            "group_label": self.group_label,
            "savings": self.savings,
            "age_months": self.age_months,
            "gender": self.gender,
            "married": self.married,
            "birth_cohort": self.birth_cohort,
            "spouse_age_months": self.spouse_age_months,
            "factors": self.factors,
            "potential": list(self.potential),
            "ratings": {str(k): v for k, v in sorted(self.ratings.items())},
            "entrants": list(self.entrants),
            "offers": {c: {str(k): v for k, v in sorted(o.items())} for c, o in sorted(self.offers.items())},
            "stage": self.stage,
            "chosen_contract": self.chosen_contract,
            "chosen_firm": self.chosen_firm,
            "final_pension": self.final_pension,
            "rho_final": self.rho_final,
            "b_final": self.b_final,
        }
        if private:
            d["costs"] = {str(k): v for k, v in sorted((self.costs or {}).items())}
            d["theta"] = self.theta
            d["beta"] = self.beta
            d["true_runner_up"] = self.true_runner_up
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuctionTranscript":
        if d.get("schema_version") != TRANSCRIPT_SCHEMA_VERSION:
            raise ValueError(f"unsupported transcript schema {d.get('schema_version')!r}")
        return cls(
            retiree_id=d["retiree_id"],
            quintile=d["quintile"],
            channel=d["channel"],
            group_label=d["group_label"],
            savings=d["savings"],
            age_months=d["age_months"],
            gender=d["gender"],
            married=d["married"],
            birth_cohort=d["birth_cohort"],
            spouse_age_months=d["spouse_age_months"],
            factors=d["factors"],
            potential=list(d["potential"]),
            ratings={int(k): v for k, v in d["ratings"].items()},
            entrants=list(d["entrants"]),
            offers={c: {int(k): v for k, v in o.items()} for c, o in d["offers"].items()},
            stage=d["stage"],
            chosen_contract=d["chosen_contract"],
            chosen_firm=d["chosen_firm"],
            final_pension=d["final_pension"],
            rho_final=d["rho_final"],
            b_final=d["b_final"],
            costs=({int(k): v for k, v in d["costs"].items()} if d.get("costs") else None),
            theta=d.get("theta"),
            beta=d.get("beta"),
            true_runner_up=d.get("true_runner_up"),
        )

    def life_factors(self, contract_key: str) -> LifeFactors:
        f = self.factors[contract_key]
        return LifeFactors(
            D_R=f["D_R"], D_R_DP=f["D_R_DP"], G_F=f["G_F"], S_F=f["S_F"], dp_multiple=f["dp_multiple"]
        )


def write_transcripts(path, transcripts: Iterable[AuctionTranscript], private: bool = True) -> None:
    with open(path, "w") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.to_dict(private=private), sort_keys=True) + "\n")


def read_transcripts(path) -> list[AuctionTranscript]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(AuctionTranscript.from_dict(json.loads(line)))
    return out


def _factors_payload(f: LifeFactors, contract: ContractSpec) -> dict[str, float]:
    return {
        "D_R": f.D_R,
        "D_R_DP": f.D_R_DP,
        "G_F": f.G_F,
        "S_F": f.S_F,
        "unc": f.unc,
        "dp_multiple": f.dp_multiple,
        "deferral": contract.deferral,
        "guarantee": contract.guarantee,
    }


def _retiree_rng(seed: int, stage: str, index: int) -> np.random.Generator:
    tag = int.from_bytes(stage.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


def simulate_market(
    population: Sequence,
    primitives: MarketPrimitives,
    seed: int,
    progress: bool = False,
) -> list[AuctionTranscript]:
    """Run every retiree's two-stage auction; bit-reproducible under the seed.

    Per retiree: sample preferences, draw J potential firms and their private
    costs, apply the entry threshold, generate first-round offers, run the
    rational-inattention stage choice between the posted offers and
    bargaining, and settle the bargaining stage in closed form for those who
    proceed.  Each retiree consumes an independent named substream of the
    master seed, so results do not depend on iteration order.
    """
    crra = primitives.crra
    contract_keys = sorted(primitives.contracts)
    firm_ids = sorted(primitives.firm_ratings)

    # Life factors for the whole population, one batch per contract variant.
    # Married retirees carry the compulsory survivor benefit on every contract.
    factor_table: list[dict[str, LifeFactors]] = [dict() for _ in population]
    married_idx = [i for i, r in enumerate(population) if r.spouse is not None]
    single_idx = [i for i, r in enumerate(population) if r.spouse is None]
    for key in contract_keys:
        base = primitives.contracts[key]
        if married_idx:
            spec = replace(base, spouse_covered=True)
            fs = life_factors_batch(
                primitives.mortality,
                [population[i].covariates for i in married_idx],
                [population[i].spouse for i in married_idx],
                spec,
                crra,
            )
            for i, f in zip(married_idx, fs):
                factor_table[i][key] = f
        if single_idx:
            spec = replace(base, spouse_covered=False)
            fs = life_factors_batch(
                primitives.mortality,
                [population[i].covariates for i in single_idx],
                [None] * len(single_idx),
                spec,
                crra,
            )
            for i, f in zip(single_idx, fs):
                factor_table[i][key] = f

    transcripts = []
    for i, r in enumerate(population):
        rng = _retiree_rng(seed, "simulate", r.id)
        factors = factor_table[i]
        law = primitives.cost_laws[r.quintile]
        r_star = primitives.resolved_r_star(r.quintile)

        theta = float(primitives.bequest[r.quintile].sample(rng, 1)[0])
        grp = primitives.risk_groups[r.group_label]
        beta = float(rng.normal(grp.beta_mean, math.sqrt(grp.beta_var)))
        alpha = primitives.info_costs.alpha(r.channel, r.quintile)

        n_potential = int(rng.choice(primitives.entry.potential_entrants))
        potential = [firm_ids[k] for k in rng.permutation(len(firm_ids))[:n_potential]]
        costs = {fid: float(c) for fid, c in zip(potential, law.sample(rng, n_potential))}
        entrant_ids = [fid for fid in potential if costs[fid] <= r_star]
        entrants = [FirmState(fid, primitives.firm_ratings[fid], costs[fid]) for fid in entrant_ids]

        base = dict(
            retiree_id=r.id,
            quintile=r.quintile,
            channel=r.channel,
            group_label=r.group_label,
            savings=r.savings,
            age_months=r.covariates.age_at_retirement,
            gender=r.covariates.gender,
            married=r.spouse is not None,
            birth_cohort=r.covariates.birth_cohort,
            spouse_age_months=(r.spouse.age_at_retirement if r.spouse is not None else None),
            factors={k: _factors_payload(f, primitives.contracts[k]) for k, f in factors.items()},
            potential=sorted(potential),
            ratings={fid: primitives.firm_ratings[fid] for fid in sorted(potential)},
            entrants=sorted(e.id for e in entrants),
            costs=costs,
            theta=theta,
            beta=beta,
        )

        if not entrants:
            transcripts.append(
                AuctionTranscript(
                    **base,
                    offers={},
                    stage=0,
                    chosen_contract=None,
                    chosen_firm=None,
                    final_pension=None,
                    rho_final=None,
                    b_final=None,
                    true_runner_up=None,
                )
            )
            continue

        offers = first_round_offers(primitives.policy, entrants, factors, r.savings, rng, r.id)

        # Stage choice: each firm is represented by its best contract for
        # this retiree; the bargaining option gets a calibrated premium in
        # information units on top of the best posted utility.
        by_firm_util = []
        by_firm_contract = []
        for e in entrants:
            menu = [
                (
                    pension_utility(offers[k][e.id], factors[k], crra),
                    bequest_utility(offers[k][e.id], factors[k], crra),
                )
                for k in contract_keys
            ]
            a = contract_choice(theta, menu)
            by_firm_contract.append(contract_keys[a])
            by_firm_util.append(menu[a][0] + theta * menu[a][1] + beta * e.rating)
        by_firm_util = np.array(by_firm_util)
        eu_bargain = float(by_firm_util.max() + alpha * primitives.bargain_premium)
        priors = np.full(len(entrants), 1.0 / len(entrants))
        probs = ri_choice_probs(by_firm_util, eu_bargain, priors, alpha)
        pick = int(rng.choice(len(entrants) + 1, p=probs))

        if pick < len(entrants):
            e = entrants[pick]
            key = by_firm_contract[pick]
            pension = offers[key][e.id]
            f = factors[key]
            transcripts.append(
                AuctionTranscript(
                    **base,
                    offers=offers,
                    stage=1,
                    chosen_contract=key,
                    chosen_firm=e.id,
                    final_pension=float(pension),
                    rho_final=float(pension_utility(pension, f, crra)),
                    b_final=float(bequest_utility(pension, f, crra)),
                    true_runner_up=None,
                )
            )
            continue

        # Second round: settle the contract on the best posted offers, then bargain.
        best_menu = []
        for k in contract_keys:
            p_best = max(offers[k].values())
            best_menu.append(
                (pension_utility(p_best, factors[k], crra), bequest_utility(p_best, factors[k], crra))
            )
        key = contract_keys[contract_choice(theta, best_menu)]
        f = factors[key]
        floors = offers[key]

        if len(entrants) == 1:
            # No competitive pressure: the binding floor is the outcome.
            e = entrants[0]
            pension = floors[e.id]
            winner, runner = e.id, None
        else:
            out = bargain_closed_form(entrants, theta, beta, f, r.savings, crra, floors=floors)
            pension, winner, runner = out.pension, out.winner, out.runner_up

        transcripts.append(
            AuctionTranscript(
                **base,
                offers=offers,
                stage=2,
                chosen_contract=key,
                chosen_firm=winner,
                final_pension=float(pension),
                rho_final=float(pension_utility(pension, f, crra)),
                b_final=float(bequest_utility(pension, f, crra)),
                true_runner_up=runner,
            )
        )
        if progress and (i + 1) % 2000 == 0:
            print(f"  simulated {i + 1}/{len(population)} auctions")
    return transcripts
