"""Recovering demand and cost primitives from market transcripts.

The estimators consume observables only: offers, ratings, choices, final
pensions, and the per-contract life factors implied by demographics.  The
chain is

    contract-choice thresholds     ->  bequest distribution (zeta, F~)
    first-round conditional logit  ->  runner-up identities, info costs
    second-round utility equation  ->  group rating tastes beta_g
    second-order pension statistics->  cost-ratio law W on [r_low, r*]

plus a pension-rate residualization diagnostic for firm symmetry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde, ks_2samp

from .market import AuctionTranscript, CostLaw
from .preferences import (
    CHANNELS,
    QUINTILES,
    THETA_BAR_DEFAULT,
    THETA_GRID_SIZE,
    BequestPrefDist,
    GroupKey,
    InfoCostTable,
    info_cost_from_elasticity,
)
from .valuation import CrraParams, LifeFactors, bequest_utility, invert_pension, pension_utility

__all__ = [
    "GradientObservation",
    "SecondRoundObservation",
    "gradient_observations",
    "estimate_bequest_dist",
    "ConditionalLogit",
    "runner_up_logit",
    "RunnerUpModel",
    "estimate_alpha",
    "estimate_beta_groups",
    "BetaGroupEstimate",
    "order_stat_invert",
    "second_round_observations",
    "estimate_cost_law",
    "cost_dist_from_varpi",
    "NormalNoise",
    "RatingGapNoise",
    "deconvolve",
    "symmetry_diagnostic",
    "EstimationResult",
    "estimate_all",
]


# ---------------------------------------------------------------------------
# Bequest preferences from contract-choice thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientObservation:
    """One retiree's bequest-choice threshold and the choice indicator."""

    retiree_id: int
    gradient: float
    chose_low_bequest: bool
    quintile: int


def _transcript_factors(t: AuctionTranscript, key: str) -> LifeFactors:
    f = t.factors[key]
    return LifeFactors(D_R=f["D_R"], D_R_DP=f["D_R_DP"], G_F=f["G_F"], S_F=f["S_F"], dp_multiple=f["dp_multiple"])


def _choice_menu(t: AuctionTranscript, crra: CrraParams):
    """(rho, b) per contract at the offers the retiree actually chose over.

    First-round buyers compared the chosen firm's posted menu; second-round
    buyers settled the contract on the best posted offer per contract.
    """
    menu = {}
    for key in sorted(t.offers):
        offers = t.offers[key]
        price = offers[t.chosen_firm] if t.stage == 1 else max(offers.values())
        f = _transcript_factors(t, key)
        menu[key] = (float(pension_utility(price, f, crra)), float(bequest_utility(price, f, crra)))
    return menu


def gradient_observations(transcripts, crra: CrraParams) -> list[GradientObservation]:
    """Threshold rows: gradient t and the indicator of picking the low-b side.

    Contracts are ordered by bequest utility; the threshold for choosing the
    low-bequest contract is min over rivals of (rho_1 - rho_a)/(b_a - b_1).
    Pairs without a positive finite threshold are dominated menus that carry
    no information about theta and are skipped.
    """
    out = []
    for t in sorted(transcripts, key=lambda t: t.retiree_id):
        if t.stage not in (1, 2) or t.chosen_contract is None or len(t.offers) < 2:
            continue
        menu = _choice_menu(t, crra)
        keys = sorted(menu, key=lambda k: (menu[k][1], k))  # ascending bequest utility
        rho1, b1 = menu[keys[0]]
        grads = []
        ok = True
        for k in keys[1:]:
            rho_a, b_a = menu[k]
            if b_a <= b1 or rho1 <= rho_a:
                ok = False
                break
            grads.append((rho1 - rho_a) / (b_a - b1))
        if not ok or not grads:
            continue
        out.append(
            GradientObservation(
                retiree_id=t.retiree_id,
                gradient=float(min(grads)),
                chose_low_bequest=(t.chosen_contract == keys[0]),
                quintile=t.quintile,
            )
        )
    return out


def _local_logistic(x, y, x_eval, bandwidth):
    """Kernel-weighted logistic fit of P(y=1 | x) at each evaluation point."""
    out = np.empty(len(x_eval))
    for i, x0 in enumerate(x_eval):
        w = np.exp(-0.5 * ((x - x0) / bandwidth) ** 2)
        if w.sum() < 1e-8:
            out[i] = np.nan
            continue
        xc = x - x0
        beta = np.zeros(2)
        for _ in range(40):
            eta = beta[0] + beta[1] * xc
            p = 1.0 / (1.0 + np.exp(-np.clip(eta, -30, 30)))
            g = np.array([np.sum(w * (y - p)), np.sum(w * (y - p) * xc)])
            s = w * p * (1.0 - p) + 1e-10
            H = np.array([[np.sum(s), np.sum(s * xc)], [np.sum(s * xc), np.sum(s * xc**2)]])
            H[0, 0] += 1e-8
            H[1, 1] += 1e-8
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            beta = beta + step
            if np.max(np.abs(step)) < 1e-10:
                break
        out[i] = 1.0 / (1.0 + math.exp(-float(np.clip(beta[0], -30, 30))))
    return out


def _isotonic(y, w=None):
    """Pool-adjacent-violators projection onto non-decreasing sequences."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    vals = []
    wts = []
    counts = []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        counts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, c2 = vals.pop(), wts.pop(), counts.pop()
            v1, w1, c1 = vals.pop(), wts.pop(), counts.pop()
            vals.append((v1 * w1 + v2 * w2) / (w1 + w2))
            wts.append(w1 + w2)
            counts.append(c1 + c2)
    return np.repeat(vals, counts)


@dataclass
class BequestFitDiagnostics:
    n_obs: int
    min_gradient: float
    zeta_extrapolated_flag: bool


def _fit_logistic_line(x, y):
    """Unweighted two-parameter logistic fit P(y=1|x) = expit(a + b x)."""
    beta = np.zeros(2)
    for _ in range(60):
        eta = np.clip(beta[0] + beta[1] * x, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        g = np.array([np.sum(y - p), np.sum((y - p) * x)])
        s = p * (1.0 - p) + 1e-10
        H = np.array([[np.sum(s), np.sum(s * x)], [np.sum(s * x), np.sum(s * x**2)]])
        H += 1e-8 * np.eye(2)
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-11:
            break
    return beta


def estimate_bequest_dist(
    observations,
    quintile: int | None,
    theta_bar: float = THETA_BAR_DEFAULT,
    n_grid: int = THETA_GRID_SIZE,
    zeta_window: float = 0.40,
    bandwidth_scale: float = 1.0,
) -> tuple[BequestPrefDist, BequestFitDiagnostics]:
    """Mass point and continuous CDF from threshold-choice data.

    The continuous shape comes from a local logistic regression of the
    low-bequest indicator on log gradient followed by an isotonic
    projection.  The mass point is the t -> 0+ intercept of a logistic line
    in the gradient itself, fitted over the lowest zeta_window fraction of
    gradients; the continuous part vanishes at zero so the intercept is the
    mass point, and the line removes the within-window trend.  quintile=None
    pools all observations.
    """
    obs = [o for o in observations if o.gradient > 0 and (quintile is None or o.quintile == quintile)]
    if len(obs) < 50:
        raise ValueError(f"too few gradient observations for quintile {quintile}: {len(obs)}")
    t = np.array([o.gradient for o in obs])
    y = np.array([1.0 if o.chose_low_bequest else 0.0 for o in obs])
    x = np.log(t)

    h = bandwidth_scale * 1.06 * np.std(x) * len(x) ** (-0.2)
    x_eval = np.quantile(x, np.linspace(0.005, 0.995, 160))
    f_hat = _local_logistic(x, y, x_eval, h)
    keep = np.isfinite(f_hat)
    x_eval, f_hat = x_eval[keep], f_hat[keep]
    f_hat = _isotonic(f_hat)

    # Mass point: the t -> 0+ intercept of a logistic line in t over the
    # lowest-gradient window.
    lo_cut = np.quantile(t, zeta_window)
    sel = t <= lo_cut
    if sel.sum() >= 30:
        a, _ = _fit_logistic_line(t[sel], y[sel])
        zeta = 1.0 / (1.0 + math.exp(-float(np.clip(a, -30, 30))))
    else:
        zeta = float(f_hat[0])
    zeta = float(np.clip(zeta, 0.0, 0.98))
    flag = bool(t.min() > 0.1)

    cont = np.clip((f_hat - zeta) / max(1.0 - zeta, 1e-9), 0.0, 1.0)
    cont = _isotonic(cont)

    grid = np.linspace(theta_bar / n_grid, theta_bar, n_grid)
    t_eval = np.exp(x_eval)
    cdf = np.interp(grid, t_eval, cont, left=0.0, right=float(cont[-1]))
    # Beyond the largest traced gradient the CDF rises linearly to one.
    t_hi = min(float(t_eval[-1]), theta_bar)
    tail = grid >= t_hi
    if tail.any() and t_hi < theta_bar:
        frac = (grid[tail] - t_hi) / (theta_bar - t_hi)
        cdf[tail] = cont[-1] + (1.0 - cont[-1]) * frac
    cdf = np.clip(np.maximum.accumulate(cdf), 0.0, 1.0)
    cdf[-1] = 1.0

    dist = BequestPrefDist(quintile if quintile is not None else 0, zeta, grid, cdf)
    return dist, BequestFitDiagnostics(n_obs=len(obs), min_gradient=float(t.min()), zeta_extrapolated_flag=flag)


# ---------------------------------------------------------------------------
# Conditional logit machinery (shared by runner-up and info-cost estimators)
# ---------------------------------------------------------------------------


class ConditionalLogit:
    """Alternative-specific conditional logit with ridge regularization.

    Design arrays are padded: X has shape (n, A, p) with valid alternatives
    flagged in mask.  The small L2 penalty keeps the likelihood well posed
    under separation or collinear firm attributes; fits that hit the
    parameter guard are flagged.
    """

    def __init__(self, ridge=1e-4):
        self.ridge = ridge
        self.coef_: np.ndarray | None = None
        self.converged = False
        self.regularization_flag = False

    def _ridge_vec(self, p):
        return np.broadcast_to(np.asarray(self.ridge, dtype=float), (p,))

    def _loglik(self, beta, X, mask, choice):
        eta = X @ beta
        eta = np.where(mask, eta, -np.inf)
        m = eta.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.where(mask, np.exp(eta - m), 0.0), axis=1))
        ll = float(np.sum(eta[np.arange(len(choice)), choice]) - np.sum(lse))
        p = np.where(mask, np.exp(eta - lse[:, None]), 0.0)
        resid = -p
        resid[np.arange(len(choice)), choice] += 1.0
        grad = np.einsum("na,nap->p", resid, X)
        rv = self._ridge_vec(len(beta))
        ll -= float(rv @ beta**2)
        grad -= 2.0 * rv * beta
        return ll, grad, p

    def fit(self, X, mask, choice, max_iter: int = 300):
        n, A, p = X.shape
        beta = np.zeros(p)
        ll, grad, _ = self._loglik(beta, X, mask, choice)
        for _ in range(max_iter):
            # Fisher-scoring Hessian
            eta = np.where(mask, X @ beta, -np.inf)
            m = eta.max(axis=1, keepdims=True)
            w = np.where(mask, np.exp(eta - m), 0.0)
            w /= w.sum(axis=1, keepdims=True)
            xb = np.einsum("na,nap->np", w, X)
            H = -np.einsum("na,nap,naq->pq", w, X, X) + np.einsum("np,nq->pq", xb, xb)
            H -= 2.0 * np.diag(self._ridge_vec(p))
            try:
                step = np.linalg.solve(H, -grad)
            except np.linalg.LinAlgError:
                step = grad
            improved = False
            for k in range(40):
                cand = beta + step * 0.5**k
                cll, cgrad, _ = self._loglik(cand, X, mask, choice)
                if cll > ll:
                    beta, ll, grad = cand, cll, cgrad
                    improved = True
                    break
            if not improved or np.max(np.abs(grad)) < 1e-8 * max(1.0, abs(ll)):
                self.converged = np.max(np.abs(grad)) < 1e-5 * max(1.0, abs(ll))
                break
        self.coef_ = beta
        if np.max(np.abs(beta)) > 50.0 / max(np.abs(X).max(), 1e-12):
            self.regularization_flag = True
        return self

    def probabilities(self, X, mask):
        eta = np.where(mask, X @ self.coef_, -np.inf)
        m = eta.max(axis=1, keepdims=True)
        w = np.where(mask, np.exp(eta - m), 0.0)
        return w / w.sum(axis=1, keepdims=True)

    def covariance(self, X, mask):
        """Asymptotic covariance from the observed information at the fit."""
        w = self.probabilities(X, mask)
        xb = np.einsum("na,nap->np", w, X)
        info = np.einsum("na,nap,naq->pq", w, X, X) - np.einsum("np,nq->pq", xb, xb)
        info += 2.0 * np.diag(self._ridge_vec(X.shape[2]))
        return np.linalg.inv(info)


def _mean_mwr(t: AuctionTranscript, fid: int) -> float:
    vals = []
    for key, offers in t.offers.items():
        if fid in offers:
            vals.append(offers[fid] * t.factors[key]["unc"] / t.savings)
    return float(np.mean(vals))


@dataclass
class RunnerUpModel:
    """Fitted choice models, predicted runner-up identities and confidence.

    confidence holds the ratio of the best to the second-best predicted
    choice probability among non-chosen entrants; downstream estimators can
    restrict to decisively predicted runner-ups.
    """

    models: dict
    fallbacks: dict
    runner_up: dict[int, int]
    confidence: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def predicted_runner_up(self, retiree_id: int) -> int | None:
        return self.runner_up.get(retiree_id)


def _runner_up_design(ts, firm_index, n_firms):
    """Padded (X, mask, choice) arrays for first-round firm choice."""
    p = n_firms + 2  # firm dummies + rating + mwr
    A = max(len(t.entrants) for t in ts)
    X = np.zeros((len(ts), A, p))
    mask = np.zeros((len(ts), A), dtype=bool)
    choice = np.zeros(len(ts), dtype=int)
    for i, t in enumerate(ts):
        for a, fid in enumerate(sorted(t.entrants)):
            X[i, a, firm_index[fid]] = 1.0
            X[i, a, n_firms] = t.ratings[fid]
            X[i, a, n_firms + 1] = _mean_mwr(t, fid)
            mask[i, a] = True
            if fid == t.chosen_firm:
                choice[i] = a
    return X, mask, choice


def runner_up_logit(
    transcripts, min_group_obs: int = 150, ridge: float = 1e-3, firm_effect_ridge: float = 20.0
) -> RunnerUpModel:
    """Appendix-style alternative-specific conditional logit, per group.

    Trained on first-round firm choices (firm intercepts, rating, money's
    worth of the posted offer); sparse groups fall back to a savings-quintile
    pool, then to a global fit, with the fallback recorded.  The runner-up of
    a second-round buyer is the non-chosen entrant with the highest predicted
    utility.
    """
    transcripts = sorted(transcripts, key=lambda t: t.retiree_id)  # float sums canonical
    firm_ids = sorted({fid for t in transcripts for fid in t.potential})
    firm_index = {fid: k for k, fid in enumerate(firm_ids)}
    n_firms = len(firm_ids)

    train = [t for t in transcripts if t.stage == 1 and t.chosen_firm is not None and len(t.entrants) >= 2]
    if not train:
        raise ValueError("no first-round choices to train on")

    # Firm intercepts absorb asymmetries the symmetric-cost model does not
    # have; at these sample sizes they mostly add prediction noise, so they
    # get a much heavier ridge than the rating and money's-worth slopes.
    ridge_vec = np.full(n_firms + 2, firm_effect_ridge)
    ridge_vec[n_firms:] = ridge

    def fit_subset(ts):
        X, mask, choice = _runner_up_design(ts, firm_index, n_firms)
        return ConditionalLogit(ridge=ridge_vec).fit(X, mask, choice)

    global_model = fit_subset(train)
    by_quintile = {}
    for q in QUINTILES:
        sub = [t for t in train if t.quintile == q]
        by_quintile[q] = fit_subset(sub) if len(sub) >= min_group_obs else None

    models, fallbacks, flags = {}, {}, {}
    groups = sorted({t.group_label for t in transcripts})
    for g in groups:
        sub = [t for t in train if t.group_label == g]
        if len(sub) >= min_group_obs:
            m = fit_subset(sub)
            models[g], fallbacks[g] = m, "group"
        else:
            q = GroupKey.from_label(g).quintile
            if by_quintile.get(q) is not None:
                models[g], fallbacks[g] = by_quintile[q], "quintile"
            else:
                models[g], fallbacks[g] = global_model, "global"
        if models[g].regularization_flag:
            flags[g] = "regularized"

    runner: dict[int, int] = {}
    confidence: dict[int, float] = {}
    second = [t for t in transcripts if t.stage == 2 and t.chosen_firm is not None and len(t.entrants) >= 2]
    for t in second:
        model = models.get(t.group_label, global_model)
        X, mask, _ = _runner_up_design([t], firm_index, n_firms)
        probs = model.probabilities(X, mask)[0]
        order = sorted(t.entrants)
        cand = sorted(
            ((float(probs[a]), fid) for a, fid in enumerate(order) if fid != t.chosen_firm),
            reverse=True,
        )
        runner[t.retiree_id] = cand[0][1]
        confidence[t.retiree_id] = cand[0][0] / max(cand[1][0], 1e-300) if len(cand) > 1 else float("inf")
    return RunnerUpModel(models=models, fallbacks=fallbacks, runner_up=runner, confidence=confidence, flags=flags)


# ---------------------------------------------------------------------------
# Information-processing costs
# ---------------------------------------------------------------------------


@dataclass
class AlphaCellEstimate:
    alpha: float
    coef_rho: float
    n: int
    flagged: bool


def estimate_alpha(
    transcripts,
    crra: CrraParams,
    ridge: float = 1e-8,
    firm_effect_ridge: float = 20.0,
    min_cell: int = 15,
) -> tuple[InfoCostTable, dict]:
    """Information costs from the pension semi-elasticity of posted-offer demand.

    Conditional on accepting a posted offer, the choice among entrants is an
    exact logit whose pension-utility coefficient is 1/alpha, so each
    (channel, quintile) cell is fit on its first-round buyers with firm
    intercepts (heavily ridged; they absorb priors), the pension utility and
    the bequest utility of each entrant's offer on the chosen contract.  The
    derivative identity alpha = sigma(1-sigma)/(d sigma/d rho) is then
    evaluated per firm at the cell-mean choice probabilities and aggregated
    by the median.
    """
    transcripts = sorted(transcripts, key=lambda t: t.retiree_id)  # float sums canonical
    firm_ids = sorted({fid for t in transcripts for fid in t.potential})
    firm_index = {fid: k for k, fid in enumerate(firm_ids)}
    n_firms = len(firm_ids)
    p = n_firms + 2  # firm dummies + rho + b
    ridge_vec = np.full(p, firm_effect_ridge)
    ridge_vec[n_firms:] = ridge

    details: dict[tuple[str, int], AlphaCellEstimate] = {}
    values: dict[tuple[str, int], float] = {}
    for ch in CHANNELS:
        for q in QUINTILES:
            cell = [
                t
                for t in transcripts
                if t.channel == ch and t.quintile == q and t.stage == 1 and len(t.entrants) >= 2
            ]
            if len(cell) < min_cell:
                details[(ch, q)] = AlphaCellEstimate(
                    alpha=float("nan"), coef_rho=float("nan"), n=len(cell), flagged=True
                )
                values[(ch, q)] = float("nan")
                continue
            A = max(len(t.entrants) for t in cell)
            X = np.zeros((len(cell), A, p))
            mask = np.zeros((len(cell), A), dtype=bool)
            choice = np.zeros(len(cell), dtype=int)
            for i, t in enumerate(cell):
                key = t.chosen_contract
                f = _transcript_factors(t, key)
                offers = t.offers[key]
                for a, fid in enumerate(sorted(t.entrants)):
                    X[i, a, firm_index[fid]] = 1.0
                    X[i, a, n_firms] = float(pension_utility(offers[fid], f, crra))
                    X[i, a, n_firms + 1] = float(bequest_utility(offers[fid], f, crra))
                    mask[i, a] = True
                    if fid == t.chosen_firm:
                        choice[i] = a
            model = ConditionalLogit(ridge=ridge_vec).fit(X, mask, choice)
            c_rho = float(model.coef_[n_firms])
            flagged = c_rho <= 0
            if c_rho <= 0:
                alpha = float("nan")
            else:
                # Elasticity identity at the cell-mean choice probabilities.
                probs = model.probabilities(X, mask)
                alphas = []
                for a in range(A):
                    sel = mask[:, a]
                    if sel.sum() == 0:
                        continue
                    sigma = float(probs[sel, a].mean())
                    if 0.0 < sigma < 1.0:
                        alphas.append(info_cost_from_elasticity(sigma, c_rho * sigma * (1.0 - sigma)))
                alpha = float(np.median(alphas)) if alphas else float("nan")
            details[(ch, q)] = AlphaCellEstimate(alpha=alpha, coef_rho=c_rho, n=len(cell), flagged=flagged)
            values[(ch, q)] = alpha

    ok = {k: v for k, v in values.items() if np.isfinite(v) and v > 0}
    fill = float(np.median(list(ok.values()))) if ok else 1.0
    table = InfoCostTable({k: (v if np.isfinite(v) and v > 0 else fill) for k, v in values.items()})
    return table, details


# ---------------------------------------------------------------------------
# Rating tastes from the second-round utility equation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecondRoundObservation:
    """Winner utility pieces and the rating gap to the (predicted) runner-up.

    rho_runner_offer / b_runner_offer evaluate the runner-up's posted
    first-round offer; they proxy the runner-up's attainable utility level
    in the rating-taste regression.
    """

    retiree_id: int
    rho_won: float
    b_won: float
    delta_z: float
    group_label: str
    quintile: int
    n_potential: int
    n_entrants: int
    savings: float
    unc: float
    k_pension: float
    k_bequest: float
    floor_bound: bool
    runner_offer_rho: tuple
    runner_offer_b: tuple


def second_round_observations(
    transcripts, runner_up: dict[int, int], crra: CrraParams | None = None
) -> list[SecondRoundObservation]:
    crra = crra or CrraParams()
    out = []
    for t in sorted(transcripts, key=lambda t: t.retiree_id):
        if t.stage != 2 or t.chosen_firm is None or len(t.entrants) < 2:
            continue
        k_star = runner_up.get(t.retiree_id)
        if k_star is None:
            continue
        f = _transcript_factors(t, t.chosen_contract)
        floor = t.offers[t.chosen_contract][t.chosen_firm]
        # The runner-up's posted offer on every requested contract, as a raw
        # CRRA flow level u(offer): controls for its attainable level.
        prx_rho, prx_b = [], []
        for key in sorted(t.offers):
            fk = _transcript_factors(t, key)
            offer = t.offers[key][k_star]
            prx_rho.append(float(pension_utility(offer, fk, crra)) / fk.k_pension())
            prx_b.append(float(bequest_utility(offer, fk, crra)))
        out.append(
            SecondRoundObservation(
                retiree_id=t.retiree_id,
                rho_won=float(t.rho_final),
                b_won=float(t.b_final),
                delta_z=float(t.ratings[k_star] - t.ratings[t.chosen_firm]),
                group_label=t.group_label,
                quintile=t.quintile,
                n_potential=len(t.potential),
                n_entrants=len(t.entrants),
                savings=t.savings,
                unc=f.unc,
                k_pension=f.k_pension(),
                k_bequest=f.k_bequest(),
                floor_bound=bool(t.final_pension <= floor * (1.0 + 1e-12)),
                runner_offer_rho=tuple(prx_rho),
                runner_offer_b=tuple(prx_b),
            )
        )
    return out


@dataclass
class BetaGroupEstimate:
    group_label: str
    beta_hat: float
    ci_low: float
    ci_high: float
    n: int
    identified: bool
    beta_var_hat: float = float("nan")


def _stable_digest(label: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def _theta_uniforms(seed: int, retiree_ids, n_draws: int) -> np.ndarray:
    """(n_draws, n) uniforms keyed by retiree id.

    Keying on the id rather than the array position makes every estimate
    invariant to the order transcripts are read, and reuses the same draws
    for a retiree wherever it appears (common random numbers).
    """
    out = np.empty((n_draws, len(retiree_ids)))
    for k, rid in enumerate(retiree_ids):
        out[:, k] = np.random.default_rng(np.random.SeedSequence([seed, 17, int(rid)])).random(n_draws)
    return out


def _beta_slopes(dz, u_won, scale, proxies, lam_draws):
    """Gap coefficients from the scale-weighted controlled regression.

    With CRRA flow utility the winner-utility equation divides through by
    K_rho + theta*K_b, leaving the observable flow level u(final pension) on
    the left and beta * dz / (K_rho + theta*K_b) on the right.  The latent
    theta enters only through that reciprocal, so the regressor uses its
    draw average (row-wise over the theta-draw matrix); because the draws
    are independent of the gap, the averaged regressor identifies beta
    without attenuation.  Controls: an intercept and the runner-up's posted
    flow levels per contract, absorbing the attainable-utility channel that
    co-moves with the gap through winner selection.  Returns one slope per
    draw-average block (a single block when lam_draws is the full average).
    """
    n = len(dz)
    lam = lam_draws.mean(axis=0)  # E[1/(K + theta K_b)] per retiree
    X = np.column_stack([dz * lam / scale, np.ones(n)] + [p / scale for p in proxies.T])
    yv = u_won / scale
    coef, *_ = np.linalg.lstsq(X, yv, rcond=None)
    return coef[0]


def estimate_beta_groups(
    observations: list[SecondRoundObservation],
    bequest: dict[int, BequestPrefDist],
    n_draws: int = 10_000,
    bootstrap: int = 200,
    bootstrap_draws: int = 200,
    seed: int = 0,
    min_obs: int = 10,
    confidence: dict[int, float] | None = None,
    min_confidence: float = 2.0,
) -> dict[str, BetaGroupEstimate]:
    """Group rating tastes by averaged no-intercept slopes over theta draws.

    For each draw row the winner utility rho + theta*b is regressed on the
    rating gap within the group (scale-weighted, anchored on the zero-gap
    subsample; see _beta_slopes); slopes are averaged over rows and
    percentile confidence intervals come from a retiree-level bootstrap.
    The theta-draw uniforms are shared across groups (common random
    numbers).  A moment split against the zero-gap subsample provides the
    group beta variance used by counterfactual simulation.
    """
    if confidence is not None:
        # Keep decisively predicted runner-ups only: rating-gap measurement
        # error from misidentified runner-ups biases the slope.
        observations = [o for o in observations if confidence.get(o.retiree_id, 0.0) >= min_confidence]
    groups = sorted({o.group_label for o in observations})

    out: dict[str, BetaGroupEstimate] = {}
    for g in groups:
        obs = sorted(
            (o for o in observations if o.group_label == g), key=lambda o: o.retiree_id
        )
        n = len(obs)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 18, _stable_digest(g)]))
        dz = np.array([o.delta_z for o in obs])
        u_won = np.array([o.rho_won / o.k_pension for o in obs])
        proxies = np.array([o.runner_offer_rho for o in obs])
        kp = np.array([o.k_pension for o in obs])
        kb = np.array([o.k_bequest for o in obs])
        scale = np.array([(o.unc / o.savings) ** 2 / 2.0 for o in obs])
        if n < min_obs or float(np.var(dz)) <= 0:
            out[g] = BetaGroupEstimate(g, float("nan"), float("nan"), float("nan"), n, identified=False)
            continue
        q = obs[0].quintile
        U = _theta_uniforms(seed, [o.retiree_id for o in obs], n_draws)
        theta = bequest[q].sample_from_uniform(U)
        lam = 1.0 / (kp[None, :] + theta * kb[None, :])
        beta_hat = float(_beta_slopes(dz, u_won, scale, proxies, lam))

        boots = np.empty(bootstrap)
        for bi in range(bootstrap):
            idx = rng.integers(0, n, n)
            # Resample retirees and the theta-draw rows jointly so the
            # interval also reflects simulation noise in the draws.
            rows = rng.integers(0, n_draws, bootstrap_draws)
            if float(np.var(dz[idx])) <= 0:
                boots[bi] = np.nan
                continue
            boots[bi] = float(_beta_slopes(dz[idx], u_won[idx], scale[idx], proxies[idx], lam[rows][:, idx]))
        boots = boots[np.isfinite(boots)]
        ci = np.percentile(boots, [2.5, 97.5]) if len(boots) else (np.nan, np.nan)

        # Moment split on flow levels: Var(gap-adjusted ratio) less the
        # zero-gap noise estimates the taste variance.
        var_beta = float("nan")
        nz = dz != 0
        z0 = ~nz
        if nz.sum() >= 5 and z0.sum() >= 5:
            lam_bar = lam.mean(axis=0)
            y_s = u_won / scale
            m0 = float(np.mean(y_s[z0]))
            ratio = (y_s[nz] - m0) * scale[nz] / (dz[nz] * lam_bar[nz])
            noise = float(np.var(y_s[z0])) * float(np.mean((scale[nz] / (dz[nz] * lam_bar[nz])) ** 2))
            var_beta = max(0.0, float(np.var(ratio)) - noise)
        out[g] = BetaGroupEstimate(
            g, beta_hat, float(ci[0]), float(ci[1]), n, identified=True, beta_var_hat=var_beta
        )
    return out


# ---------------------------------------------------------------------------
# Order statistics and the cost law
# ---------------------------------------------------------------------------


def order_stat_invert(G, J: int, tol: float = 1e-10):
    """Parent CDF from the CDF of the second-highest of J iid draws.

    Solves J F^(J-1) - (J-1) F^J = G pointwise by bisection; the map is
    strictly increasing in F on (0, 1) so the solution is unique.
    """
    if J < 2:
        raise ValueError("need J >= 2")
    G = np.asarray(G, dtype=float)
    if np.any(G < -1e-12) or np.any(G > 1.0 + 1e-12):
        raise ValueError("G must be a CDF")
    Gc = 1.0 - G
    upper = G >= 0.5  # compare complements there: phi has a double root at 1
    lo = np.zeros_like(G)
    hi = np.ones_like(G)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        phi = mid ** (J - 1) * (J - (J - 1) * mid)
        psi = (1.0 - mid) ** 2 * _os_tail_poly(mid, J)  # = 1 - phi, stable near 1
        high = np.where(upper, psi < Gc, phi > G)
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
        if float(np.max(hi - lo)) < tol:
            break
    return 0.5 * (lo + hi)


def _os_tail_poly(F, J: int):
    """sum_{k=0}^{J-2} (k+1) F^k, so that 1 - phi(F) = (1-F)^2 * poly."""
    out = np.full_like(np.asarray(F, dtype=float), float(J - 1))
    for k in range(J - 3, -1, -1):
        out = out * F + (k + 1)
    return out


def second_highest_cdf(F, J: int):
    """Forward map: CDF of the second-highest of J draws with parent F."""
    F = np.asarray(F, dtype=float)
    return F ** (J - 1) * (J - (J - 1) * F)


def invert_second_lowest(G, J: int):
    """Parent CDF from the CDF of the second-lowest of J draws.

    The second-lowest of draws X equals minus the second-highest of -X, so
    the inversion reuses the second-highest map on the flipped grid.
    """
    G = np.asarray(G, dtype=float)
    flipped = (1.0 - G)[::-1]
    F_neg = order_stat_invert(flipped, J)
    return (1.0 - F_neg)[::-1]


def cost_dist_from_varpi(varpi, theta, factors: LifeFactors, savings: float, crra: CrraParams):
    """Map utility levels to implied cost ratios r = S / (P_max * unc)."""
    pmax = invert_pension(varpi, theta, factors, crra)
    return savings / (np.asarray(pmax) * factors.unc)


@dataclass
class CostLawEstimate:
    law: CostLaw
    r_star_hat: float
    n_used: int
    n_floor_bound: int
    n_rejected: int
    by_count: dict


def _kernel_cdf(sample, grid, bw):
    z = (grid[:, None] - sample[None, :]) / bw
    # Gaussian kernel CDF via erf
    from scipy.special import erf

    return np.mean(0.5 * (1.0 + erf(z / math.sqrt(2.0))), axis=1)


def estimate_cost_law(
    observations: list[SecondRoundObservation],
    bequest: dict[int, BequestPrefDist],
    quintile: int,
    crra: CrraParams,
    seed: int = 0,
    n_grid: int = 400,
    min_cell: int = 40,
    min_total: int = 12,
) -> CostLawEstimate:
    """Truncated cost-ratio CDF from second-order pension statistics.

    On the subsample where the top two firms share a rating, the bargained
    pension equals the runner-up's break-even pension, so the implied ratio
    r = S/(P * unc) is a draw of the second-lowest participant cost.  Rows
    where the winner's binding first-round floor censored the pension are
    dropped (observable).  Within each participant-count cell the kernel-
    smoothed CDF of these draws is inverted through the order-statistic map;
    cells are combined pointwise with inverse-variance weights, which lets
    the small-J cells pin the upper part of the truncated support.
    """
    rows = sorted(
        (
            o
            for o in observations
            if (quintile is None or o.quintile == quintile) and o.delta_z == 0.0
        ),
        key=lambda o: o.retiree_id,
    )
    n_floor = sum(1 for o in rows if o.floor_bound)
    rows = [o for o in rows if not o.floor_bound]

    r_hat, counts = [], []
    n_rej = 0
    for o in rows:
        u = np.random.default_rng(np.random.SeedSequence([seed, 23, int(o.retiree_id)])).random(1)
        theta = float(bequest[o.quintile].sample_from_uniform(u)[0])
        f = LifeFactors(D_R=o.k_pension, D_R_DP=0.0, G_F=o.k_bequest, S_F=0.0)
        # The stored winner utilities pin varpi = rho + theta*b; unc is kept
        # from the transcript so the mapped ratio is exact.
        varpi = o.rho_won + theta * o.b_won
        if varpi >= 0:
            n_rej += 1
            continue
        pmax = float(invert_pension(varpi, theta, f, crra))
        r_hat.append(o.savings / (pmax * o.unc))
        counts.append(o.n_entrants)
    if len(r_hat) < max(2 * min_total, 24):
        raise ValueError(f"quintile {quintile}: only {len(r_hat)} usable second-round rows")
    r_hat = np.array(r_hat)
    counts = np.array(counts)
    # Small transcript sets get a proportionally lower per-cell threshold.
    min_cell = max(12, min(min_cell, len(r_hat) // 8))

    r_star_hat = float(r_hat.max())
    lo = float(r_hat.min())
    grid = np.linspace(lo - 0.05 * (r_star_hat - lo), r_star_hat, n_grid)

    by_count = {}
    curves, weights = [], []
    for J in sorted(set(counts)):
        sel = counts == J
        nj = int(sel.sum())
        if J < 2 or nj < min_cell:
            continue
        sample = r_hat[sel]
        sd = sample.std()
        iqr = np.subtract(*np.percentile(sample, [75, 25]))
        bw = 0.9 * min(sd, iqr / 1.34 if iqr > 0 else sd) * nj ** (-0.2)
        bw = max(bw, 1e-3)
        G = np.clip(_kernel_cdf(sample, grid, bw), 0.0, 1.0)
        G = np.maximum.accumulate(G)
        W = invert_second_lowest(G, int(J))
        by_count[int(J)] = {"n": nj, "bandwidth": float(bw)}
        curves.append(W)
        weights.append((int(J), nj, G))

    if not curves:
        raise ValueError(f"quintile {quintile}: no participant-count cell is large enough")
    curves = np.vstack(curves)
    mean_curve = curves.mean(axis=0)
    wmat = np.zeros_like(curves)
    for k, (J, nj, G) in enumerate(weights):
        mc = np.clip(mean_curve, 1e-9, 1 - 1e-9)
        phi_prime = J * (J - 1) * mc * (1.0 - mc) ** (J - 2)
        # The smoothed CDF cannot resolve probabilities finer than ~1/n, so
        # the variance is floored there; outside the cell's resolvable range
        # the inverted curve carries no information at all.
        var = np.maximum(G * (1.0 - G), 1.0 / nj) / nj
        wmat[k] = phi_prime**2 / var
        wmat[k][(G < 2.0 / nj) | (G > 1.0 - 2.0 / nj)] = 0.0
    wsum = np.sum(wmat, axis=0)
    fallback = wsum <= 0
    wmat[:, fallback] = 1.0
    W = np.sum(wmat * curves, axis=0) / np.sum(wmat, axis=0)
    W = np.clip(_isotonic(W), 0.0, 1.0)
    W[0] = 0.0
    W[-1] = 1.0
    law = CostLaw(grid, W)
    return CostLawEstimate(
        law=law,
        r_star_hat=r_star_hat,
        n_used=len(r_hat),
        n_floor_bound=n_floor,
        n_rejected=n_rej,
        by_count=by_count,
    )


# ---------------------------------------------------------------------------
# Deconvolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalNoise:
    mean: float
    var: float

    @property
    def degenerate(self) -> bool:
        return self.var <= 0 and self.mean == 0

    def cf(self, s):
        s = np.asarray(s, dtype=float)
        return np.exp(1j * s * self.mean - 0.5 * self.var * s**2)


@dataclass(frozen=True)
class RatingGapNoise:
    """Characteristic function of beta * dz with beta ~ N(mean, var) and dz empirical."""

    beta_mean: float
    beta_var: float
    gaps: tuple

    @property
    def degenerate(self) -> bool:
        return (self.beta_var <= 0 and self.beta_mean == 0) or all(g == 0 for g in self.gaps)

    def cf(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(len(s), dtype=complex)
        gaps = np.asarray(self.gaps, dtype=float)
        for g in gaps:
            out += np.exp(1j * s * self.beta_mean * g - 0.5 * self.beta_var * g**2 * s**2)
        return out / len(gaps)


def deconvolve(
    samples,
    noise,
    grid,
    cf_floor: float = 5e-3,
    taper_start: float = 0.8,
    n_freq: int = 400,
):
    """CDF of the latent component by regularized characteristic-function division.

    The empirical CF of the sums is divided by the noise CF on the band where
    the latter stays above cf_floor (and the empirical CF stays above its own
    sampling noise), tapered smoothly to zero at the band edge, and inverted
    to a density by a cosine-transform quadrature; the density is accumulated
    and projected to a valid CDF.  Degenerate noise short-circuits to the
    empirical CDF of the inputs.
    """
    samples = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if noise.degenerate:
        return np.searchsorted(np.sort(samples), grid, side="right") / len(samples)

    scale = max(samples.std(), 1e-12)
    s_hi = 40.0 / scale
    s_try = np.linspace(1e-6, s_hi, 4000)
    keep = np.abs(noise.cf(s_try)) >= cf_floor
    s_max = float(s_try[keep][-1]) if keep.any() else float(s_try[0])

    # The empirical CF of the sums carries ~n^(-1/2) sampling noise; past the
    # point where the signal drops to a few times that level, dividing by the
    # noise CF only amplifies junk, so the band is cut there as well.
    cf_noise_floor = 4.0 / math.sqrt(len(samples))
    probe = np.linspace(1e-6, s_max, 400)
    phi_probe = np.abs(np.exp(1j * np.outer(probe, samples[: min(len(samples), 20_000)])).mean(axis=1))
    drowned = np.flatnonzero(phi_probe < cf_noise_floor)
    if len(drowned) > 0:
        s_max = float(probe[max(int(drowned[0]) - 1, 1)])
    s = np.linspace(1e-6, s_max, n_freq)

    phi_sum = np.exp(1j * np.outer(s, samples)).mean(axis=1)
    phi_x = phi_sum / noise.cf(s)
    w = np.ones_like(s)
    edge = s > taper_start * s_max
    w[edge] = 0.5 * (1.0 + np.cos(math.pi * (s[edge] - taper_start * s_max) / ((1.0 - taper_start) * s_max)))

    ds = s[1] - s[0]
    # f(x) = (1/pi) * Int Re[phi_x(s) e^{-isx}] w(s) ds
    density = (np.real(np.exp(-1j * np.outer(grid, s)) * (phi_x * w)[None, :]).sum(axis=1)) * ds / math.pi
    density = np.clip(density, 0.0, None)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
    if cdf[-1] > 0:
        cdf = cdf / cdf[-1]
    return np.clip(np.maximum.accumulate(cdf), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Firm symmetry diagnostic
# ---------------------------------------------------------------------------


@dataclass
class SymmetryResult:
    firm_ids: list
    residuals: dict
    ks_stat: np.ndarray
    ks_pvalue: np.ndarray
    density_grid: np.ndarray
    densities: dict


def symmetry_diagnostic(transcripts, min_offers: int = 50) -> SymmetryResult:
    """Per-firm residualization of posted pension rates on retiree observables.

    Pension rates P/S are regressed (per firm, least squares) on the
    retiree's unitary cost, demographics, contract guarantee length and the
    number of potential bidders; symmetric cost draws leave the residual
    distributions indistinguishable across firms, summarized by pairwise
    Kolmogorov-Smirnov statistics.
    """
    rows_by_firm: dict[int, list] = {}
    for t in transcripts:
        if t.stage not in (1, 2):
            continue
        for key, offers in t.offers.items():
            f = t.factors[key]
            for fid, price in offers.items():
                x = [
                    1.0,
                    f["unc"],
                    t.age_months,
                    1.0 if t.gender == "female" else 0.0,
                    1.0 if t.married else 0.0,
                    (t.spouse_age_months or 0.0),
                    f["guarantee"],
                    float(len(t.potential)),
                ]
                rows_by_firm.setdefault(fid, []).append((price / t.savings, x))

    firm_ids = sorted(fid for fid, rows in rows_by_firm.items() if len(rows) >= min_offers)
    if len(firm_ids) < 2:
        raise ValueError("need at least two firms with enough offers")
    residuals = {}
    for fid in firm_ids:
        y = np.array([r[0] for r in rows_by_firm[fid]])
        X = np.array([r[1] for r in rows_by_firm[fid]])
        # Constant regressors (single-sex samples, one contract type, ...)
        # fold into the intercept; genuine collinearity among the varying
        # ones is a data error.
        keep = [0] + [k for k in range(1, X.shape[1]) if X[:, k].std() > 0]
        X = X[:, keep]
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise ValueError(f"rank-deficient design for firm {fid}")
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        residuals[fid] = y - X @ coef

    n = len(firm_ids)
    ks = np.zeros((n, n))
    pv = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            stat, p = ks_2samp(residuals[firm_ids[i]], residuals[firm_ids[j]])
            ks[i, j] = ks[j, i] = stat
            pv[i, j] = pv[j, i] = p

    lo = min(res.min() for res in residuals.values())
    hi = max(res.max() for res in residuals.values())
    density_grid = np.linspace(lo, hi, 200)
    densities = {fid: gaussian_kde(res)(density_grid) for fid, res in residuals.items()}
    return SymmetryResult(
        firm_ids=firm_ids,
        residuals=residuals,
        ks_stat=ks,
        ks_pvalue=pv,
        density_grid=density_grid,
        densities=densities,
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass
class EstimationResult:
    bequest: dict[int, BequestPrefDist]
    bequest_diagnostics: dict
    runner_up: RunnerUpModel
    beta_groups: dict[str, BetaGroupEstimate]
    info_costs: InfoCostTable
    alpha_details: dict
    cost_laws: dict[int, CostLawEstimate]

    def beta_risk_groups(self):
        """Estimated groups in the sampler format used by counterfactuals."""
        from .preferences import RiskPrefGroup

        out = {}
        for g, est in self.beta_groups.items():
            mean = est.beta_hat if est.identified and np.isfinite(est.beta_hat) else 0.0
            var = est.beta_var_hat if np.isfinite(est.beta_var_hat) else 0.0
            out[g] = RiskPrefGroup(key=GroupKey.from_label(g), beta_mean=mean, beta_var=var)
        return out

    def to_json(self) -> str:
        payload = {
            "bequest": {q: json.loads(d.to_json()) for q, d in self.bequest.items()},
            "beta_groups": {
                g: {
                    "beta_hat": e.beta_hat,
                    "ci_low": e.ci_low,
                    "ci_high": e.ci_high,
                    "n": e.n,
                    "identified": e.identified,
                    "beta_var_hat": e.beta_var_hat,
                }
                for g, e in sorted(self.beta_groups.items())
            },
            "info_costs": {f"{ch}|{q}": a for (ch, q), a in self.info_costs.items()},
            "cost_laws": {
                q: {
                    "grid": est.law.grid.tolist(),
                    "cdf": est.law.cdf.tolist(),
                    "r_star_hat": est.r_star_hat,
                    "n_used": est.n_used,
                }
                for q, est in sorted(self.cost_laws.items())
            },
        }
        return json.dumps(payload, sort_keys=True)


def estimate_all(
    transcripts,
    crra: CrraParams,
    n_draws: int = 10_000,
    bootstrap: int = 200,
    seed: int = 0,
) -> EstimationResult:
    """Full demand-and-cost estimation pipeline on a transcript set."""
    grad_obs = gradient_observations(transcripts, crra)
    bequest, diags = {}, {}
    pooled = pooled_diag = None
    for q in QUINTILES:
        try:
            bequest[q], diags[q] = estimate_bequest_dist(grad_obs, q)
        except ValueError:
            # Thin quintile (small transcript sets): fall back to the pooled fit.
            if pooled is None:
                pooled, pooled_diag = estimate_bequest_dist(grad_obs, None)
            bequest[q] = BequestPrefDist(q, pooled.zeta, pooled.theta_grid, pooled.theta_cdf)
            diags[q] = pooled_diag

    runner = runner_up_logit(transcripts)
    obs = second_round_observations(transcripts, runner.runner_up, crra)
    beta_groups = estimate_beta_groups(
        obs, bequest, n_draws=n_draws, bootstrap=bootstrap, seed=seed, confidence=runner.confidence
    )
    info_costs, alpha_details = estimate_alpha(transcripts, crra)
    cost_laws = {}
    pooled_law = None
    for q in QUINTILES:
        try:
            cost_laws[q] = estimate_cost_law(obs, bequest, q, crra, seed=seed)
        except ValueError:
            # Thin quintile: pool every quintile's observations instead.
            if pooled_law is None:
                pooled_law = estimate_cost_law(obs, bequest, None, crra, seed=seed)
            cost_laws[q] = pooled_law

    return EstimationResult(
        bequest=bequest,
        bequest_diagnostics=diags,
        runner_up=runner,
        beta_groups=beta_groups,
        info_costs=info_costs,
        alpha_details=alpha_details,
        cost_laws=cost_laws,
    )
