"""Discounted life factors and annuity utility objects.

A contract's value to a retiree splits into money-side and utility-side
objects built from four discounted integrals of the mortality law:

    D_R    discounted months alive after the deferral period
    D_R_DP discounted months alive during the deferral period
    G_F    discounted death-probability mass inside the guarantee window
           (beneficiaries receive the full pension there)
    S_F    discounted months after the guarantee with the retiree dead and
           the spouse alive (spouse receives 60% of the pension)

The per-dollar annuitization cost is unc = D_R + G_F + 0.6 * S_F; deferral
payments are funded by the pension manager, not the insurer, so D_R_DP is
excluded.  With CRRA utility u(c) = c^(1-gamma)/(1-gamma) at gamma = 3 the
expected present discounted utilities are

    rho(P) = u(P) * (D_R + D_R_DP / m^2)        m = temporary payment multiple
    b(P)   = u(P) * (G_F + S_F / 0.36)

and pension recovery from a utility level w < 0 is P = sqrt(K / (-2 w)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad

from .lifetables import CovariateVector, GompertzModel, log_survival, survival_horizon

__all__ = [
    "ContractSpec",
    "CrraParams",
    "LifeFactors",
    "life_factors",
    "life_factors_batch",
    "pension_utility",
    "bequest_utility",
    "invert_pension",
    "money_worth",
    "factors_csv_row",
    "FACTORS_CSV_HEADER",
]

SURVIVOR_FRACTION = 0.6  # legal survivor benefit share of the original pension
TAIL_EPS = 1e-12         # survival level at which improper integrals are truncated
QUAD_ABS_TOL = 1e-10


@dataclass(frozen=True)
class ContractSpec:
    """Annuity contract terms: deferral and guarantee in months."""

    deferral: float = 0.0
    guarantee: float = 0.0
    spouse_covered: bool = False
    temporary_payment_multiple: float = 2.0

    def __post_init__(self):
        if self.deferral < 0 or self.guarantee < 0:
            raise ValueError("deferral and guarantee must be non-negative")
        if not (math.isfinite(self.deferral) and math.isfinite(self.guarantee)):
            raise ValueError("contract terms must be finite")
        if self.temporary_payment_multiple <= 0:
            raise ValueError("temporary payment multiple must be positive")


@dataclass(frozen=True)
class CrraParams:
    """CRRA curvature and continuous monthly discount rate.

    delta = ln(1 + annual_return) / 12.  gamma must exceed 1 (utility is
    negative and increasing); the closed-form pension inversion additionally
    requires gamma = 3.
    """

    gamma: float = 3.0
    delta: float = math.log(1.03) / 12.0

    def __post_init__(self):
        if self.gamma <= 1:
            raise ValueError("gamma must be > 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @classmethod
    def from_annual_return(cls, annual_return: float, gamma: float = 3.0) -> "CrraParams":
        return cls(gamma=gamma, delta=math.log(1.0 + annual_return) / 12.0)

    def u(self, c):
        """Flow utility of consumption c (pension dollars per month)."""
        return np.asarray(c) ** (1.0 - self.gamma) / (1.0 - self.gamma)


@dataclass(frozen=True)
class LifeFactors:
    """Discounted expected-duration integrals for one retiree-contract pair."""

    D_R: float
    D_R_DP: float
    G_F: float
    S_F: float
    dp_multiple: float = 2.0

    def __post_init__(self):
        for name in ("D_R", "D_R_DP", "G_F", "S_F"):
            if getattr(self, name) < -1e-12:
                raise ValueError(f"{name} must be non-negative")

    @property
    def unc(self) -> float:
        """Unitary necessary capital per dollar of monthly pension."""
        return self.D_R + self.G_F + SURVIVOR_FRACTION * self.S_F

    def k_pension(self, gamma: float = 3.0) -> float:
        """Factor multiplying u(P) in rho(P)."""
        return self.D_R + self.D_R_DP * self.dp_multiple ** (1.0 - gamma)

    def k_bequest(self, gamma: float = 3.0) -> float:
        """Factor multiplying u(P) in b(P)."""
        return self.G_F + self.S_F * SURVIVOR_FRACTION ** (1.0 - gamma)


def life_factors(
    model: GompertzModel,
    retiree: CovariateVector,
    spouse: CovariateVector | None,
    contract: ContractSpec,
    crra: CrraParams,
) -> LifeFactors:
    """Adaptive-quadrature life factors for one retiree and contract.

    The spouse argument must be present exactly when the contract covers a
    spouse.  Improper integrals are truncated where conditional survival
    falls below TAIL_EPS (found in closed form from the Gompertz tail) and
    evaluated with scipy's adaptive Gauss-Kronrod rule at absolute tolerance
    QUAD_ABS_TOL.
    """
    if contract.spouse_covered and spouse is None:
        raise ValueError("contract covers a spouse but none was given")
    if not contract.spouse_covered and spouse is not None:
        raise ValueError("spouse given but contract does not cover one")

    t0 = retiree.age_at_retirement
    d = contract.deferral
    gp = contract.guarantee
    delta = crra.delta
    g = model.g
    lam = model.lam(retiree)

    t_tail = survival_horizon(model, retiree, t0, TAIL_EPS)

    def surv(t):
        return np.exp(log_survival(g, lam, t, t0))

    def disc(t):
        return np.exp(-delta * (t - t0))

    def _quad(f, a, b):
        if b <= a:
            return 0.0
        val, err = quad(f, a, b, epsabs=QUAD_ABS_TOL, epsrel=1e-12, limit=400)
        if not np.isfinite(val) or err > max(1e-6, 1e-4 * abs(val)):
            raise ArithmeticError(f"quadrature did not converge (estimate {val}, error {err})")
        return val

    d_r = _quad(lambda t: surv(t) * disc(t), t0 + d, max(t0 + d, t_tail))
    d_r_dp = _quad(lambda t: surv(t) * disc(t), t0, t0 + d)
    g_f = _quad(lambda t: (1.0 - surv(t)) * disc(t), t0 + d, t0 + d + gp)

    s_f = 0.0
    if contract.spouse_covered:
        assert spouse is not None
        gap = t0 - spouse.age_at_retirement  # positive when the spouse is younger
        lam_sp = model.lam(spouse)
        sp_t0 = spouse.age_at_retirement
        sp_tail = survival_horizon(model, spouse, sp_t0, TAIL_EPS) + gap

        def sp_surv(t):
            return np.exp(log_survival(g, lam_sp, t - gap, sp_t0))

        s_f = _quad(
            lambda t: (1.0 - surv(t)) * sp_surv(t) * disc(t),
            t0 + d + gp,
            max(t0 + d + gp, sp_tail),
        )

    return LifeFactors(
        D_R=d_r, D_R_DP=d_r_dp, G_F=g_f, S_F=s_f, dp_multiple=contract.temporary_payment_multiple
    )


# ---------------------------------------------------------------------------
# Vectorized batch evaluation
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_PANEL_MONTHS = 90.0


def _panel_nodes(a: np.ndarray, b: np.ndarray, n_panels: int):
    """Composite Gauss-Legendre nodes/weights on per-row intervals [a, b]."""
    edges = np.linspace(0.0, 1.0, n_panels + 1)
    lo = a[:, None] + (b - a)[:, None] * edges[:-1][None, :]
    hi = a[:, None] + (b - a)[:, None] * edges[1:][None, :]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    t = mid[:, :, None] + half[:, :, None] * _GL_NODES[None, None, :]
    w = half[:, :, None] * _GL_WEIGHTS[None, None, :]
    return t.reshape(len(a), -1), w.reshape(len(a), -1)


def life_factors_batch(
    model: GompertzModel,
    retirees: list[CovariateVector],
    spouses: list[CovariateVector | None],
    contract: ContractSpec,
    crra: CrraParams,
) -> list[LifeFactors]:
    """Composite fixed-order quadrature over a population.

    Numerically equivalent to life_factors (agreement is enforced by tests at
    the adaptive rule's tolerance) but evaluates all retirees at once, which
    is what the pipeline uses at population scale.
    """
    n = len(retirees)
    if n == 0:
        return []
    d = contract.deferral
    gp = contract.guarantee
    delta = crra.delta
    g = model.g

    X = np.vstack([r.design_row() for r in retirees])
    lam = np.exp(X @ model.tau)
    t0 = np.array([r.age_at_retirement for r in retirees])
    tail = np.log(np.exp(g * t0) + g * (-math.log(TAIL_EPS)) / lam) / g

    def chunk(a, b, f):
        width = float(np.max(np.maximum(b - a, 0.0)))
        if width <= 0:
            return np.zeros(n)
        n_panels = max(2, int(math.ceil(width / _PANEL_MONTHS)))
        t, w = _panel_nodes(a, np.maximum(b, a), n_panels)
        return np.sum(f(t) * w, axis=1)

    surv = lambda t: np.exp(log_survival(g, lam[:, None], t, t0[:, None]))
    disc = lambda t: np.exp(-delta * (t - t0[:, None]))

    d_r = chunk(t0 + d, tail, lambda t: surv(t) * disc(t))
    d_r_dp = chunk(t0, t0 + d, lambda t: surv(t) * disc(t))
    g_f = chunk(t0 + d, t0 + d + gp, lambda t: (1.0 - surv(t)) * disc(t))

    s_f = np.zeros(n)
    covered = [i for i, s in enumerate(spouses) if contract.spouse_covered and s is not None]
    if contract.spouse_covered and covered:
        idx = np.array(covered)
        Xs = np.vstack([spouses[i].design_row() for i in covered])
        lam_sp = np.exp(Xs @ model.tau)
        sp_t0 = np.array([spouses[i].age_at_retirement for i in covered])
        gap = t0[idx] - sp_t0
        sp_tail = np.log(np.exp(g * sp_t0) + g * (-math.log(TAIL_EPS)) / lam_sp) / g + gap

        a = t0[idx] + d + gp
        b = np.maximum(sp_tail, a)
        width = float(np.max(b - a))
        if width > 0:
            n_panels = max(2, int(math.ceil(width / _PANEL_MONTHS)))
            t, w = _panel_nodes(a, b, n_panels)
            dead = 1.0 - np.exp(log_survival(g, lam[idx][:, None], t, t0[idx][:, None]))
            sp_alive = np.exp(log_survival(g, lam_sp[:, None], t - gap[:, None], sp_t0[:, None]))
            s_f[idx] = np.sum(dead * sp_alive * np.exp(-delta * (t - t0[idx][:, None])) * w, axis=1)

    return [
        LifeFactors(
            D_R=float(d_r[i]),
            D_R_DP=float(d_r_dp[i]),
            G_F=float(g_f[i]),
            S_F=float(max(s_f[i], 0.0)),
            dp_multiple=contract.temporary_payment_multiple,
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Utility objects
# ---------------------------------------------------------------------------


def pension_utility(P, f: LifeFactors, crra: CrraParams):
    """Expected present discounted utility rho(P) from the pension stream."""
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        raise ValueError("pension must be positive")
    val = crra.u(P) * f.D_R + crra.u(f.dp_multiple * P) * f.D_R_DP
    return float(val) if val.ndim == 0 else val


def bequest_utility(P, f: LifeFactors, crra: CrraParams):
    """Expected present discounted utility b(P) from survivor benefits."""
    P = np.asarray(P, dtype=float)
    if np.any(P <= 0):
        raise ValueError("pension must be positive")
    val = crra.u(P) * f.G_F + crra.u(SURVIVOR_FRACTION * P) * f.S_F
    return float(val) if val.ndim == 0 else val


def invert_pension(varpi, theta, f: LifeFactors, crra: CrraParams | None = None):
    """Pension P solving rho(P) + theta * b(P) = varpi, for gamma = 3.

    With u quadratic-inverse the utility level is -(K_rho + theta*K_b)/(2P^2),
    so P = sqrt(K / (-2*varpi)); requires varpi < 0 and theta >= 0.
    """
    crra = crra or CrraParams()
    if abs(crra.gamma - 3.0) > 1e-12:
        raise ValueError("closed-form pension inversion requires gamma = 3")
    varpi = np.asarray(varpi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(varpi >= 0):
        raise ValueError("utility level must be negative under gamma = 3")
    if np.any(theta < 0):
        raise ValueError("bequest weight must be non-negative")
    K = f.k_pension(crra.gamma) + theta * f.k_bequest(crra.gamma)
    if np.any(K <= 0):
        raise ValueError("factor combination must be positive")
    val = np.sqrt(K / (-2.0 * varpi))
    return float(val) if val.ndim == 0 else val


def money_worth(P, f: LifeFactors, savings: float):
    """Money's worth ratio: discounted expected payments per annuitized dollar."""
    if savings <= 0:
        raise ValueError("savings must be positive")
    val = np.asarray(P, dtype=float) * f.unc / savings
    return float(val) if val.ndim == 0 else val


FACTORS_CSV_HEADER = ["retiree_id", "d", "g", "D_R", "D_R_DP", "G_F", "S_F", "unc_i"]


def factors_csv_row(retiree_id, contract: ContractSpec, f: LifeFactors) -> list:
    return [
        retiree_id,
        f"{contract.deferral:.1f}",
        f"{contract.guarantee:.1f}",
        f"{f.D_R:.10f}",
        f"{f.D_R_DP:.10f}",
        f"{f.G_F:.10f}",
        f"{f.S_F:.10f}",
        f"{f.unc:.10f}",
    ]


def with_factors(f: LifeFactors, **kw) -> LifeFactors:
    return replace(f, **kw)
