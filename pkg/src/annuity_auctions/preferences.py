"""Demand-side heterogeneity and the rational-inattention choice rule.

Three preference primitives drive demand: a bequest weight theta with a mass
point at zero, a normally distributed taste beta for firm risk ratings, and
an information-processing cost alpha per unit of information.  Retirees pick
contracts by comparing rho + theta * b across the menu; they pick a firm (or
the option of bargaining) with logit-with-priors probabilities in which
utilities are scaled by 1/alpha.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "CHANNELS",
    "AGE_BINS",
    "GENDERS",
    "QUINTILES",
    "GroupKey",
    "BequestPrefDist",
    "RiskPrefGroup",
    "InfoCostTable",
    "ri_choice_probs",
    "info_cost_from_elasticity",
    "contract_choice",
    "sample_preferences",
]

CHANNELS = ("afp", "sales_agent", "advisor")
AGE_BINS = ("before_nra", "at_nra", "after_nra")
GENDERS = ("male", "female")
QUINTILES = (1, 2, 3, 4, 5)

THETA_BAR_DEFAULT = 20.0
THETA_GRID_SIZE = 2000


@dataclass(frozen=True)
class GroupKey:
    """Cell of the 2 x 3 x 5 x 3 = 90 preference groups."""

    gender: str
    age_bin: str
    quintile: int
    channel: str

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"unknown gender {self.gender!r}")
        if self.age_bin not in AGE_BINS:
            raise ValueError(f"unknown age bin {self.age_bin!r}")
        if self.quintile not in QUINTILES:
            raise ValueError(f"quintile must be 1..5, got {self.quintile}")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")

    @property
    def label(self) -> str:
        return f"{self.gender}|{self.age_bin}|q{self.quintile}|{self.channel}"

    @classmethod
    def from_label(cls, label: str) -> "GroupKey":
        gender, age_bin, q, channel = label.split("|")
        return cls(gender=gender, age_bin=age_bin, quintile=int(q[1:]), channel=channel)

    @classmethod
    def all_groups(cls) -> list["GroupKey"]:
        return [
            cls(g, a, q, c)
            for g in GENDERS
            for a in AGE_BINS
            for q in QUINTILES
            for c in CHANNELS
        ]


class BequestPrefDist:
    """Mass point at zero plus a gridded continuous CDF on (0, theta_bar].

    theta_cdf holds the continuous part F~ evaluated at theta_grid; it must
    be monotone and reach 1 at the last grid point.  The full CDF is
    F(t) = zeta + (1 - zeta) * F~(t).
    """

    def __init__(self, quintile: int, zeta: float, theta_grid: np.ndarray, theta_cdf: np.ndarray):
        if not 0.0 <= zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        grid = np.asarray(theta_grid, dtype=float)
        cdf = np.asarray(theta_cdf, dtype=float)
        if grid.ndim != 1 or grid.shape != cdf.shape or len(grid) < 2:
            raise ValueError("grid and cdf must be matching 1-d arrays")
        if grid[0] <= 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing and positive")
        if np.any(np.diff(cdf) < -1e-12) or cdf[0] < -1e-12 or abs(cdf[-1] - 1.0) > 1e-9:
            raise ValueError("cdf must be monotone in [0, 1] and reach 1 at theta_bar")
        self.quintile = int(quintile)
        self.zeta = float(zeta)
        self.theta_grid = grid
        self.theta_cdf = np.clip(np.maximum.accumulate(cdf), 0.0, 1.0)

    @property
    def theta_bar(self) -> float:
        return float(self.theta_grid[-1])

    def cdf(self, t):
        """Full CDF including the mass point at zero."""
        t = np.asarray(t, dtype=float)
        cont = np.interp(t, self.theta_grid, self.theta_cdf, left=0.0, right=1.0)
        out = np.where(t < 0, 0.0, self.zeta + (1.0 - self.zeta) * cont)
        return float(out) if out.ndim == 0 else out

    def quantile_continuous(self, v):
        """Inverse of the continuous part by bisection on the grid."""
        v = np.asarray(v, dtype=float)
        shape = v.shape
        v = np.atleast_1d(v).ravel()
        idx = np.searchsorted(self.theta_cdf, v, side="left")
        idx = np.clip(idx, 1, len(self.theta_grid) - 1)
        c0 = self.theta_cdf[idx - 1]
        c1 = self.theta_cdf[idx]
        w = np.where(c1 > c0, (v - c0) / np.where(c1 > c0, c1 - c0, 1.0), 1.0)
        out = self.theta_grid[idx - 1] + w * (self.theta_grid[idx] - self.theta_grid[idx - 1])
        return np.clip(out, self.theta_grid[0], self.theta_bar).reshape(shape)

    def sample_from_uniform(self, u) -> np.ndarray:
        """Map uniforms through the mass point and the continuous inverse."""
        u = np.asarray(u, dtype=float)
        theta = np.zeros_like(u)
        cont = u >= self.zeta
        if cont.any():
            v = (u[cont] - self.zeta) / max(1.0 - self.zeta, 1e-12)
            theta[cont] = self.quantile_continuous(v)
        return theta

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.sample_from_uniform(rng.random(n))

    def mean(self) -> float:
        """E[theta] by trapezoid on the survival function."""
        surv = 1.0 - (self.zeta + (1.0 - self.zeta) * self.theta_cdf)
        inner = float(np.trapezoid(surv, self.theta_grid))
        lead = (1.0 - self.zeta) * self.theta_grid[0]  # mass below the first grid point
        return inner + lead

    def to_json(self) -> str:
        return json.dumps(
            {
                "quintile": self.quintile,
                "zeta": self.zeta,
                "theta_grid": self.theta_grid.tolist(),
                "theta_cdf": self.theta_cdf.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BequestPrefDist":
        d = json.loads(text)
        return cls(d["quintile"], d["zeta"], np.asarray(d["theta_grid"]), np.asarray(d["theta_cdf"]))


@dataclass(frozen=True)
class RiskPrefGroup:
    """Normal law for the risk-rating taste within one group cell."""

    key: GroupKey
    beta_mean: float
    beta_var: float

    def __post_init__(self):
        if self.beta_var < 0:
            raise ValueError("beta variance must be non-negative")

    def to_dict(self) -> dict:
        return {"group_key": self.key.label, "beta_mean": self.beta_mean, "beta_var": self.beta_var}

    @classmethod
    def from_dict(cls, d: dict) -> "RiskPrefGroup":
        return cls(GroupKey.from_label(d["group_key"]), d["beta_mean"], d["beta_var"])


class InfoCostTable:
    """Information-processing cost per (channel, savings quintile) cell."""

    def __init__(self, values: dict[tuple[str, int], float]):
        for (ch, q), a in values.items():
            if ch not in CHANNELS or q not in QUINTILES:
                raise ValueError(f"unknown cell ({ch}, {q})")
            if a <= 0:
                raise ValueError("alpha must be positive")
        self._values = dict(values)

    def alpha(self, channel: str, quintile: int) -> float:
        return self._values[(channel, quintile)]

    def items(self):
        return sorted(self._values.items())

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "quintile", "alpha"])
            for (ch, q), a in self.items():
                w.writerow([ch, q, f"{a:.8g}"])

    @classmethod
    def from_csv(cls, path) -> "InfoCostTable":
        import csv

        values = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                values[(row["channel"], int(row["quintile"]))] = float(row["alpha"])
        return cls(values)


# ---------------------------------------------------------------------------
# Choice rules
# ---------------------------------------------------------------------------


def ri_choice_probs(
    utilities: Sequence[float],
    eu_bargain: float,
    priors: Sequence[float],
    alpha: float,
) -> np.ndarray:
    """Rational-inattention choice probabilities over J firms plus bargaining.

    Option j <= J gets weight exp(log prior_j + U_j / alpha); the bargaining
    option enters with implicit prior weight one and utility eu_bargain.
    Priors equal to zero exclude the option.  Computed with max subtraction;
    output sums to one and is invariant to common utility shifts.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    U = np.asarray(utilities, dtype=float)
    p0 = np.asarray(priors, dtype=float)
    if U.shape != p0.shape:
        raise ValueError("utilities and priors must have equal length")
    if np.any(p0 < 0) or p0.sum() > 1.0 + 1e-9:
        raise ValueError("priors must be non-negative and sum to at most 1")

    with np.errstate(divide="ignore"):
        logits = np.append(np.log(p0) + U / alpha, eu_bargain / alpha)
    m = np.max(logits[np.isfinite(logits)])
    w = np.exp(logits - m)
    return w / w.sum()


def info_cost_from_elasticity(sigma_j: float, dsigma_drho: float) -> float:
    """Invert the demand semi-elasticity: alpha = sigma(1-sigma)/(dsigma/drho)."""
    if not 0.0 < sigma_j < 1.0:
        raise ValueError("choice probability must lie strictly in (0, 1)")
    if dsigma_drho <= 0:
        raise ValueError("demand must rise in pension utility")
    return sigma_j * (1.0 - sigma_j) / dsigma_drho


def contract_choice(theta: float, menu: Sequence[tuple[float, float]]) -> int:
    """Index of the contract maximizing rho_a + theta * b_a.

    Exact ties go to the entry with the smaller bequest utility, then the
    smaller index; with two contracts this reproduces the threshold rule on
    the price gradient.
    """
    if len(menu) == 0:
        raise ValueError("menu must be non-empty")
    rho = np.array([m[0] for m in menu])
    b = np.array([m[1] for m in menu])
    util = rho + theta * b
    best = util.max()
    tied = np.flatnonzero(util == best)
    if len(tied) == 1:
        return int(tied[0])
    order = sorted(tied, key=lambda i: (b[i], i))
    return int(order[0])


def sample_preferences(
    dist: BequestPrefDist, group: RiskPrefGroup, rng: np.random.Generator
) -> tuple[float, float]:
    """One (theta, beta) draw; deterministic under a fixed generator state."""
    theta = float(dist.sample(rng, 1)[0])
    beta = float(rng.normal(group.beta_mean, np.sqrt(group.beta_var)))
    return theta, beta
