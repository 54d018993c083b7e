"""Gompertz proportional-hazard mortality model.

All survival probabilities and expected-longevity predictions in the package
come from this module.  Time is measured in months of age throughout; the
hazard at age t (months) for a person with covariates x is

    h(t | x) = lam(x) * exp(g * t),      lam(x) = exp(x' tau),

so the probability of surviving to t conditional on being alive at t0 is

    S(t | t0, x) = exp(-(lam/g) * (exp(g*t) - exp(g*t0))).

Fitting maximizes the right-censored log-likelihood by damped Newton with
analytic gradient and Hessian; covariates are standardized internally and the
coefficients and covariance are reported on the original scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize

__all__ = [
    "CovariateVector",
    "GompertzModel",
    "MortalityRecord",
    "FitError",
    "conditional_survival",
    "fit_gompertz",
    "median_expected_life",
    "survival_horizon",
    "read_mortality_csv",
    "write_mortality_csv",
]

# Design-matrix layout shared by the whole package.  The intercept comes
# first; the remaining entries align one-to-one with CovariateVector fields.
DESIGN_COLUMNS = ("intercept", "age_at_retirement", "female", "married", "savings", "birth_cohort")


class FitError(RuntimeError):
    """Raised when the mortality likelihood cannot be maximized."""


@dataclass(frozen=True)
class CovariateVector:
    """Demographics entering the proportional-hazard index.

    age_at_retirement is in months, savings in currency units,
    birth_cohort a calendar year.  gender is "male" or "female".
    """

    age_at_retirement: float
    gender: str
    married: bool
    savings: float
    birth_cohort: float

    def __post_init__(self):
        if self.age_at_retirement <= 0:
            raise ValueError("age_at_retirement must be positive")
        if self.savings < 0:
            raise ValueError("savings must be non-negative")
        if self.gender not in ("male", "female"):
            raise ValueError(f"gender must be 'male' or 'female', got {self.gender!r}")

    def design_row(self) -> np.ndarray:
        return np.array(
            [
                1.0,
                self.age_at_retirement,
                1.0 if self.gender == "female" else 0.0,
                1.0 if self.married else 0.0,
                self.savings,
                self.birth_cohort,
            ]
        )


@dataclass(frozen=True)
class MortalityRecord:
    """One right-censored survival observation (ages in months)."""

    covariates: CovariateVector
    entry_age: float
    exit_age: float
    died: bool

    def __post_init__(self):
        if self.exit_age < self.entry_age:
            raise ValueError("exit_age must be >= entry_age")


@dataclass(frozen=True)
class GompertzModel:
    """Fitted (or configured) Gompertz proportional-hazard law.

    g is the per-month shape, tau the coefficient vector aligned with
    DESIGN_COLUMNS.  cov is the (1+p)x(1+p) covariance of (g, tau) from the
    observed information; it is zero for configured models.
    """

    g: float
    tau: np.ndarray
    cov: np.ndarray | None = None
    loglik: float | None = None

    def __post_init__(self):
        if self.g <= 0:
            raise ValueError("shape g must be positive")
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float))

    def lam(self, x: CovariateVector) -> float:
        return float(np.exp(self.tau @ x.design_row()))

    def standard_errors(self) -> np.ndarray:
        if self.cov is None:
            raise ValueError("model has no covariance (not fitted)")
        return np.sqrt(np.diag(self.cov))

    def to_json(self) -> str:
        payload = {
            "g": self.g,
            "tau": self.tau.tolist(),
            "cov": (self.cov.tolist() if self.cov is not None else None),
            "loglik": self.loglik,
            "design_columns": list(DESIGN_COLUMNS),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GompertzModel":
        d = json.loads(text)
        cov = np.asarray(d["cov"]) if d.get("cov") is not None else None
        return cls(g=d["g"], tau=np.asarray(d["tau"]), cov=cov, loglik=d.get("loglik"))


def conditional_survival(model: GompertzModel, x: CovariateVector, t: float, t0: float) -> float:
    """P(alive at t | alive at t0) for ages in months.

    Equals 1 at t == t0 and decreases to 0 as t grows; domain error if
    t < t0, t0 < 0 or the model shape is invalid.
    """
    if model.g <= 0:
        raise ValueError("model shape must be positive")
    if t0 < 0 or t < t0:
        raise ValueError(f"need t >= t0 >= 0, got t={t}, t0={t0}")
    lam = model.lam(x)
    return float(np.exp(-(lam / model.g) * (np.exp(model.g * t) - np.exp(model.g * t0))))


def log_survival(g: float, lam: float | np.ndarray, t: float | np.ndarray, t0: float | np.ndarray):
    """Vectorized log S(t | t0); no validation, internal fast path."""
    return -(lam / g) * (np.exp(g * t) - np.exp(g * t0))


def survival_horizon(model: GompertzModel, x: CovariateVector, t0: float, eps: float = 1e-12) -> float:
    """Age t at which conditional survival first drops to eps.

    The defining equation exp(-(lam/g)(e^{gt} - e^{gt0})) = eps is solved in
    closed form; the doubly exponential tail makes this the natural
    truncation point for the improper valuation integrals.
    """
    lam = model.lam(x)
    target = np.exp(model.g * t0) + model.g * (-math.log(eps)) / lam
    return float(math.log(target) / model.g)


def median_expected_life(model: GompertzModel, x: CovariateVector, t0: float) -> float:
    """Age in years at which conditional survival from t0 crosses 0.5.

    Bracketed root-finding to 1e-6 months; the survival curve is strictly
    decreasing so the root is unique.
    """
    f = lambda t: conditional_survival(model, x, t, t0) - 0.5
    hi = t0 + 1.0
    while f(hi) > 0:
        hi = t0 + 2.0 * (hi - t0)
        if hi - t0 > 1e7:
            raise FitError("median life bracket expansion failed")
    root = brentq(f, t0, hi, xtol=1e-6)
    return float(root) / 12.0


# ---------------------------------------------------------------------------
# Maximum likelihood fitting
# ---------------------------------------------------------------------------


def _design_matrix(records: Sequence[MortalityRecord]) -> np.ndarray:
    return np.vstack([r.covariates.design_row() for r in records])


def _loglik_parts(g, tau, X, entry, exit_, died):
    """Log-likelihood, gradient and Hessian of the censored Gompertz model.

    Parametrization is (g, tau) directly; X may be standardized.  Uses
    A_i = (e^{g m_i} - e^{g s_i})/g so that log S_i = -lam_i A_i.
    """
    eta = X @ tau
    lam = np.exp(eta)
    em = np.exp(g * exit_)
    es = np.exp(g * entry)
    B = em - es
    A = B / g
    Bp = exit_ * em - entry * es          # dB/dg
    Bpp = exit_**2 * em - entry**2 * es   # d2B/dg2
    Ap = Bp / g - B / g**2
    App = Bpp / g - 2.0 * Bp / g**2 + 2.0 * B / g**3

    ll = float(np.sum(died * (eta + g * exit_)) - np.sum(lam * A))

    grad_tau = X.T @ (died - lam * A)
    grad_g = float(np.sum(died * exit_) - np.sum(lam * Ap))
    grad = np.concatenate(([grad_g], grad_tau))

    p = X.shape[1]
    H = np.empty((p + 1, p + 1))
    H[0, 0] = -np.sum(lam * App)
    cross = -(X.T @ (lam * Ap))
    H[0, 1:] = cross
    H[1:, 0] = cross
    H[1:, 1:] = -(X.T * (lam * A)) @ X
    return ll, grad, H


def fit_gompertz(records: Sequence[MortalityRecord], max_iter: int = 200, tol: float = 1e-9) -> GompertzModel:
    """Fit (g, tau) by right-censored maximum likelihood.

    Requires at least one observed death and a full-rank design.  Covariates
    are centered and scaled internally for conditioning; the returned
    coefficients and covariance are on the original scale.  Raises FitError
    on non-convergence or rank deficiency.
    """
    if not records:
        raise FitError("no records")
    X_raw = _design_matrix(records)
    entry = np.array([r.entry_age for r in records], dtype=float)
    exit_ = np.array([r.exit_age for r in records], dtype=float)
    died = np.array([1.0 if r.died else 0.0 for r in records])

    if died.sum() < 1:
        raise FitError("no events: all records censored, hazard scale not identified")

    # Standardize non-intercept columns with nonzero spread.
    center = X_raw.mean(axis=0)
    scale = X_raw.std(axis=0)
    center[0] = 0.0
    scale[0] = 1.0
    degenerate = scale <= 0
    if degenerate[1:].any():
        # Constant columns other than the intercept make the design singular.
        raise FitError(f"rank-deficient covariates: constant columns {np.where(degenerate)[0].tolist()}")
    X = (X_raw - center) / scale
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError("rank-deficient covariates")

    # Starting values: modest shape, intercept matching the crude rate.
    g = 0.005
    tau = np.zeros(X.shape[1])
    A0 = (np.exp(g * exit_) - np.exp(g * entry)) / g
    tau[0] = math.log(died.sum() / A0.sum())

    ll, grad, H = _loglik_parts(g, tau, X, entry, exit_, died)
    converged = False
    for _ in range(max_iter):
        step = None
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            pass
        if step is None or not np.all(np.isfinite(step)):
            step = grad / max(1.0, np.linalg.norm(grad))  # gradient ascent fallback

        # Damped update: halve until the likelihood improves and g stays positive.
        improved = False
        for k in range(60):
            cand_g = g + step[0] * 0.5**k
            if cand_g <= 0:
                continue
            cand_tau = tau + step[1:] * 0.5**k
            cand = _loglik_parts(cand_g, cand_tau, X, entry, exit_, died)
            if np.isfinite(cand[0]) and cand[0] > ll:
                g, tau = cand_g, cand_tau
                ll, grad, H = cand
                improved = True
                break
        if not improved:
            # Derivative-free fallback from the current point.
            res = minimize(
                lambda v: -_loglik_parts(math.exp(v[0]), v[1:], X, entry, exit_, died)[0],
                np.concatenate(([math.log(g)], tau)),
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 5000},
            )
            g = math.exp(res.x[0])
            tau = res.x[1:]
            ll, grad, H = _loglik_parts(g, tau, X, entry, exit_, died)
        if np.max(np.abs(grad)) < tol * max(1.0, abs(ll)):
            converged = True
            break
    if not converged and np.max(np.abs(grad)) > 1e-5 * max(1.0, abs(ll)):
        raise FitError(f"no convergence after {max_iter} iterations (|grad| = {np.max(np.abs(grad)):.3g})")

    # Map back to the original covariate scale:
    #   eta = tau_std' x_std = (tau0 - sum tau_k mu_k / s_k) + sum (tau_k/s_k) x_k.
    p = len(tau)
    T = np.zeros((p + 1, p + 1))
    T[0, 0] = 1.0
    T[1, 1] = 1.0
    T[1, 2:] = -center[1:] / scale[1:]
    for k in range(1, p):
        T[k + 1, k + 1] = 1.0 / scale[k]
    theta_std = np.concatenate(([g], tau))
    theta = T @ theta_std

    # Covariance from the observed information in standardized coordinates,
    # pushed through the (linear) rescaling map.
    try:
        cov_std = np.linalg.inv(-H)
    except np.linalg.LinAlgError as e:
        raise FitError("observed information is singular") from e
    cov = T @ cov_std @ T.T

    return GompertzModel(g=float(theta[0]), tau=theta[1:], cov=cov, loglik=ll)


def loglik_at(model: GompertzModel, records: Sequence[MortalityRecord]) -> float:
    """Censored log-likelihood of arbitrary (g, tau) on a sample."""
    X = _design_matrix(records)
    entry = np.array([r.entry_age for r in records])
    exit_ = np.array([r.exit_age for r in records])
    died = np.array([1.0 if r.died else 0.0 for r in records])
    return _loglik_parts(model.g, model.tau, X, entry, exit_, died)[0]


def sample_death_ages(
    model: GompertzModel, x: CovariateVector, t0: float, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Inverse-CDF draws of death age (months) conditional on alive at t0."""
    lam = model.lam(x)
    u = rng.random(n)
    # S(t|t0) = u  =>  e^{gt} = e^{g t0} - (g/lam) log u
    return np.log(np.exp(model.g * t0) - (model.g / lam) * np.log(u)) / model.g


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

CSV_HEADER = ["id", "age_entry_m", "age_exit_m", "died", "gender", "married", "savings", "cohort"]


def write_mortality_csv(path, records: Iterable[MortalityRecord], ids: Iterable | None = None) -> None:
    records = list(records)
    ids = list(ids) if ids is not None else list(range(len(records)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for rid, r in zip(ids, records):
            w.writerow(
                [
                    rid,
                    f"{r.entry_age:.6f}",
                    f"{r.exit_age:.6f}",
                    int(r.died),
                    r.covariates.gender,
                    int(r.covariates.married),
                    f"{r.covariates.savings:.2f}",
                    f"{r.covariates.birth_cohort:.0f}",
                ]
            )


def read_mortality_csv(path) -> list[MortalityRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"mortality CSV missing columns: {sorted(missing)}")
        for row in reader:
            cov = CovariateVector(
                age_at_retirement=float(row["age_entry_m"]),
                gender=row["gender"],
                married=bool(int(row["married"])),
                savings=float(row["savings"]),
                birth_cohort=float(row["cohort"]),
            )
            out.append(
                MortalityRecord(
                    covariates=cov,
                    entry_age=float(row["age_entry_m"]),
                    exit_age=float(row["age_exit_m"]),
                    died=bool(int(row["died"])),
                )
            )
    return out
