"""Figures and summary tables rendered from pipeline artifacts.

The report stage reads the delimited outputs written by earlier stages and
renders publication-style matplotlib figures next to them.  PNGs are written
without volatile metadata so repeated runs stay byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .estimation import symmetry_diagnostic
from .market import read_transcripts
from .preferences import QUINTILES

__all__ = ["render_report", "save_figure"]

plt.rcParams.update(
    {
        "figure.dpi": 130,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "font.size": 10,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "grid.linestyle": "--",
        "lines.linewidth": 1.8,
        "svg.hashsalt": "annuity-auctions",
    }
)

QUINTILE_COLORS = ["#2166ac", "#4393c3", "#762a83", "#d6604d", "#b2182b"]


def save_figure(fig, path) -> None:
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def _fig_bequest(out: Path) -> str:
    payload = json.loads((out / "estimates.json").read_text())
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for q in QUINTILES:
        d = payload["bequest"][str(q)]
        grid = np.asarray(d["theta_grid"])
        cdf = d["zeta"] + (1.0 - d["zeta"]) * np.asarray(d["theta_cdf"])
        ax.plot(np.concatenate([[0.0], grid]), np.concatenate([[d["zeta"]], cdf]),
                color=QUINTILE_COLORS[q - 1], label=f"Q{q}")
    ax.set_xlim(0, 15)
    ax.set_ylim(0, 1)
    ax.set_xlabel("bequest weight")
    ax.set_ylabel("CDF")
    ax.set_title("Estimated bequest-preference distributions, by savings quintile")
    ax.legend()
    save_figure(fig, out / "fig_bequest_cdfs.png")
    return "fig_bequest_cdfs.png"


def _fig_beta(out: Path) -> str:
    df = pd.read_csv(out / "beta_groups.csv")
    df = df[df.identified].reset_index(drop=True)
    df["quintile"] = df.group.str.extract(r"\|q(\d)\|").astype(int)
    df = df.sort_values(["quintile", "group"]).reset_index(drop=True)
    fig, ax = plt.subplots(figsize=(9, 4.5))
    x = np.arange(len(df))
    for q in QUINTILES:
        sel = (df.quintile == q).to_numpy()
        mid = df.beta_hat.to_numpy()[sel]
        lo = df.ci_low.to_numpy()[sel]
        hi = df.ci_high.to_numpy()[sel]
        ax.errorbar(
            x[sel],
            mid,
            yerr=np.vstack([mid - lo, hi - mid]),
            fmt="o",
            ms=3,
            color=QUINTILE_COLORS[q - 1],
            label=f"Q{q}",
            lw=0.8,
        )
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("group (sorted by savings quintile)")
    ax.set_ylabel("mean rating taste")
    ax.set_title("Group-specific rating-taste estimates with 95% intervals")
    ax.legend(ncol=5, fontsize=8)
    save_figure(fig, out / "fig_beta_groups.png")
    return "fig_beta_groups.png"


def _fig_cost(out: Path) -> str:
    df = pd.read_csv(out / "cost_cdf_grid.csv")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    for q in QUINTILES:
        sub = df[df.quintile == q]
        axes[0].plot(sub.r, sub.W, color=QUINTILE_COLORS[q - 1], label=f"Q{q}")
        low = sub[sub.r <= 1.1]
        axes[1].plot(low.r, low.W, color=QUINTILE_COLORS[q - 1])
    axes[0].set_xlabel("cost ratio r")
    axes[0].set_ylabel("CDF")
    axes[0].set_title("Estimated cost-ratio distributions")
    axes[0].legend()
    axes[1].set_xlabel("cost ratio r")
    axes[1].set_title("Left tail (r < 1.1)")
    save_figure(fig, out / "fig_cost_cdfs.png")
    return "fig_cost_cdfs.png"


def _fig_max_pension(out: Path, n_draws: int = 4000) -> str:
    """Break-even pension distributions for the median saver per quintile."""
    df = pd.read_csv(out / "cost_cdf_grid.csv")
    tr = read_transcripts(out / "transcripts_observables.jsonl")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    rng = np.random.default_rng(12)
    for q in QUINTILES:
        sub = [t for t in tr if t.quintile == q and t.stage == 2]
        if not sub:
            continue
        sub.sort(key=lambda t: t.savings)
        med = sub[len(sub) // 2]
        unc = med.factors[med.chosen_contract]["unc"]
        g = df[df.quintile == q]
        u = rng.random(n_draws)
        r = np.interp(u, g.W, g.r)
        pensions = med.savings / (r * unc)
        xs = np.linspace(np.percentile(pensions, 1), np.percentile(pensions, 99), 200)
        bw = pensions.std() * len(pensions) ** (-0.2)
        dens = np.exp(-0.5 * ((xs[:, None] - pensions[None, :]) / bw) ** 2).mean(axis=1) / (
            bw * np.sqrt(2 * np.pi)
        )
        ax.plot(xs, dens, color=QUINTILE_COLORS[q - 1], label=f"Q{q} (median saver)")
    ax.set_xlabel("break-even monthly pension")
    ax.set_ylabel("density")
    ax.set_title("Distributions of break-even pensions, by savings quintile")
    ax.legend(fontsize=8)
    save_figure(fig, out / "fig_max_pension.png")
    return "fig_max_pension.png"


def _fig_cf(out: Path) -> str:
    df = pd.read_csv(out / "cf_pensions.csv")
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    width = 0.25
    mechs = ["current", "english", "full_info"]
    qs = sorted(df.quintile.unique())
    for i, mech in enumerate(mechs):
        vals = [
            df[(df.quintile == q) & (df.mechanism == mech)].ratio_to_full_info_mean.mean() for q in qs
        ]
        ax.bar(np.arange(len(qs)) + (i - 1) * width, vals, width, label=mech)
    ax.set_xticks(np.arange(len(qs)))
    ax.set_xticklabels([f"Q{q}" for q in qs])
    ax.set_ylabel("mean pension / full-information pension")
    ax.set_title("Mechanism comparison, by savings quintile")
    ax.legend()
    save_figure(fig, out / "fig_cf_pensions.png")
    return "fig_cf_pensions.png"


def _fig_symmetry(out: Path) -> tuple[str, str]:
    tr = read_transcripts(out / "transcripts_observables.jsonl")
    res = symmetry_diagnostic(tr)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for fid in res.firm_ids:
        ax.plot(res.density_grid, res.densities[fid], lw=0.9, alpha=0.7)
    ax.set_xlabel("pension-rate residual")
    ax.set_ylabel("density")
    ax.set_title("Residualized pension-rate densities, one line per firm")
    save_figure(fig, out / "fig_symmetry.png")

    rows = []
    for i, a in enumerate(res.firm_ids):
        for j, b in enumerate(res.firm_ids):
            if j > i:
                rows.append(
                    {"firm_a": a, "firm_b": b, "ks_stat": res.ks_stat[i, j], "p_value": res.ks_pvalue[i, j]}
                )
    pd.DataFrame(rows).to_csv(out / "symmetry_ks.csv", index=False, float_format="%.6g")
    return "fig_symmetry.png", "symmetry_ks.csv"


def render_report(cfg, out_dir) -> list[str]:
    out = Path(out_dir)
    produced = [
        _fig_bequest(out),
        _fig_beta(out),
        _fig_cost(out),
        _fig_max_pension(out),
        _fig_cf(out),
    ]
    fig_sym, csv_sym = _fig_symmetry(out)
    produced += [fig_sym, csv_sym]
    return produced
