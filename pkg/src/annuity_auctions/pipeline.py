"""End-to-end pipeline: synth -> fit-mortality -> simulate -> estimate ->
counterfactual -> report.

Every stage is idempotent and reads its inputs from the output directory, so
single stages can be rerun against cached upstream artifacts.  All
randomness derives from named substreams of the master seed; two runs with
the same effective config produce byte-identical output directories (the
persisted manifest therefore carries no timings; the returned RunManifest
object does).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig
from .counterfactual import CfRetiree, mwr_table, pension_table, run_counterfactuals, utility_table
from .estimation import estimate_all
from .lifetables import fit_gompertz, read_mortality_csv, write_mortality_csv
from .market import CostLaw, read_transcripts, simulate_market, write_transcripts
from .population import (
    build_primitives,
    read_population_csv,
    synth_mortality_records,
    synth_population,
    write_population_csv,
)
from .preferences import BequestPrefDist, GroupKey, RiskPrefGroup
from .valuation import FACTORS_CSV_HEADER, LifeFactors, factors_csv_row

__all__ = ["RunManifest", "run_pipeline", "run_stage", "STAGES"]

STAGES = ("synth", "fit-mortality", "simulate", "estimate", "counterfactual", "report")


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    outputs: dict[str, list[str]] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def persist(self, out_dir: Path) -> None:
        # Timings are deliberately excluded: identical (config, seed) runs
        # must leave byte-identical directories.
        payload = {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "outputs": {k: sorted(v) for k, v in sorted(self.outputs.items())},
        }
        (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(out_dir: Path) -> dict:
        return json.loads((out_dir / "manifest.json").read_text())


def _stage_synth(cfg: ScenarioConfig, out: Path) -> list[str]:
    pop = synth_population(cfg.population_size, cfg.seed, cfg.channel_probs, cfg.quintile_cutpoints)
    write_population_csv(out / "population.csv", pop)
    records = synth_mortality_records(cfg.mortality_synth_n, cfg.seed)
    write_mortality_csv(out / "mortality_records.csv", records)
    return ["population.csv", "mortality_records.csv"]


def _stage_fit_mortality(cfg: ScenarioConfig, out: Path) -> list[str]:
    records = read_mortality_csv(out / "mortality_records.csv")
    model = fit_gompertz(records)
    (out / "mortality_model.json").write_text(model.to_json() + "\n")
    return ["mortality_model.json"]


def _stage_simulate(cfg: ScenarioConfig, out: Path) -> list[str]:
    pop = read_population_csv(out / "population.csv")
    prims = build_primitives(cfg)
    if cfg.use_fitted_mortality:
        from .lifetables import GompertzModel

        prims.mortality = GompertzModel.from_json((out / "mortality_model.json").read_text())
    transcripts = simulate_market(pop, prims, seed=cfg.seed)
    write_transcripts(out / "transcripts.jsonl", transcripts, private=True)
    write_transcripts(out / "transcripts_observables.jsonl", transcripts, private=False)
    with open(out / "life_factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FACTORS_CSV_HEADER)
        from .valuation import ContractSpec

        for t in transcripts:
            for key in sorted(t.factors):
                f = t.factors[key]
                lf = LifeFactors(
                    D_R=f["D_R"], D_R_DP=f["D_R_DP"], G_F=f["G_F"], S_F=f["S_F"], dp_multiple=f["dp_multiple"]
                )
                spec = ContractSpec(deferral=f["deferral"], guarantee=f["guarantee"])
                w.writerow(factors_csv_row(t.retiree_id, spec, lf))
    return ["transcripts.jsonl", "transcripts_observables.jsonl", "life_factors.csv"]


def _stage_estimate(cfg: ScenarioConfig, out: Path) -> list[str]:
    import pandas as pd

    from .preferences import CHANNELS, QUINTILES

    prims = build_primitives(cfg)
    transcripts = read_transcripts(out / "transcripts_observables.jsonl")
    result = estimate_all(
        transcripts,
        prims.crra,
        n_draws=cfg.estimation_draws,
        bootstrap=cfg.estimation_bootstrap,
        seed=cfg.seed,
    )
    (out / "estimates.json").write_text(result.to_json() + "\n")
    result.info_costs.to_csv(out / "info_costs.csv")

    # Bequest summary in the savings-quintile report shape.
    rows = []
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 909]))
    for q in QUINTILES:
        draws = result.bequest[q].sample(rng, 100_000)
        rows.append(
            {
                "quintile": q,
                "zeta": result.bequest[q].zeta,
                "mean": float(draws.mean()),
                "median": float(np.median(draws)),
                "std": float(draws.std()),
                "iqr": float(np.subtract(*np.percentile(draws, [75, 25]))),
            }
        )
    pd.DataFrame(rows).to_csv(out / "theta_summary.csv", index=False, float_format="%.6g")

    alpha_rows = []
    for q in QUINTILES:
        row = {"quintile": q}
        for ch in CHANNELS:
            row[ch] = result.info_costs.alpha(ch, q)
        alpha_rows.append(row)
    pd.DataFrame(alpha_rows).to_csv(out / "alpha_table.csv", index=False, float_format="%.6g")

    grid_rows = []
    for q in QUINTILES:
        law = result.cost_laws[q].law
        for r, w_ in zip(law.grid, law.cdf):
            grid_rows.append({"quintile": q, "r": r, "W": w_})
    pd.DataFrame(grid_rows).to_csv(out / "cost_cdf_grid.csv", index=False, float_format="%.8g")

    beta_rows = [
        {
            "group": g,
            "beta_hat": e.beta_hat,
            "ci_low": e.ci_low,
            "ci_high": e.ci_high,
            "n": e.n,
            "identified": e.identified,
            "beta_var_hat": e.beta_var_hat,
        }
        for g, e in sorted(result.beta_groups.items())
    ]
    pd.DataFrame(beta_rows).to_csv(out / "beta_groups.csv", index=False, float_format="%.8g")
    return [
        "estimates.json",
        "info_costs.csv",
        "theta_summary.csv",
        "alpha_table.csv",
        "cost_cdf_grid.csv",
        "beta_groups.csv",
    ]


def _load_estimates(out: Path):
    payload = json.loads((out / "estimates.json").read_text())
    bequest = {int(q): BequestPrefDist(int(q), d["zeta"], np.array(d["theta_grid"]), np.array(d["theta_cdf"]))
               for q, d in payload["bequest"].items()}
    laws = {int(q): CostLaw(np.array(d["grid"]), np.array(d["cdf"])) for q, d in payload["cost_laws"].items()}
    beta = {}
    for g, e in payload["beta_groups"].items():
        mean = e["beta_hat"] if e["identified"] and np.isfinite(e["beta_hat"]) else 0.0
        var = e["beta_var_hat"] if np.isfinite(e["beta_var_hat"]) else 0.0
        beta[g] = RiskPrefGroup(key=GroupKey.from_label(g), beta_mean=mean, beta_var=max(var, 0.0))
    return bequest, laws, beta


def _stage_counterfactual(cfg: ScenarioConfig, out: Path) -> list[str]:
    prims = build_primitives(cfg)
    transcripts = read_transcripts(out / "transcripts_observables.jsonl")
    bequest, laws, beta = _load_estimates(out)

    pool = [t for t in transcripts if t.stage == 2 and t.chosen_contract is not None]
    pool.sort(key=lambda t: t.retiree_id)
    step = max(1, len(pool) // cfg.cf_sample)
    sample = pool[::step][: cfg.cf_sample]

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 505]))
    retirees = []
    for t in sample:
        grp = beta.get(t.group_label)
        beta_i = float(rng.normal(grp.beta_mean, np.sqrt(grp.beta_var))) if grp else 0.0
        theta_i = float(bequest[t.quintile].sample(rng, 1)[0])
        f = t.factors[t.chosen_contract]
        retirees.append(
            CfRetiree(
                id=t.retiree_id,
                quintile=t.quintile,
                channel=t.channel,
                group_label=t.group_label,
                savings=t.savings,
                factors=LifeFactors(
                    D_R=f["D_R"], D_R_DP=f["D_R_DP"], G_F=f["G_F"], S_F=f["S_F"], dp_multiple=f["dp_multiple"]
                ),
                n_potential=len(t.potential),
                theta=theta_i,
                beta=beta_i,
            )
        )
    results = run_counterfactuals(retirees, laws, prims.crra, n_sims=cfg.cf_sims, seed=cfg.seed)
    pension_table(results).to_csv(out / "cf_pensions.csv", index=False, float_format="%.8g")
    mwr_table(results).to_csv(out / "cf_mwr.csv", index=False, float_format="%.8g")
    utility_table(results, "bidders").to_csv(out / "cf_utility.csv", index=False, float_format="%.8g")
    utility_table(results, "channel").to_csv(out / "cf_utility_by_channel.csv", index=False, float_format="%.8g")
    return ["cf_pensions.csv", "cf_mwr.csv", "cf_utility.csv", "cf_utility_by_channel.csv"]


def _stage_report(cfg: ScenarioConfig, out: Path) -> list[str]:
    from .report import render_report

    return render_report(cfg, out)


_STAGE_FUNCS = {
    "synth": _stage_synth,
    "fit-mortality": _stage_fit_mortality,
    "simulate": _stage_simulate,
    "estimate": _stage_estimate,
    "counterfactual": _stage_counterfactual,
    "report": _stage_report,
}

_STAGE_INPUTS = {
    "synth": [],
    "fit-mortality": ["mortality_records.csv"],
    "simulate": ["population.csv"],
    "estimate": ["transcripts_observables.jsonl"],
    "counterfactual": ["transcripts_observables.jsonl", "estimates.json"],
    "report": ["estimates.json", "cf_pensions.csv"],
}


def run_stage(cfg: ScenarioConfig, out_dir, stage: str) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    for needed in _STAGE_INPUTS[stage]:
        if not (out / needed).exists():
            raise ConfigError(f"stage {stage!r} needs {needed}; run the upstream stage first")
    return _STAGE_FUNCS[stage](cfg, out)


def run_pipeline(cfg: ScenarioConfig, out_dir, stages=None, verbose: bool = True) -> RunManifest:
    """Run the requested stages in dependency order and persist the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash=cfg.config_hash(), code_version=__version__)
    todo = list(stages) if stages else list(STAGES)
    for stage in todo:
        t0 = time.perf_counter()
        if verbose:
            print(f"[{stage}] running ...", flush=True)
        outputs = run_stage(cfg, out, stage)
        manifest.outputs[stage] = outputs
        manifest.wall_clock[stage] = time.perf_counter() - t0
        if verbose:
            print(f"[{stage}] done in {manifest.wall_clock[stage]:.1f}s -> {', '.join(outputs)}", flush=True)
    (out / "config.effective.json").write_text(cfg.canonical_json() + "\n")
    manifest.persist(out)
    return manifest
