"""Scenario configuration: one human-editable YAML file drives every stage.

All defaults are recorded into the effective config so that runs are fully
self-describing; the canonical JSON serialization of the effective config is
hashed into the run manifest, and two runs with equal hashes and seeds must
produce byte-identical output directories.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import yaml

from .preferences import CHANNELS

__all__ = ["ScenarioConfig", "ConfigError", "load_config"]


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass
class ScenarioConfig:
    seed: int
    population_size: int = 20_000
    channel_probs: tuple = (0.45, 0.35, 0.20)
    quintile_cutpoints: tuple = (34_716.0, 59_212.0, 93_775.0, 159_938.0)

    gamma: float = 3.0
    annual_return: float = 0.03
    contracts: dict = field(
        default_factory=lambda: {
            "imm_g0": {"deferral": 0.0, "guarantee": 0.0},
            "imm_g180": {"deferral": 0.0, "guarantee": 180.0},
        }
    )

    cost_mean_r: float = 2.75
    cost_support: tuple = (0.5, 6.5)
    cost_p_below_one: tuple = (0.06, 0.06, 0.06, 0.14, 0.14)
    entry_quantile: float | None = 0.33
    participation_cost: float = 0.0
    offer_margin: float = 1.5
    offer_jitter: float = 0.30
    bargain_premium: float = 0.7

    bequest_zeta: float = 0.40
    bequest_cont_means: tuple = (4.640, 4.832, 4.952, 5.347, 6.353)
    beta_means: tuple = (1.5e-3, 3.5e-4, 0.0, 0.0, 0.0)
    beta_vars: tuple = tuple((0.4 * b) ** 2 for b in (1.5e-3, 3.5e-4, 1.0e-4, 4.0e-5, 1.0e-5))

    mortality_synth_n: int = 50_000
    use_fitted_mortality: bool = False

    estimation_draws: int = 10_000
    estimation_bootstrap: int = 200
    runner_up_min_confidence: float = 2.0

    cf_sample: int = 1_500
    cf_sims: int = 10_000

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        self.seed = int(self.seed)
        for name in ("channel_probs", "quintile_cutpoints", "cost_support", "cost_p_below_one",
                     "bequest_cont_means", "beta_means", "beta_vars"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.channel_probs) != len(CHANNELS):
            raise ConfigError(f"channel_probs must have {len(CHANNELS)} entries")
        if abs(sum(self.channel_probs) - 1.0) > 1e-9:
            raise ConfigError("channel_probs must sum to 1")
        if list(self.quintile_cutpoints) != sorted(self.quintile_cutpoints):
            raise ConfigError("quintile cutpoints must be increasing")
        if len(self.quintile_cutpoints) != 4:
            raise ConfigError("exactly four quintile cutpoints required")
        if not self.contracts:
            raise ConfigError("contract menu must be non-empty")
        for name, spec in self.contracts.items():
            if spec.get("deferral", 0.0) < 0 or spec.get("guarantee", 0.0) < 0:
                raise ConfigError(f"contract {name!r} has negative terms")
        if len(self.cost_p_below_one) != 5 or len(self.bequest_cont_means) != 5:
            raise ConfigError("per-quintile parameter tuples must have 5 entries")
        if len(self.beta_means) != 5 or len(self.beta_vars) != 5:
            raise ConfigError("beta parameter tuples must have 5 entries")
        if self.population_size < 1:
            raise ConfigError("population_size must be positive")
        if self.entry_quantile is not None and not 0.0 < self.entry_quantile <= 1.0:
            raise ConfigError("entry_quantile must lie in (0, 1]")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def load_config(path=None, seed: int | None = None, **overrides) -> ScenarioConfig:
    """Build the effective config: defaults <- YAML file <- explicit overrides."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        data.update(loaded)
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    if seed is not None:
        data["seed"] = seed
    if "seed" not in data:
        raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")
    unknown = set(data) - {f for f in ScenarioConfig.__dataclass_fields__}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ScenarioConfig(**data)
    except TypeError as e:
        raise ConfigError(str(e)) from e
