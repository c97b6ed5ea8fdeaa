"""Scenario configuration and config-file loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

DEFAULT_VOT = 2.63  # $/min


@dataclass
class SynthSpec:
    n_nodes: int = 12
    n_links: int = 32
    n_ods: int = 132
    drivers: int = 12000
    n_orgs: int = 10
    participation: float = 0.1
    congestion: float = 1.0  # target mean v/w of the UE baseline
    seed: int = 0
    num_periods: int = 18
    analysis_periods: int = 12
    period_length: float = 5.0  # minutes
    k_routes: int = 3
    vot: float = DEFAULT_VOT
    b_factor: float = 1.5
    extent_mi: float = 12.0
    speed_mph: float = 60.0

    def __post_init__(self):
        if min(self.n_nodes, self.n_links, self.n_ods, self.drivers) <= 0:
            raise ValueError("synthesis sizes must be positive")
        if self.n_ods > self.n_nodes * (self.n_nodes - 1):
            raise ValueError(f"n_ods={self.n_ods} exceeds the {self.n_nodes * (self.n_nodes - 1)} ordered node pairs")
        if self.n_links < 2 * self.n_nodes or self.n_links % 2:
            raise ValueError("n_links must be even and at least twice n_nodes (bidirectional ring plus chords)")
        if self.n_links > self.n_nodes * (self.n_nodes - 1):
            raise ValueError("too many links for a simple directed graph")
        if not 0.0 <= self.participation <= 1.0:
            raise ValueError("participation must lie in [0, 1]")
        if self.congestion <= 0:
            raise ValueError("congestion must be positive")


@dataclass
class ScenarioConfig:
    network: str | None = None
    demand: str | None = None
    orgs: str | None = None
    # organization synthesis when no orgs file is given
    n_orgs: int = 10
    participation: float = 0.1
    b_factor: float = 1.5
    vot: float = DEFAULT_VOT
    vot_scale: float = 1.0
    seed: int = 0
    budget: float = 0.0
    # horizon
    num_periods: int = 18
    period_length: float = 5.0
    analysis_periods: int | None = 12
    k_routes: int = 3
    # baseline
    ue_method: str = "gp"
    ue_tol: float = 1e-4
    ue_max_iter: int = 500
    # relaxed solver
    rho: float = 1.0
    lambda_tilde: float = 0.0
    max_iters: int = 2000
    tol: float = 1e-4
    anneal_iters: int = 200
    # projection
    time_limit: float | None = 60.0
    name: str = "scenario"
    out: str | None = None
    synth: SynthSpec | None = field(default=None)

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SynthSpec(**self.synth)
        if not 0.0 <= self.participation <= 1.0:
            raise ValueError("participation must lie in [0, 1]")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.n_orgs < 1:
            raise ValueError("n_orgs must be >= 1")
        if self.synth is None and (self.network is None or self.demand is None):
            raise ValueError("need network and demand files or a synth spec")

    @classmethod
    def from_mapping(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ScenarioConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return ScenarioConfig(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def read_config_file(path: str | Path) -> dict:
    """Mapping from a JSON or YAML file (chosen by extension)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def load_config(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_mapping(read_config_file(path))
