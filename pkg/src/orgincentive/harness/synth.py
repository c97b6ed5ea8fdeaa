"""Synthetic networks, demand and organization rosters."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..assignment import build_demand_model, compute_ue_baseline, write_demand
from ..incentives import Driver, Organization, organizations_to_json
from ..network import Horizon, Link, Network
from .config import SynthSpec

log = logging.getLogger(__name__)

DETOUR = 1.15  # road length over straight-line distance


@dataclass
class SynthInstance:
    network: Network
    demand: dict[tuple[str, str, int], float]
    orgs: list[Organization]
    horizon: Horizon
    mean_vw: float


def _layout(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    angle = 2 * np.pi * np.arange(spec.n_nodes) / spec.n_nodes
    radius = 0.5 * spec.extent_mi * rng.uniform(0.75, 1.0, spec.n_nodes)
    return np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])


def synth_network(spec: SynthSpec, rng: np.random.Generator) -> tuple[Network, np.ndarray]:
    """Bidirectional ring (strongly connected) plus random bidirectional chords."""
    n = spec.n_nodes
    xy = _layout(spec, rng)
    names = [f"n{i}" for i in range(n)]
    pairs = [(i, (i + 1) % n) for i in range(n)]
    chords = [(i, j) for i in range(n) for j in range(i + 2, n) if not (i == 0 and j == n - 1)]
    extra = (spec.n_links - 2 * n) // 2
    if extra > len(chords):
        raise ValueError("not enough node pairs for the requested number of links")
    picked = rng.choice(len(chords), size=extra, replace=False) if extra else []
    pairs += [chords[k] for k in sorted(picked)]
    links = []
    for i, j in pairs:
        length = DETOUR * float(np.hypot(*(xy[i] - xy[j])))
        for a, b in ((i, j), (j, i)):
            links.append(Link(len(links), names[a], names[b], length / spec.speed_mph, 1.0, length))
    return Network(names, links), xy


def synth_demand(spec: SynthSpec, xy: np.ndarray, rng: np.random.Generator) -> dict[tuple[str, str, int], float]:
    """Gravity OD weights with noise, a single rush peak over the analysis periods."""
    n = spec.n_nodes
    mass = rng.lognormal(0.0, 0.5, n)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    dist = np.array([np.hypot(*(xy[i] - xy[j])) for i, j in pairs])
    weight = np.array([mass[i] * mass[j] for i, j in pairs]) / np.sqrt(dist) * rng.lognormal(0.0, 0.3, len(pairs))
    if spec.n_ods < len(pairs):
        keep = np.sort(rng.choice(len(pairs), size=spec.n_ods, replace=False, p=weight / weight.sum()))
        pairs = [pairs[k] for k in keep]
        weight = weight[keep]
    A = spec.analysis_periods
    profile = 1.0 + np.sin(np.pi * (np.arange(A) + 0.5) / A)
    prob = np.outer(profile, weight).ravel()
    counts = rng.multinomial(spec.drivers, prob / prob.sum()).reshape(A, len(pairs))
    demand = {}
    for t in range(A):
        for k, (i, j) in enumerate(pairs):
            if counts[t, k]:
                demand[(f"n{i}", f"n{j}", t)] = float(counts[t, k])
    return demand


def mean_vw(volumes: np.ndarray, network: Network, horizon: Horizon) -> float:
    """Mean volume/capacity over all links in the analysis periods."""
    _, cap = network.link_params(horizon.num_periods)
    v = np.asarray(volumes).reshape(horizon.num_periods, network.num_links)
    return float(np.mean(v[: horizon.analysis_periods] / cap[: horizon.analysis_periods]))


def calibrate_capacities(
    network: Network,
    demand: Mapping,
    horizon: Horizon,
    target: float,
    rng: np.random.Generator,
    k: int = 3,
    rounds: int = 8,
    rtol: float = 0.02,
) -> tuple[Network, float]:
    """Scale capacities until the UE baseline's mean v/w is within ``rtol`` of ``target``."""
    base = rng.uniform(0.8, 1.2, network.num_links)
    dm = build_demand_model(network, demand, horizon, k)
    # first guess: free-flow loading spread evenly
    scale = max(sum(demand.values()) / (horizon.analysis_periods * network.num_links * target), 1e-6)
    ratio = np.nan
    prev = None
    for _ in range(rounds):
        net = network.with_capacities(base * scale)
        ue = compute_ue_baseline(net, dm, horizon)
        ratio = mean_vw(ue.volumes, net, horizon)
        log.debug("capacity scale %.4g -> mean v/w %.4g", scale, ratio)
        if abs(ratio - target) <= rtol * target:
            return net, ratio
        # secant step on log v/w against log scale; longer trips under
        # congestion make v/w fall faster than 1/scale
        slope = -1.0
        if prev is not None and prev[0] != np.log(scale):
            slope = float(np.clip((np.log(ratio) - prev[1]) / (np.log(scale) - prev[0]), -5.0, -0.2))
        prev = (np.log(scale), np.log(ratio))
        scale = float(np.exp(np.log(scale) + (np.log(target) - np.log(ratio)) / slope))
    net = network.with_capacities(base * scale)
    ratio = mean_vw(compute_ue_baseline(net, dm, horizon).volumes, net, horizon)
    return net, ratio


def driver_population(demand: Mapping[tuple[str, str, int], float], horizon: Horizon) -> list[tuple[str, str, int]]:
    """One entry per driver entering in the analysis periods, in (period, origin, destination) order."""
    pop = []
    for (o, d, t), count in sorted(demand.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
        if t < horizon.analysis_periods:
            if abs(count - round(count)) > 1e-9:
                raise ValueError(f"non-integer driver count {count} for {o}->{d} at period {t}")
            pop.extend([(o, d, t)] * int(round(count)))
    return pop


def make_organizations(
    demand: Mapping[tuple[str, str, int], float],
    horizon: Horizon,
    n_orgs: int,
    participation: float,
    seed: int,
    vot: float,
    b_factor: float = 1.5,
) -> list[Organization]:
    """Participating drivers drawn uniformly at random and dealt round-robin to organizations.

    A single seeded permutation of the population decides both who
    participates and in which organization, so a larger participation
    fraction keeps every driver of a smaller one in the same organization.
    """
    pop = driver_population(demand, horizon)
    perm = np.random.default_rng(seed).permutation(len(pop))
    chosen = perm[: int(round(participation * len(pop)))]
    members: list[list[Driver]] = [[] for _ in range(n_orgs)]
    for rank, idx in enumerate(chosen):
        o, d, t = pop[idx]
        members[rank % n_orgs].append(Driver(o, d, t, b_factor))
    return [Organization(f"org{i}", vot, drv) for i, drv in enumerate(members)]


def synthesize_instance(spec: SynthSpec, outdir: str | Path | None = None) -> SynthInstance:
    rng = np.random.default_rng(spec.seed)
    horizon = Horizon(spec.num_periods, spec.period_length, spec.analysis_periods)
    network, xy = synth_network(spec, rng)
    demand = synth_demand(spec, xy, rng)
    network, ratio = calibrate_capacities(network, demand, horizon, spec.congestion, rng, spec.k_routes)
    orgs = make_organizations(demand, horizon, spec.n_orgs, spec.participation, spec.seed, spec.vot, spec.b_factor)
    inst = SynthInstance(network, demand, orgs, horizon, ratio)
    if outdir is not None:
        write_instance(inst, outdir)
    return inst


def write_instance(inst: SynthInstance, outdir: str | Path) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "network.json").write_text(json.dumps(inst.network.to_dict(), indent=1) + "\n")
    write_demand(out / "demand.csv", inst.demand)
    (out / "orgs.json").write_text(json.dumps(organizations_to_json(inst.orgs), indent=1) + "\n")
