"""Organizations, incentive valuation and budget checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

BUDGET_RTOL = 1e-6


class OrganizationError(ValueError):
    pass


@dataclass(frozen=True)
class Driver:
    origin: str
    destination: str
    entry_period: int
    b_factor: float = 1.0

    def __post_init__(self):
        if not self.b_factor >= 1.0:
            raise OrganizationError(f"b_factor must be >= 1, got {self.b_factor}")

    @property
    def od(self) -> tuple[str, str]:
        return (self.origin, self.destination)


@dataclass
class Organization:
    id: str
    vot_per_min: float
    drivers: list[Driver]
    background: bool = False
    B: np.ndarray | None = field(default=None, repr=False)
    gamma: float | None = None

    def __post_init__(self):
        if self.vot_per_min < 0:
            raise OrganizationError(f"organization {self.id}: negative VOT")

    @property
    def b(self) -> np.ndarray:
        return np.array([d.b_factor for d in self.drivers], dtype=float)

    def __len__(self) -> int:
        return len(self.drivers)

    def groups(self, demand) -> np.ndarray:
        """OD-period index of every driver under ``demand``."""
        return np.array([demand.odp_index(d.od, d.entry_period) for d in self.drivers], dtype=int)

    def attach_baseline(self, demand, eta: np.ndarray) -> "Organization":
        from .assignment import min_time_assignment

        self.B, self.gamma = min_time_assignment(self.groups(demand), eta)
        return self


def load_organizations(path: str | Path) -> list[Organization]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise OrganizationError(f"{path}: expected a JSON list of organizations")
    orgs = []
    for k, raw in enumerate(data):
        try:
            drivers = [
                Driver(str(d["origin"]), str(d["destination"]), int(d["entry_period"]), float(d.get("b_factor", 1.0)))
                for d in raw["drivers"]
            ]
            orgs.append(
                Organization(
                    str(raw["id"]), float(raw.get("vot_per_min", 0.0)), drivers, bool(raw.get("background", False))
                )
            )
        except KeyError as exc:
            raise OrganizationError(f"{path}: organization #{k} missing field {exc.args[0]!r}") from exc
    return orgs


def organizations_to_json(orgs: Sequence[Organization]) -> list[dict]:
    out = []
    for org in orgs:
        entry = {
            "id": org.id,
            "vot_per_min": org.vot_per_min,
            "drivers": [
                {"origin": d.origin, "destination": d.destination, "entry_period": d.entry_period, "b_factor": d.b_factor}
                for d in org.drivers
            ],
        }
        if org.background:
            entry["background"] = True
        out.append(entry)
    return out


def assigned_time(S, delta: np.ndarray) -> float:
    """Total assigned route time sum_j delta^T s_j of an assignment matrix."""
    delta = np.asarray(delta, dtype=float)
    if S.shape[0] != delta.size:
        raise ValueError(f"dimension mismatch: S has {S.shape[0]} rows, delta has {delta.size}")
    load = np.asarray(S.sum(axis=1)).ravel() if sp.issparse(S) else np.asarray(S, dtype=float).sum(axis=1)
    return float(delta @ load)


def incentive_value(org: Organization, S, delta: np.ndarray) -> float:
    """alpha * max(0, total assigned time - gamma)."""
    if org.gamma is None:
        raise OrganizationError(f"organization {org.id} has no baseline time; call attach_baseline first")
    if S.shape[1] != len(org):
        raise ValueError(f"dimension mismatch: S has {S.shape[1]} columns for {len(org)} drivers")
    return org.vot_per_min * max(0.0, assigned_time(S, delta) - org.gamma)


def partition_cost(blocks: Sequence[Sequence[int]], driver_times: np.ndarray, driver_baseline: np.ndarray, vot: float) -> float:
    """Total incentive when drivers are grouped into ``blocks`` sharing one VOT.

    Sums are exact (rationals) and rounded once, so a coarser partition can
    never come out above a finer one through round-off.
    """
    excess = [Fraction(float(x)) for x in np.asarray(driver_times, dtype=float) - np.asarray(driver_baseline, dtype=float)]
    rate = Fraction(float(vot))
    return float(sum((rate * max(Fraction(0), sum((excess[i] for i in block), Fraction(0))) for block in blocks), Fraction(0)))


def merged_cost_dominance(
    fine: Sequence[Sequence[int]],
    coarse: Sequence[Sequence[int]],
    S,
    delta: np.ndarray,
    driver_baseline: np.ndarray,
    vot: float,
) -> tuple[float, float]:
    """Incentive cost of a fixed assignment under a partition and a coarsening of it.

    ``S`` has one column per driver; ``driver_baseline`` is each driver's
    minimum time (B eta).  Returns ``(cost_fine, cost_coarse)``; the second
    never exceeds the first.
    """
    S = S.toarray() if sp.issparse(S) else np.asarray(S, dtype=float)
    n = S.shape[1]
    fine_all = sorted(i for block in fine for i in block)
    coarse_all = sorted(i for block in coarse for i in block)
    if fine_all != coarse_all or fine_all != list(range(n)):
        raise ValueError("partitions must cover the same driver set exactly once")
    owner = {i: b for b, block in enumerate(coarse) for i in block}
    for block in fine:
        if len({owner[i] for i in block}) > 1:
            raise ValueError("second partition is not a coarsening of the first")
    times = np.asarray(delta, dtype=float) @ S
    return partition_cost(fine, times, driver_baseline, vot), partition_cost(coarse, times, driver_baseline, vot)


@dataclass
class IncentiveOutcome:
    per_org_cost: np.ndarray
    budget: float

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.per_org_cost))


def validate_outcome(outcome: IncentiveOutcome, orgs: Sequence[Organization], S: Sequence, delta: np.ndarray) -> list[str]:
    """Report every violated incentive or budget condition; empty means ok."""
    problems = []
    costs = np.asarray(outcome.per_org_cost, dtype=float)
    if costs.size != len(orgs):
        return [f"expected {len(orgs)} costs, got {costs.size}"]
    for org, S_i, c in zip(orgs, S, costs):
        if c < 0:
            problems.append(f"organization {org.id}: negative incentive {c}")
        owed = org.vot_per_min * (assigned_time(S_i, delta) - org.gamma)
        if c < owed - 1e-9 * max(1.0, abs(owed)):
            problems.append(f"organization {org.id}: incentive {c:.6g} below compensation {owed:.6g}")
    slack = BUDGET_RTOL * max(1.0, outcome.budget)
    if costs.sum() > outcome.budget + slack:
        problems.append(f"total incentive {costs.sum():.6g} exceeds budget {outcome.budget:.6g}")
    return problems
