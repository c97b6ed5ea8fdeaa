"""Occupancy matrix, link volumes, total travel time and the UE baseline.

Indexing used throughout the package (all 0-based):

* link-period rows: ``t * |E| + link``
* route-period columns: ``t * |P| + route`` where ``t`` is the entry period
* OD-period rows of ``D``: ``t * K + od``
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .network import Horizon, Network, Route, UnreachableODError, bpr_derivative, bpr_travel_time, enumerate_routes

log = logging.getLogger(__name__)

MINUTES_PER_HOUR = 60.0
GP_SHRINK = 0.9
_SNAP = 1e-9


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class RMatrix:
    """Sparse link-period x route-period arrival weights."""

    matrix: sp.csr_matrix
    num_links: int
    num_routes: int
    num_periods: int

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, other):
        return self.matrix @ other


@dataclass
class DemandModel:
    od_pairs: list[tuple[str, str]]
    routes: list[Route]
    route_od: np.ndarray  # od index of each route
    num_periods: int
    counts: np.ndarray  # drivers per OD-period, length K*T
    D: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.od_index = {od: k for k, od in enumerate(self.od_pairs)}
        self.route_od = np.asarray(self.route_od, dtype=int)
        P, K, T = self.num_routes, self.num_ods, self.num_periods
        cols = np.arange(P * T)
        rows = (cols // P) * K + self.route_od[cols % P]
        self.D = sp.csr_matrix((np.ones(P * T), (rows, cols)), shape=(K * T, P * T))
        self.col_group = rows
        self.routes_of_od = [np.flatnonzero(self.route_od == k) for k in range(K)]

    @property
    def num_routes(self) -> int:
        return len(self.routes)

    @property
    def num_ods(self) -> int:
        return len(self.od_pairs)

    def odp_index(self, od: tuple[str, str], period: int) -> int:
        if od not in self.od_index:
            raise DemandError(f"unknown OD pair {od[0]} -> {od[1]}")
        if not 0 <= period < self.num_periods:
            raise DemandError(f"entry period {period} outside horizon")
        return period * self.num_ods + self.od_index[od]

    def group_columns(self, group: int) -> np.ndarray:
        t, k = divmod(group, self.num_ods)
        return t * self.num_routes + self.routes_of_od[k]

    def route_label(self, col: int) -> tuple[str, str, int, int]:
        """(origin, destination, route number within OD, entry period) of a column."""
        t, r = divmod(col, self.num_routes)
        k = self.route_od[r]
        number = int(np.searchsorted(self.routes_of_od[k], r))
        o, d = self.od_pairs[k]
        return o, d, number, t


def load_demand(path: str | Path) -> dict[tuple[str, str, int], float]:
    """Read ``origin,destination,entry_period,count`` rows (entry_period 0-based)."""
    out: dict[tuple[str, str, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"origin", "destination", "entry_period", "count"} - set(reader.fieldnames or [])
        if missing:
            raise DemandError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (row["origin"], row["destination"], int(row["entry_period"]))
                count = float(row["count"])
            except ValueError as exc:
                raise DemandError(f"{path}:{lineno}: {exc}") from exc
            if count < 0:
                raise DemandError(f"{path}:{lineno}: negative count")
            out[key] = out.get(key, 0.0) + count
    return out


def write_demand(path: str | Path, demand: Mapping[tuple[str, str, int], float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["origin", "destination", "entry_period", "count"])
        for (o, d, t), c in sorted(demand.items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1])):
            writer.writerow([o, d, t, int(c) if float(c).is_integer() else c])


def build_demand_model(
    network: Network,
    demand: Mapping[tuple[str, str, int], float],
    horizon: Horizon,
    k: int = 3,
    extra_ods: Sequence[tuple[str, str]] = (),
) -> DemandModel:
    ods = sorted({(o, d) for (o, d, _t) in demand} | set(extra_ods))
    routes: list[Route] = []
    route_od = []
    for idx, od in enumerate(ods):
        try:
            found = enumerate_routes(network, od, k)
        except UnreachableODError as exc:
            raise DemandError(f"unreachable OD with positive demand: {od[0]} -> {od[1]}") from exc
        routes.extend(found)
        route_od.extend([idx] * len(found))
    counts = np.zeros(len(ods) * horizon.num_periods)
    od_index = {od: i for i, od in enumerate(ods)}
    for (o, d, t), c in demand.items():
        if not 0 <= t < horizon.num_periods:
            raise DemandError(f"entry period {t} outside horizon of {horizon.num_periods}")
        counts[t * len(ods) + od_index[(o, d)]] += c
    return DemandModel(ods, routes, np.array(route_od, dtype=int), horizon.num_periods, counts)


def _route_link_table(routes: Sequence[Route]) -> np.ndarray:
    width = max(len(r.link_ids) for r in routes)
    table = np.full((len(routes), width), -1, dtype=int)
    for i, r in enumerate(routes):
        table[i, : len(r.link_ids)] = r.link_ids
    return table


def traverse_routes(
    routes: Sequence[Route], link_times: np.ndarray, horizon: Horizon, num_links: int
) -> tuple[RMatrix, np.ndarray]:
    """March every (entry period, route) through its links.

    A driver entering at period ``t1`` starts at time ``t1`` (in period
    units).  Reaching link ``l`` at time ``tau`` puts weight ``1 - frac(tau)``
    on period ``floor(tau)`` and ``frac(tau)`` on the next one; weight past
    the horizon is dropped.  The link's time is interpolated with the same
    weights (clamped to the last period), so route times keep counting after
    the horizon ends.

    Returns the occupancy matrix and route-period travel times in hours.
    """
    T = horizon.num_periods
    E = num_links
    P = len(routes)
    link_times = np.asarray(link_times, dtype=float)
    if link_times.shape != (T, E):
        raise ValueError(f"link_times must have shape {(T, E)}, got {link_times.shape}")
    if not np.all(np.isfinite(link_times)) or np.any(link_times <= 0):
        raise ValueError("link times must be positive and finite")
    table = _route_link_table(routes)
    if table.max() >= E:
        raise ValueError("route references unknown link")
    cols = np.arange(P * T)
    route_of = cols % P
    tau = (cols // P).astype(float)
    hours = np.zeros(P * T)
    rows_out, cols_out, vals_out = [], [], []
    for pos in range(table.shape[1]):
        lid = table[route_of, pos]
        on = lid >= 0
        base = np.floor(tau)
        frac = tau - base
        up = frac > 1.0 - _SNAP
        base[up] += 1.0
        frac[up | (frac < _SNAP)] = 0.0
        p = base.astype(int)
        for shift, weight in ((0, 1.0 - frac), (1, frac)):
            period = p + shift
            keep = on & (weight > 0) & (period < T)
            rows_out.append(period[keep] * E + lid[keep])
            cols_out.append(cols[keep])
            vals_out.append(weight[keep])
        safe = np.where(on, lid, 0)
        lo = link_times[np.minimum(p, T - 1), safe]
        hi = link_times[np.minimum(p + 1, T - 1), safe]
        th = np.where(on, (1.0 - frac) * lo + frac * hi, 0.0)
        hours += th
        tau = tau + th / horizon.period_hours
    matrix = sp.csr_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))), shape=(E * T, P * T)
    )
    matrix.sum_duplicates()
    return RMatrix(matrix, E, P, T), hours


def build_r_matrix(network: Network, routes: Sequence[Route], link_times: np.ndarray, horizon: Horizon) -> RMatrix:
    return traverse_routes(routes, link_times, horizon, network.num_links)[0]


def expected_volumes(R, S) -> np.ndarray:
    """Link-period volumes R S 1.  ``S`` may be a matrix or the row sums S 1."""
    mat = R.matrix if isinstance(R, RMatrix) else R
    S = S.toarray() if sp.issparse(S) else np.asarray(S, dtype=float)
    load = S if S.ndim == 1 else S.sum(axis=1)
    if load.shape[0] != mat.shape[1]:
        raise ValueError(f"dimension mismatch: R has {mat.shape[1]} columns, S has {load.shape[0]} rows")
    return np.asarray(mat @ load).ravel()


def link_times_from_volumes(volumes: np.ndarray, network: Network, horizon: Horizon) -> np.ndarray:
    theta0, cap = network.link_params(horizon.num_periods)
    v = np.asarray(volumes, dtype=float).reshape(horizon.num_periods, network.num_links)
    return bpr_travel_time(theta0, cap, v)


def total_travel_time(volumes: np.ndarray, network: Network, horizon: Horizon | None = None) -> float:
    """Sum of v * theta(v) over link-periods, in vehicle-hours."""
    v = np.asarray(volumes, dtype=float)
    if np.any(v < 0):
        raise ValueError("volumes must be nonnegative")
    T = v.size // network.num_links if horizon is None else horizon.num_periods
    theta0, cap = network.link_params(T)
    v = v.reshape(T, network.num_links)
    return float(np.sum(v * bpr_travel_time(theta0, cap, v)))


def group_minimum(values: np.ndarray, demand: DemandModel) -> tuple[np.ndarray, np.ndarray]:
    """Per OD-period minimum of a route-period vector and its first argmin column."""
    G = demand.num_ods * demand.num_periods
    groups = demand.col_group
    order = np.lexsort((np.arange(values.size), values, groups))
    first = np.ones(order.size, dtype=bool)
    first[1:] = groups[order[1:]] != groups[order[:-1]]
    argmin = np.full(G, -1, dtype=int)
    argmin[groups[order[first]]] = order[first]
    mins = np.full(G, np.inf)
    has = argmin >= 0
    mins[has] = values[argmin[has]]
    return mins, argmin


@dataclass
class UEResult:
    R: RMatrix
    delta: np.ndarray  # minutes, per route-period
    flows: np.ndarray  # vehicles per route-period
    link_times: np.ndarray  # hours, (T, E)
    volumes: np.ndarray
    gap: float
    iterations: int
    converged: bool


def _relative_gap(delta: np.ndarray, flows: np.ndarray, demand: DemandModel, min_flow: float) -> float:
    mins, _ = group_minimum(delta, demand)
    used = flows > min_flow
    if not used.any():
        return 0.0
    ref = mins[demand.col_group[used]]
    return float(np.max((delta[used] - ref) / ref))


def compute_ue_baseline(
    network: Network,
    demand: DemandModel,
    horizon: Horizon,
    method: str = "gp",
    tol: float = 1e-4,
    max_iter: int = 500,
) -> UEResult:
    """Route-flow user equilibrium with a flow-dependent occupancy matrix.

    ``method="gp"`` shifts flow from slower routes to the fastest route of
    each OD-period by a diagonal Newton step (gradient projection);
    ``method="msa"`` averages all-or-nothing loads with step 1/k.
    """
    if method not in ("gp", "msa"):
        raise ValueError(f"unknown UE method {method!r}")
    T, E = horizon.num_periods, network.num_links
    theta0, cap = network.link_params(T)
    groups = demand.col_group
    q = demand.counts
    for g in np.flatnonzero(q > 0):
        if demand.group_columns(g).size == 0:
            raise DemandError("OD-period with positive demand has no route")
    min_flow = 1e-8

    def aon(delta):
        _, arg = group_minimum(delta, demand)
        x = np.zeros(delta.size)
        has = arg >= 0
        x[arg[has]] = q[has]
        return x

    times = theta0.copy()
    R, hours = traverse_routes(demand.routes, times, horizon, E)
    flows = aon(hours)
    gap = np.inf
    it = 0
    damp, prev_excess = 1.0, np.inf
    for it in range(1, max_iter + 1):
        volumes = expected_volumes(R, flows)
        times = bpr_travel_time(theta0, cap, volumes.reshape(T, E))
        R, hours = traverse_routes(demand.routes, times, horizon, E)
        delta = hours * MINUTES_PER_HOUR
        gap = _relative_gap(delta, flows, demand, min_flow)
        if gap < tol or it == max_iter:
            break
        if method == "msa":
            flows = flows + (aon(hours) - flows) / (it + 1)
            continue
        mins, best = group_minimum(hours, demand)
        # simultaneous Newton steps overshoot once routes interact through
        # time-dependent occupancy; shrink the step whenever excess time grows
        excess_time = float(flows @ (hours - mins[groups]))
        if excess_time > prev_excess:
            damp *= GP_SHRINK
        prev_excess = excess_time
        target = best[groups]
        deriv = bpr_derivative(theta0, cap, volumes.reshape(T, E)).ravel()
        diff = (R.matrix - R.matrix[:, target]).tocsc()
        curv = np.asarray(diff.multiply(diff).T @ deriv).ravel()
        excess = hours - hours[target]
        step = np.where(curv > 1e-15, damp * excess / np.maximum(curv, 1e-15), np.inf)
        moving = (target != np.arange(flows.size)) & (flows > 0)
        new = np.where(moving, np.maximum(0.0, flows - step), flows)
        moved = flows - new
        flows = new + np.bincount(target, weights=moved, minlength=flows.size)
    volumes = expected_volumes(R, flows)
    log.info("UE (%s) finished after %d iterations, relative gap %.3g", method, it, gap)
    return UEResult(R, hours * MINUTES_PER_HOUR, flows, times, volumes, float(gap), it, bool(gap < tol))


@dataclass
class TravelTimeTables:
    delta: np.ndarray  # minutes per route-period
    eta: np.ndarray  # minutes per OD-period
    link_times: np.ndarray  # hours, (T, E)
    volumes: np.ndarray  # v_new
    fastest_ue: np.ndarray  # column chosen under the UE times, per OD-period (-1 if none)
    fastest: np.ndarray  # column attaining eta, per OD-period


def route_times_after_choice(ue: UEResult, demand: DemandModel, network: Network, horizon: Horizon) -> TravelTimeTables:
    """Route times when every driver takes the UE-fastest route of their OD-period."""
    _, fastest_ue = group_minimum(ue.delta, demand)
    load = np.zeros(ue.delta.size)
    has = fastest_ue >= 0
    load[fastest_ue[has]] = demand.counts[has]
    v_new = expected_volumes(ue.R, load)
    times = link_times_from_volumes(v_new, network, horizon)
    _, hours = traverse_routes(demand.routes, times, horizon, network.num_links)
    delta = hours * MINUTES_PER_HOUR
    eta, fastest = group_minimum(delta, demand)
    return TravelTimeTables(delta, eta, times, v_new, fastest_ue, fastest)


def min_time_assignment(driver_groups: Sequence[int], eta: np.ndarray) -> tuple[np.ndarray, float]:
    """One-hot OD-period matrix B for a roster and its baseline time (B eta)^T 1.

    ``driver_groups`` holds each driver's OD-period index; an
    :class:`~orgincentive.incentives.Organization` resolved against a
    :class:`DemandModel` provides it via ``org.groups(demand)``.
    """
    groups = np.asarray(driver_groups, dtype=int)
    eta = np.asarray(eta, dtype=float)
    if np.any(groups < 0) or np.any(groups >= eta.size):
        raise DemandError("driver with unknown OD-period")
    if np.any(~np.isfinite(eta[groups])):
        raise DemandError("driver OD-period has no route")
    B = np.zeros((groups.size, eta.size), dtype=int)
    B[np.arange(groups.size), groups] = 1
    return B, float((B @ eta).sum())


def write_travel_times(path: str | Path, tables: TravelTimeTables, demand: DemandModel) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["origin", "destination", "route", "entry_period", "delta_min", "eta_min"])
        for col in range(tables.delta.size):
            o, d, number, t = demand.route_label(col)
            writer.writerow([o, d, number, t, repr(float(tables.delta[col])), repr(float(tables.eta[demand.col_group[col]]))])
