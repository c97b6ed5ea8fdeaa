"""End-to-end scenario runs and parameter sweeps."""

from __future__ import annotations

import contextlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..admm import ADMMParams, InfeasibleProblemError, ProblemInstance, SolverDivergedError, solve_relaxed
from ..assignment import (
    DemandError,
    DemandModel,
    build_demand_model,
    compute_ue_baseline,
    load_demand,
    route_times_after_choice,
    total_travel_time,
    traverse_routes,
)
from ..incentives import IncentiveOutcome, Organization, load_organizations, validate_outcome
from ..network import Horizon, Network, load_network
from ..projection import project_to_binary
from .config import ScenarioConfig
from .synth import make_organizations, synthesize_instance

log = logging.getLogger(__name__)

AXES = ("budgets", "n_orgs", "vot", "participation")
DEVIATION_RTOL = 1e-9


class ScenarioError(RuntimeError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(name, exc) from exc


@dataclass
class BaseInstance:
    """Everything that does not depend on the organization roster."""

    network: Network
    horizon: Horizon
    demand: dict
    model: DemandModel
    delta: np.ndarray
    eta: np.ndarray
    fastest: np.ndarray  # delta-fastest column per OD-period
    fastest_ue: np.ndarray  # UE-fastest column per OD-period
    R: sp.csr_matrix
    theta0: np.ndarray
    capacity: np.ndarray


@dataclass
class PreparedScenario:
    config: ScenarioConfig
    base: BaseInstance
    orgs: list[Organization]
    driver_org: np.ndarray
    driver_group: np.ndarray
    driver_bound: np.ndarray
    driver_info: list[tuple[str, int]]  # (organization id, index in roster)
    background_load: np.ndarray
    baseline_routes: np.ndarray
    baseline_tt: float

    @property
    def alpha(self) -> np.ndarray:
        return np.array([o.vot_per_min * self.config.vot_scale for o in self.orgs])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([o.gamma for o in self.orgs], dtype=float)

    def problem(self, budget: float) -> ProblemInstance:
        b = self.base
        return ProblemInstance(
            b.R, b.model.D, b.delta, b.eta, b.theta0, b.capacity, self.alpha, self.gamma,
            self.driver_org, self.driver_group, self.driver_bound, budget, b.R @ self.background_load,
        )  # fmt: skip

    def travel_time(self, routes: np.ndarray) -> float:
        load = self.background_load + np.bincount(routes, minlength=self.background_load.size)
        return total_travel_time(self.base.R @ load, self.base.network, self.base.horizon)

    def costs(self, routes: np.ndarray) -> np.ndarray:
        t = np.bincount(self.driver_org, weights=self.base.delta[routes], minlength=len(self.orgs))
        return self.alpha * np.maximum(0.0, t - self.gamma)


@dataclass
class ScenarioReport:
    name: str
    axis: str
    value: float | None
    budget: float
    n_orgs: int
    participation: float
    vot_scale: float
    seed: int
    num_org_drivers: int
    baseline_tt: float
    final_tt: float
    decrease_pct: float
    total_cost: float
    deviated_count: int
    cost_per_deviated: float | None
    status: str
    admm_iterations: int
    admm_converged: bool
    admm_max_residual: float | None
    relaxed_tt: float | None
    projection_distance: float | None
    projection_status: str
    org_costs: list[dict] = field(default_factory=list, repr=False)
    assignments: list[dict] = field(default_factory=list, repr=False)
    driver_org: np.ndarray | None = field(default=None, repr=False)
    driver_time: np.ndarray | None = field(default=None, repr=False)
    driver_min: np.ndarray | None = field(default=None, repr=False)
    routes: np.ndarray | None = field(default=None, repr=False)
    error_kind: str | None = field(default=None, repr=False)


REPORT_FIELDS = (
    "name", "axis", "value", "budget", "n_orgs", "participation", "vot_scale", "seed", "num_org_drivers",
    "baseline_tt", "final_tt", "decrease_pct", "total_cost", "deviated_count", "cost_per_deviated", "status",
    "admm_iterations", "admm_converged", "admm_max_residual", "relaxed_tt", "projection_distance", "projection_status",
)  # fmt: skip


def _load_inputs(config: ScenarioConfig):
    if config.synth is not None:
        inst = synthesize_instance(config.synth)
        return inst.network, inst.demand, inst.horizon
    horizon = Horizon(config.num_periods, config.period_length, config.analysis_periods)
    return load_network(config.network), load_demand(config.demand), horizon


def prepare_base(config: ScenarioConfig) -> BaseInstance:
    with stage("load"):
        network, demand, horizon = _load_inputs(config)
    with stage("routes"):
        model = build_demand_model(network, demand, horizon, config.k_routes)
    with stage("baseline"):
        ue = compute_ue_baseline(network, model, horizon, config.ue_method, config.ue_tol, config.ue_max_iter)
        if not ue.converged:
            log.warning("UE baseline stopped at relative gap %.3g", ue.gap)
        tables = route_times_after_choice(ue, model, network, horizon)
        R, _ = traverse_routes(model.routes, tables.link_times, horizon, network.num_links)
        theta0, cap = network.link_params(horizon.num_periods)
    return BaseInstance(
        network, horizon, demand, model, tables.delta, tables.eta, tables.fastest, tables.fastest_ue,
        R.matrix.tocsr(), theta0.ravel(), cap.ravel(),
    )  # fmt: skip


def _organizations(config: ScenarioConfig, base: BaseInstance) -> list[Organization]:
    if config.orgs is not None:
        return load_organizations(config.orgs)
    return make_organizations(
        base.demand, base.horizon, config.n_orgs, config.participation, config.seed, config.vot, config.b_factor
    )


def prepare(config: ScenarioConfig, base: BaseInstance | None = None) -> PreparedScenario:
    base = base or prepare_base(config)
    with stage("organizations"):
        orgs_all = _organizations(config, base)
        model = base.model
        frozen = [o for o in orgs_all if o.background]
        orgs = [o for o in orgs_all if not o.background]
        for org in orgs_all:
            for d in org.drivers:
                if d.od not in model.od_index:
                    raise DemandError(f"organization {org.id}: OD {d.origin}->{d.destination} has no demand")
        org_count = np.zeros(model.counts.size)
        org_of, group_of, bound_of, info = [], [], [], []
        for i, org in enumerate(orgs):
            org.attach_baseline(model, base.eta)
            groups = org.groups(model)
            np.add.at(org_count, groups, 1)
            org_of.extend([i] * len(org))
            group_of.extend(groups)
            bound_of.extend(org.b * base.eta[groups])
            info.extend((org.id, j) for j in range(len(org)))
        if np.any(org_count > model.counts + 1e-9):
            g = int(np.argmax(org_count - model.counts))
            raise DemandError(f"organization drivers exceed demand at OD-period {g}")
        if frozen:
            log.info("%d background organization(s) kept on UE routes", len(frozen))
        bg = np.zeros(model.D.shape[1])
        has = base.fastest_ue >= 0
        np.add.at(bg, base.fastest_ue[has], (model.counts - org_count)[has])
        group_of = np.array(group_of, dtype=int)
        org_of = np.array(org_of, dtype=int)
        # same summation order as PreparedScenario.costs, so the min-time plan prices to exactly zero
        gamma = np.bincount(org_of, weights=base.eta[group_of], minlength=len(orgs))
        for org, g in zip(orgs, gamma):
            org.gamma = float(g)
        baseline_routes = base.fastest[group_of] if group_of.size else np.zeros(0, dtype=int)
    prep = PreparedScenario(
        config, base, orgs, org_of, group_of, np.array(bound_of, dtype=float), info,
        bg, baseline_routes, 0.0,
    )  # fmt: skip
    prep.baseline_tt = prep.travel_time(baseline_routes)
    return prep


@dataclass
class _Plan:
    routes: np.ndarray
    tt: float
    costs: np.ndarray


def solve_prepared(
    prep: PreparedScenario,
    budget: float,
    carry: _Plan | None = None,
    axis: str = "",
    value: float | None = None,
    name: str | None = None,
) -> tuple[ScenarioReport, _Plan]:
    cfg = prep.config
    status = "optimized"
    diag = {"admm_iterations": 0, "admm_converged": False, "admm_max_residual": None, "relaxed_tt": None,
            "projection_distance": None, "projection_status": "skipped"}  # fmt: skip
    baseline = _Plan(prep.baseline_routes, prep.baseline_tt, np.zeros(len(prep.orgs)))
    if budget <= 0 or prep.driver_org.size == 0:
        plan = baseline
        status = "no_budget" if budget <= 0 else "no_participants"
    else:
        problem = prep.problem(budget)
        with stage("relaxed"):
            params = ADMMParams(cfg.rho, cfg.lambda_tilde, cfg.max_iters, cfg.tol, cfg.anneal_iters)
            sol = solve_relaxed(problem, params)
        diag.update(admm_iterations=int(sol.iterations), admm_converged=bool(sol.converged),
                    admm_max_residual=float(sol.max_residual), relaxed_tt=float(sol.travel_time))  # fmt: skip
        with stage("projection"):
            proj = project_to_binary(sol.u, problem, cfg.time_limit)
        diag.update(projection_distance=float(proj.distance), projection_status=str(proj.status))
        routes = proj.route
        plan = _Plan(routes, prep.travel_time(routes), prep.costs(routes))
        if plan.tt > prep.baseline_tt:
            plan, status = baseline, "fallback_baseline"
    if carry is not None and carry.tt < plan.tt and carry.costs.sum() <= budget:
        plan, status = carry, "carried_over"
    with stage("validate"):
        _check_plan(prep, plan, budget)
    report = _report(prep, plan, budget, status, diag, axis, value, name or cfg.name)
    return report, plan


def _check_plan(prep: PreparedScenario, plan: _Plan, budget: float) -> None:
    b = prep.base
    if np.any(b.model.col_group[plan.routes] != prep.driver_group):
        raise AssertionError("driver assigned outside their OD-period")
    if np.any(b.delta[plan.routes] > prep.driver_bound * (1 + 1e-12)):
        raise AssertionError("fairness bound violated")
    per_org = []
    for i in range(len(prep.orgs)):
        drivers = np.flatnonzero(prep.driver_org == i)
        S = sp.csr_matrix((np.ones(drivers.size), (plan.routes[drivers], np.arange(drivers.size))), shape=(b.delta.size, drivers.size))
        per_org.append(S)
    orgs = [_priced(o, prep.config.vot_scale) for o in prep.orgs]
    problems = validate_outcome(IncentiveOutcome(plan.costs, budget), orgs, per_org, b.delta)
    if problems:
        raise AssertionError("; ".join(problems))
    if not np.allclose(plan.costs, prep.costs(plan.routes), rtol=0, atol=0):
        raise AssertionError("incentive differs from its closed form")


def _priced(org: Organization, scale: float) -> Organization:
    out = Organization(org.id, org.vot_per_min * scale, org.drivers, org.background, org.B, org.gamma)
    return out


def _report(prep, plan, budget, status, diag, axis, value, name) -> ScenarioReport:
    cfg, b = prep.config, prep.base
    route_min = b.delta[plan.routes]
    od_min = b.eta[prep.driver_group]
    deviated = route_min > od_min * (1 + DEVIATION_RTOL)
    count = int(deviated.sum())
    total = float(plan.costs.sum())
    decrease = 0.0 if prep.baseline_tt == 0 else 100.0 * (prep.baseline_tt - plan.tt) / prep.baseline_tt
    org_costs = []
    for i, org in enumerate(prep.orgs):
        sel = prep.driver_org == i
        org_costs.append({
            "org": org.id, "vot_per_min": org.vot_per_min * cfg.vot_scale, "drivers": int(sel.sum()),
            "baseline_min": float(org.gamma), "assigned_min": float(route_min[sel].sum()), "cost": float(plan.costs[i]),
        })  # fmt: skip
    assignments = []
    for j, (org_id, k) in enumerate(prep.driver_info):
        o, d, number, t = b.model.route_label(int(plan.routes[j]))
        assignments.append({
            "org": org_id, "driver": k, "origin": o, "destination": d, "entry_period": t, "route": number,
            "route_min": float(route_min[j]), "fastest_min": float(od_min[j]), "deviated": bool(deviated[j]),
        })  # fmt: skip
    return ScenarioReport(
        name=name, axis=axis, value=None if value is None else float(value), budget=float(budget),
        n_orgs=len(prep.orgs), participation=float(cfg.participation), vot_scale=float(cfg.vot_scale),
        seed=int(cfg.seed), num_org_drivers=int(prep.driver_org.size), baseline_tt=float(prep.baseline_tt),
        final_tt=float(plan.tt), decrease_pct=float(decrease), total_cost=total, deviated_count=count,
        cost_per_deviated=(total / count) if count else None, status=status, **diag,
        org_costs=org_costs, assignments=assignments, driver_org=prep.driver_org.copy(),
        driver_time=route_min, driver_min=od_min, routes=plan.routes.copy(),
    )  # fmt: skip


def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    prep = prepare(config)
    report, _ = solve_prepared(prep, config.budget)
    return report


def error_kind(exc: BaseException) -> str:
    """'infeasible', 'diverged' or 'error' for a (possibly stage-wrapped) exception."""
    cause = exc.cause if isinstance(exc, ScenarioError) else exc
    if isinstance(cause, InfeasibleProblemError):
        return "infeasible"
    if isinstance(cause, SolverDivergedError):
        return "diverged"
    return "error"


def _cell_name(config: ScenarioConfig, axis: str, value: float) -> str:
    return f"{config.name}_{'budget' if axis == 'budgets' else axis}_{value:g}"


def _failed(config: ScenarioConfig, axis: str, value, exc: ScenarioError) -> ScenarioReport:
    nan = float("nan")
    return ScenarioReport(
        _cell_name(config, axis, value), axis, float(value), float(config.budget), int(config.n_orgs),
        float(config.participation), float(config.vot_scale), int(config.seed), 0, nan, nan, nan, nan, 0, None, f"failed: {exc}", 0, False, None, None,
        None, "skipped", error_kind=error_kind(exc),
    )  # fmt: skip


def sweep(config: ScenarioConfig, axis: str, values: Sequence[float], workers: int = 1) -> list[ScenarioReport]:
    """One run per value on a shared instance and driver population.

    Budgets are solved in increasing order and a plan found at a smaller
    budget is kept whenever it beats the new one (it stays affordable), so
    the decrease is nondecreasing in the budget.  Reports come back in the
    order of ``values``.  Other axes are independent solves and may run
    in ``workers`` processes.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    base = prepare_base(config)
    reports: dict[int, ScenarioReport] = {}
    if axis == "budgets":
        prep = prepare(config, base)
        carry = None
        for idx in sorted(range(len(values)), key=lambda k: values[k]):
            v = float(values[idx])
            try:
                rep, plan = solve_prepared(prep, v, carry, axis, v, _cell_name(config, axis, v))
                carry = plan if carry is None or plan.tt <= carry.tt else carry
            except ScenarioError as exc:
                log.error("sweep cell %s=%g failed: %s", axis, v, exc)
                rep = _failed(config.replace(budget=v), axis, v, exc)
            reports[idx] = rep
        return [reports[k] for k in range(len(values))]
    cells = [(config, base, axis, v) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


def _sweep_cell(cell) -> ScenarioReport:
    config, base, axis, v = cell
    key = {"n_orgs": "n_orgs", "vot": "vot_scale", "participation": "participation"}[axis]
    cfg = config.replace(**{key: int(v) if axis == "n_orgs" else float(v)})
    try:
        prep = prepare(cfg, base)
        rep, _ = solve_prepared(prep, cfg.budget, None, axis, float(v), _cell_name(config, axis, v))
    except ScenarioError as exc:
        log.error("sweep cell %s=%g failed: %s", axis, v, exc)
        rep = _failed(cfg, axis, v, exc)
    return rep
