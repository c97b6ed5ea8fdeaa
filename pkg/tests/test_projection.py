from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import Bounds, LinearConstraint, milp

from orgincentive.admm import ProblemInstance
from orgincentive.projection import (
    MilpInstance,
    ProjectionInfeasibleError,
    branch_and_bound,
    driver_classes,
    project_to_binary,
)

from oracles import enumerate_milp, enumerate_projection, random_problem


def _two_route_problem(budget=100.0, bounds=(2.0, 2.0, 2.0)):
    R = sp.identity(2, format="csr")
    D = sp.csr_matrix(np.array([[1.0, 1.0]]))
    delta = np.array([10.0, 12.0])
    eta = np.array([10.0])
    return ProblemInstance(R, D, delta, eta, [0.1, 0.1], [5.0, 5.0], [1.0], [30.0], [0, 0, 0], [0, 0, 0], np.array(bounds) * 10, budget)


def _feasible(p, res):
    assert np.all(p.delta[res.route] <= p.driver_bound * (1 + 1e-12))
    assert np.array_equal(p.col_group[res.route], p.driver_group)
    u = res.u
    c = p.alpha * np.maximum(0.0, u @ p.delta - p.gamma)
    assert np.array_equal(res.c, c)
    assert res.c.sum() <= p.budget * (1 + 1e-12) + 1e-12


def test_zero_distance_recovers_assignment():
    p = random_problem(7)
    res0 = project_to_binary(np.zeros((p.n, p.num_cols)), p)
    target = res0.u
    res = project_to_binary(target, p)
    assert res.distance == 0.0
    assert np.array_equal(res.u, target)


def test_three_drivers_two_routes():
    p = _two_route_problem()
    u_star = np.array([[1.4, 1.6]])
    res = project_to_binary(u_star, p)
    ref_d, ref_c, choices = enumerate_projection(p, u_star)
    assert res.distance == pytest.approx(ref_d, abs=1e-12)
    assert res.distance == pytest.approx(0.8, abs=1e-12)
    # (1, 2) is 0.8 away, (2, 1) is 1.2; one extra driver on the slow route costs 4 min at vot 1
    assert res.u.tolist() == [[1.0, 2.0]]
    assert res.c.sum() == pytest.approx(ref_c, abs=1e-12)
    assert res.c.sum() == pytest.approx(4.0, abs=1e-12)
    _feasible(p, res)


def test_fairness_forces_fast_route():
    p = _two_route_problem(bounds=(2.0, 1.0, 1.0))
    res = project_to_binary(np.array([[1.4, 1.6]]), p)
    assert res.u.tolist() == [[2.0, 1.0]]
    assert res.route[1] == 0 and res.route[2] == 0


def test_zero_budget_gives_min_time_plan():
    p = _two_route_problem(budget=0.0)
    res = project_to_binary(np.array([[0.0, 3.0]]), p)
    assert res.u.tolist() == [[3.0, 0.0]]
    assert res.c.tolist() == [0.0]
    ref_d, _, _ = enumerate_projection(p, np.array([[0.0, 3.0]]))
    assert res.distance == ref_d


def test_fairness_infeasible_names_driver():
    p = _two_route_problem(bounds=(2.0, 0.5, 2.0))
    with pytest.raises(ProjectionInfeasibleError) as err:
        driver_classes(p)
    assert err.value.driver == 1 and err.value.od_period == 0
    with pytest.raises(ProjectionInfeasibleError):
        project_to_binary(np.zeros((1, 2)), p)


SMALL_SEEDS = [s for s in range(200) if random_problem(s).num_slots <= 12][:40]


@pytest.mark.parametrize("seed", SMALL_SEEDS)
def test_projection_matches_enumeration(seed):
    p = random_problem(seed)
    rng = np.random.default_rng(1000 + seed)
    u_star = rng.uniform(0, 2, (p.n, p.num_cols)) * (rng.random((p.n, p.num_cols)) < 0.7)
    ref_d, ref_c, _ = enumerate_projection(p, u_star)
    if math.isinf(ref_d):
        with pytest.raises(ProjectionInfeasibleError):
            project_to_binary(u_star, p)
        return
    res = project_to_binary(u_star, p)
    assert res.status == "optimal"
    assert res.distance == pytest.approx(ref_d, abs=1e-9)
    assert res.c.sum() == pytest.approx(ref_c, abs=1e-9)
    _feasible(p, res)


# ---------------------------------------------------------------------------
# branch and bound


def test_integral_root_takes_one_node():
    milp_ = MilpInstance(np.array([1.0, 2.0]), sp.csr_matrix([[-1.0, -1.0]]), np.array([-1.0]), None, None, 0, 1, True)
    res = branch_and_bound(milp_)
    assert res.status == "optimal" and res.nodes == 1
    assert res.x.tolist() == [1.0, 0.0]


def test_contradiction_row_infeasible_at_root():
    milp_ = MilpInstance(np.array([1.0, 1.0]), None, None, sp.csr_matrix([[0.0, 0.0]]), np.array([1.0]), 0, 1, True)
    res = branch_and_bound(milp_)
    assert res.status == "infeasible" and res.nodes == 1


def test_crafted_ten_variable_knapsack():
    values = np.array([23, 31, 29, 44, 53, 38, 63, 85, 89, 82], dtype=float)
    weights = np.array([[92, 57, 49, 68, 60, 43, 67, 84, 87, 72], [12, 40, 33, 8, 27, 51, 19, 22, 36, 14]], dtype=float)
    cap = np.array([269.0, 100.0])
    milp_ = MilpInstance(-values, sp.csr_matrix(weights), cap, None, None, 0, 1, True)
    res = branch_and_bound(milp_)
    assert res.status == "optimal"
    assert res.objective == enumerate_milp(-values, weights, cap)
    assert milp_.is_feasible(res.x)


def _random_milp(rng, n):
    c = rng.integers(-9, 10, n).astype(float)
    m = int(rng.integers(1, 4))
    A = rng.integers(-5, 10, (m, n)).astype(float)
    b = rng.integers(0, 4 * n, m).astype(float)
    if rng.random() < 0.3:
        Aeq = rng.integers(0, 2, (1, n)).astype(float)
        beq = np.array([float(rng.integers(0, n + 1))])
    else:
        Aeq, beq = None, None
    return c, A, b, Aeq, beq


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1_000_000), st.integers(2, 10))
def test_bnb_equals_enumeration_and_bounds_monotone(seed, n):
    rng = np.random.default_rng(seed)
    c, A, b, Aeq, beq = _random_milp(rng, n)
    milp_ = MilpInstance(c, sp.csr_matrix(A), b, None if Aeq is None else sp.csr_matrix(Aeq), beq, 0, 1, True)
    res = branch_and_bound(milp_)
    ref = enumerate_milp(c, A, b, Aeq, beq)
    if math.isinf(ref):
        assert res.status == "infeasible"
    else:
        assert res.status == "optimal"
        assert res.objective == pytest.approx(ref, abs=1e-9)
    bound_of = {node: bound for node, _, bound in res.trace}
    for node, parent, bound in res.trace:
        if parent >= 0:
            assert bound >= bound_of[parent]


def test_time_limit_returns_incumbent_and_gap():
    rng = np.random.default_rng(3)
    n = 40
    values = rng.integers(10, 100, n).astype(float)
    weights = rng.integers(10, 100, (1, n)).astype(float)
    milp_ = MilpInstance(-values, sp.csr_matrix(weights), np.array([weights.sum() / 2]), None, None, 0, 1, True)
    incumbent = np.zeros(n)
    res = branch_and_bound(milp_, time_limit=0.0, incumbent=incumbent)
    assert res.status == "time_limit"
    assert res.x is not None and res.gap > 0


# ---------------------------------------------------------------------------
# MPS export


def _read_mps(text):
    """Minimal free-MPS reader for the subset the writer emits."""
    section = None
    row_kind, cols, rhs, bounds, integer = {}, {}, {}, {}, set()
    order = []
    in_int = False
    for line in text.splitlines():
        if not line.startswith(" "):
            section = line.split()[0]
            continue
        tok = line.split()
        if section == "ROWS":
            row_kind[tok[1]] = tok[0]
        elif section == "COLUMNS":
            if tok[1] == "'MARKER'":
                in_int = tok[2] == "'INTORG'"
                continue
            if tok[0] not in cols:
                cols[tok[0]] = {}
                order.append(tok[0])
            if in_int:
                integer.add(tok[0])
            cols[tok[0]][tok[1]] = float(tok[2])
        elif section == "RHS":
            rhs[tok[1]] = float(tok[2])
        elif section == "BOUNDS":
            lo, hi = bounds.get(tok[2], (0.0, np.inf))
            if tok[0] == "UP":
                hi = float(tok[3])
            elif tok[0] == "LO":
                lo = float(tok[3])
            elif tok[0] == "FX":
                lo = hi = float(tok[3])
            elif tok[0] == "MI":
                lo = -np.inf
            bounds[tok[2]] = (lo, hi)
            if tok[2] not in cols:
                cols[tok[2]] = {}
                order.append(tok[2])
    rows = [r for r, k in row_kind.items() if k != "N"]
    A = np.array([[cols[v].get(r, 0.0) for v in order] for r in rows])
    c = np.array([cols[v].get("obj", 0.0) for v in order])
    b = np.array([rhs.get(r, 0.0) for r in rows])
    lo = np.array([bounds.get(v, (0.0, np.inf))[0] for v in order])
    hi = np.array([bounds.get(v, (0.0, np.inf))[1] for v in order])
    kinds = [row_kind[r] for r in rows]
    return c, A, b, kinds, lo, hi, np.array([v in integer for v in order]), -rhs.get("obj", 0.0)


@pytest.mark.parametrize("seed", [1, 3, 11])
def test_mps_export_solves_to_same_distance(tmp_path, seed):
    p = random_problem(seed)
    rng = np.random.default_rng(seed)
    u_star = rng.uniform(0, 2, (p.n, p.num_cols))
    path = tmp_path / "proj.mps"
    res = project_to_binary(u_star, p, mps_path=path)
    c, A, b, kinds, lo, hi, integer, offset = _read_mps(path.read_text())
    lower = np.where(np.array(kinds) == "E", b, -np.inf)
    ext = milp(c, constraints=LinearConstraint(A, lower, b), bounds=Bounds(lo, hi), integrality=integer.astype(int))
    assert ext.status == 0
    assert ext.fun + offset == pytest.approx(res.distance, abs=1e-7)
