"""Independent reference implementations and fixtures shared by the tests.

Nothing here calls into the solver internals being checked: the convex
oracle goes through cvxpy, the projection oracle enumerates every binary
assignment, and paths are found by plain depth-first search.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import scipy.sparse as sp

from orgincentive.admm import ProblemInstance, initial_state
from orgincentive.assignment import build_demand_model, compute_ue_baseline, route_times_after_choice
from orgincentive.network import BPR_ALPHA, Horizon, Link, Network

# ---------------------------------------------------------------------------
# worked example with three links and two routes

APPENDIX_R = np.array(
    [
        [1, 1, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0],
        [0.5, 0, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0.5, 0, 0.5, 0, 0, 0],
        [0, 0, 0, 0, 1, 1],
        [0, 0, 0, 1, 0, 0],
        [0, 0, 0.5, 0, 0.5, 0],
    ]
)


def appendix_network() -> Network:
    links = [
        Link(0, "v1", "v2", 0.1, 1000.0, 5.0),
        Link(1, "v1", "v2", 0.2, 1000.0, 10.0),
        Link(2, "v2", "v3", 0.1, 1000.0, 5.0),
    ]
    return Network(["v1", "v2", "v3"], links)


APPENDIX_HORIZON = Horizon(3, 12.0)


def appendix_r_relabeled() -> np.ndarray:
    """The printed matrix with its second-route columns read as (e2, e3) instead of (e1, e2).

    Within each period block the rows are (e1, e2, e3); in the second-route
    columns the printed occupancy sits one link too early.
    """
    R = APPENDIX_R.copy()
    for col in (1, 3, 5):
        out = np.zeros(9)
        for t in range(3):
            out[3 * t + 1] = R[3 * t + 0, col]
            out[3 * t + 2] = R[3 * t + 1, col]
        R[:, col] = out
    return R


# ---------------------------------------------------------------------------
# paths


def all_simple_paths(network: Network, origin: str, destination: str) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def dfs(node, seen, path):
        if node == destination:
            out.append(tuple(path))
            return
        for link in network.links:
            if link.source == node and link.target not in seen:
                dfs(link.target, seen | {link.target}, path + [link.id])

    dfs(origin, {origin}, [])
    return out


def path_time(network: Network, path) -> float:
    return sum(network.links[i].free_flow_time for i in path)


# ---------------------------------------------------------------------------
# 1-D oracles


def golden_section(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    return 0.5 * (a + b)


def bisect(f, lo: float, hi: float, tol: float = 1e-13) -> float:
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def bpr(theta0, cap, v):
    return theta0 * (1 + BPR_ALPHA * (v / cap) ** 4)


# ---------------------------------------------------------------------------
# relaxed-problem instances


def diamond_problem(budget: float = 5.0, n_org: int = 2, per: int = 6) -> ProblemInstance:
    """Two parallel two-link routes, two entry periods, background on the UE route."""
    links = [Link(0, "a", "b", 0.05, 30), Link(1, "b", "d", 0.05, 30), Link(2, "a", "c", 0.06, 40), Link(3, "c", "d", 0.06, 40)]
    net = Network("abcd", links)
    hz = Horizon(4, 5.0, 2)
    dm = build_demand_model(net, {("a", "d", 0): 40.0, ("a", "d", 1): 50.0}, hz)
    ue = compute_ue_baseline(net, dm, hz)
    tt = route_times_after_choice(ue, dm, net, hz)
    theta0, cap = net.link_params(hz.num_periods)
    org, grp = [], []
    for i in range(n_org):
        for t in range(2):
            g = dm.odp_index(("a", "d"), t)
            org += [i] * per
            grp += [g] * per
    org, grp = np.array(org, dtype=int), np.array(grp, dtype=int)
    gamma = np.array([tt.eta[grp[org == i]].sum() for i in range(n_org)])
    load = np.zeros(dm.D.shape[1])
    for g in range(dm.D.shape[0]):
        load[tt.fastest_ue[g]] += dm.counts[g] - (grp == g).sum()
    R = ue.R.matrix
    return ProblemInstance(
        R, dm.D, tt.delta, tt.eta, theta0.ravel(), cap.ravel(), np.full(n_org, 2.63), gamma, org, grp,
        1.5 * tt.eta[grp], budget, R @ load,
    )  # fmt: skip


def random_problem(seed: int, budgets=(0.0, 5.0, 20.0, 1000.0), bounds=(1.0, 1.2, 1.5, 2.0), calibrate=True) -> ProblemInstance:
    """Small random instance: <= 5 links, <= 2 ODs, <= 3 routes each, 2 periods, <= 8 drivers.

    With ``calibrate`` the capacities are set near the volumes of the
    solver's starting point so the BPR term is neither flat nor explosive.
    """
    rng = np.random.default_rng(seed)
    T = 2
    E = int(rng.integers(3, 6))
    K = int(rng.integers(1, 3))
    P = int(rng.integers(2, 4))
    cols = K * P * T
    D = np.zeros((K * T, cols))
    for t in range(T):
        for k in range(K):
            for r in range(P):
                D[t * K + k, t * K * P + k * P + r] = 1
    R = rng.choice([0, 0, 0.5, 1.0], size=(E * T, cols))
    for c in range(cols):
        if R[:, c].sum() == 0:
            R[rng.integers(E * T), c] = 1
    delta = rng.uniform(5, 15, cols)
    eta = np.array([delta[D[g] > 0].min() for g in range(K * T)])
    n = int(rng.integers(1, 4))
    M = int(rng.integers(n, 9))
    org = np.sort(np.concatenate([np.arange(n), rng.integers(0, n, M - n)]))
    grp = rng.integers(0, K * T, M)
    b = rng.choice(bounds, M)
    gamma = np.array([eta[grp[org == i]].sum() for i in range(n)])
    cap = rng.uniform(1, 4, E * T)
    theta0 = rng.uniform(0.05, 0.2, E * T)
    vbg = rng.uniform(0, 3, E * T)
    alpha = rng.uniform(0.5, 3, n)
    budget = float(rng.choice(budgets))
    p = ProblemInstance(sp.csr_matrix(R), sp.csr_matrix(D), delta, eta, theta0, cap, alpha, gamma, org, grp, b * eta[grp], budget, vbg)
    if calibrate:
        v = p.volumes(initial_state(p).u)
        p.capacity = np.maximum(v, 0.5) * rng.uniform(0.8, 1.5, v.size)
    return p


def _slot_operators(p: ProblemInstance):
    m = p.num_slots
    idx = np.arange(m)
    ones = np.ones(m)
    agg = sp.csr_matrix((ones, (p.slot_org * p.num_cols + p.slot_col, idx)), shape=(p.n * p.num_cols, m))
    per_driver = sp.csr_matrix((ones, (p.slot_driver, idx)), shape=(p.num_drivers, m))
    driver_time = sp.csr_matrix((p.delta[p.slot_col], (p.slot_driver, idx)), shape=(p.num_drivers, m))
    org_time = sp.csr_matrix((p.delta[p.slot_col], (p.slot_org, idx)), shape=(p.n, m))
    to_cols = sp.csr_matrix((ones, (p.slot_col, idx)), shape=(p.num_cols, m))
    return agg, per_driver, driver_time, org_time, p.R @ to_cols


def convex_oracle(p: ProblemInstance) -> tuple[float, np.ndarray]:
    """Optimal total travel time of the relaxed problem without the binarizing term (cvxpy)."""
    import cvxpy as cp

    _, per_driver, driver_time, org_time, Rs = _slot_operators(p)
    S = cp.Variable(p.num_slots)
    c = cp.Variable(p.n, nonneg=True)
    w = Rs @ S + p.background_volume
    # written in w / cap so the conic solver sees well-scaled power cones
    x = cp.multiply(1.0 / p.capacity, w)
    obj = cp.sum(cp.multiply(p.theta0, w) + cp.multiply(p.theta0 * BPR_ALPHA * p.capacity, cp.power(x, 5)))
    cons = [
        S >= 0,
        S <= 1,
        per_driver @ S == 1,
        driver_time @ S <= p.driver_bound,
        c >= cp.multiply(p.alpha, org_time @ S - p.gamma),
        cp.sum(c) <= p.budget,
    ]
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver="CLARABEL")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"oracle status {prob.status}")
    return float(prob.value), np.asarray(S.value)


def enumerate_projection(p: ProblemInstance, u_star: np.ndarray) -> tuple[float, float, list]:
    """(min l1 distance, min total incentive at that distance, optimal route choices) by brute force."""
    choices = [p.slot_col[p.slot_driver == j] for j in range(p.num_drivers)]
    best = (math.inf, math.inf)
    argbest: list = []
    for combo in itertools.product(*choices):
        combo = np.array(combo, dtype=int)
        if np.any(p.delta[combo] > p.driver_bound * (1 + 1e-12)):
            continue
        u = np.zeros((p.n, p.num_cols))
        np.add.at(u, (p.driver_org, combo), 1)
        c = p.alpha * np.maximum(0, u @ p.delta - p.gamma)
        if c.sum() > p.budget * (1 + 1e-12) + 1e-12:
            continue
        key = (float(np.abs(u - u_star).sum()), float(c.sum()))
        if key[0] < best[0] - 1e-9 or (abs(key[0] - best[0]) <= 1e-9 and key[1] < best[1] - 1e-9):
            best, argbest = key, [combo]
        elif abs(key[0] - best[0]) <= 1e-9 and abs(key[1] - best[1]) <= 1e-9:
            argbest.append(combo)
    return best[0], best[1], argbest


def enumerate_milp(c, A_ub, b_ub, A_eq=None, b_eq=None) -> float:
    """Minimum of c.x over binary x by listing all 2^n points (inf when none is feasible)."""
    n = len(c)
    best = math.inf
    for bits in itertools.product((0, 1), repeat=n):
        x = np.array(bits, dtype=float)
        if A_ub is not None and np.any(A_ub @ x > b_ub + 1e-9):
            continue
        if A_eq is not None and np.any(np.abs(A_eq @ x - b_eq) > 1e-9):
            continue
        best = min(best, float(c @ x))
    return best
