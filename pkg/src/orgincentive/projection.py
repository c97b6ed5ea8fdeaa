"""Integer projection of a relaxed assignment and a small branch-and-bound."""

from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .admm import InfeasibleProblemError, ProblemInstance

log = logging.getLogger(__name__)

INT_TOL = 1e-6
FAIRNESS_RTOL = 1e-12


@dataclass
class MilpInstance:
    """min c^T x  s.t.  A_ub x <= b_ub, A_eq x = b_eq, lb <= x <= ub, x_j integer where flagged."""

    c: np.ndarray
    A_ub: sp.csr_matrix | None
    b_ub: np.ndarray | None
    A_eq: sp.csr_matrix | None
    b_eq: np.ndarray | None
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    names: list[str] | None = None
    offset: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        nv = self.c.size
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (nv,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (nv,)).copy()
        self.integer = np.broadcast_to(np.asarray(self.integer, dtype=bool), (nv,)).copy()
        if self.A_ub is not None:
            self.A_ub = sp.csr_matrix(self.A_ub)
            self.b_ub = np.asarray(self.b_ub, dtype=float)
        if self.A_eq is not None:
            self.A_eq = sp.csr_matrix(self.A_eq)
            self.b_eq = np.asarray(self.b_eq, dtype=float)
        if self.names is None:
            self.names = [f"x{j}" for j in range(nv)]

    @property
    def num_vars(self) -> int:
        return self.c.size

    def is_feasible(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lb - tol) or np.any(x > self.ub + tol):
            return False
        if np.any(np.abs(x[self.integer] - np.round(x[self.integer])) > tol):
            return False
        if self.A_ub is not None and np.any(self.A_ub @ x > self.b_ub + tol * np.maximum(1.0, np.abs(self.b_ub))):
            return False
        if self.A_eq is not None and np.any(np.abs(self.A_eq @ x - self.b_eq) > tol * np.maximum(1.0, np.abs(self.b_eq))):
            return False
        return True

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x) + self.offset

    def write_mps(self, path: str | Path) -> None:
        """Free-format MPS (integer columns wrapped in MARKER lines)."""
        rows = []
        if self.A_ub is not None:
            rows += [("L", f"u{r}") for r in range(self.A_ub.shape[0])]
        if self.A_eq is not None:
            rows += [("E", f"e{r}") for r in range(self.A_eq.shape[0])]
        blocks = [m.tocsc() for m in (self.A_ub, self.A_eq) if m is not None]
        prefixes = [p for p, m in (("u", self.A_ub), ("e", self.A_eq)) if m is not None]
        lines = ["NAME orgincentive", "ROWS", " N obj"] + [f" {kind} {name}" for kind, name in rows]
        lines.append("COLUMNS")
        in_int = False
        marker = 0
        for j, name in enumerate(self.names):
            if self.integer[j] != in_int:
                tag = "INTORG" if self.integer[j] else "INTEND"
                lines.append(f" M{marker} 'MARKER' '{tag}'")
                marker += 1
                in_int = bool(self.integer[j])
            if self.c[j] != 0:
                lines.append(f" {name} obj {float(self.c[j])!r}")
            for prefix, block in zip(prefixes, blocks):
                lo, hi = block.indptr[j], block.indptr[j + 1]
                for r, v in zip(block.indices[lo:hi], block.data[lo:hi]):
                    lines.append(f" {name} {prefix}{r} {float(v)!r}")
        if in_int:
            lines.append(f" M{marker} 'MARKER' 'INTEND'")
        lines.append("RHS")
        if self.offset:
            lines.append(f" rhs obj {-float(self.offset)!r}")
        for prefix, b in (("u", self.b_ub), ("e", self.b_eq)):
            if b is not None:
                lines += [f" rhs {prefix}{r} {float(v)!r}" for r, v in enumerate(b) if v != 0]
        lines.append("BOUNDS")
        for j, name in enumerate(self.names):
            lo, hi = self.lb[j], self.ub[j]
            if lo == hi:
                lines.append(f" FX bnd {name} {float(lo)!r}")
                continue
            if np.isinf(lo):
                lines.append(f" MI bnd {name}")
            elif lo != 0:
                lines.append(f" LO bnd {name} {float(lo)!r}")
            if not np.isinf(hi):
                lines.append(f" UP bnd {name} {float(hi)!r}")
        lines.append("ENDATA")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(order=True)
class BnbNode:
    bound: float
    seq: int
    lb: np.ndarray = field(compare=False, repr=False)
    ub: np.ndarray = field(compare=False, repr=False)
    parent: int = field(compare=False, default=-1)
    x: np.ndarray | None = field(compare=False, default=None, repr=False)


@dataclass
class MilpResult:
    status: str  # optimal | infeasible | time_limit | no_feasible_found
    x: np.ndarray | None
    objective: float
    bound: float
    nodes: int
    trace: list[tuple[int, int, float]] = field(default_factory=list, repr=False)  # (node, parent, bound)

    @property
    def gap(self) -> float:
        if self.x is None:
            return float("inf")
        return max(0.0, self.objective - self.bound)


def _solve_lp(milp: MilpInstance, lb: np.ndarray, ub: np.ndarray):
    res = linprog(
        milp.c,
        A_ub=milp.A_ub,
        b_ub=milp.b_ub,
        A_eq=milp.A_eq,
        b_eq=milp.b_eq,
        bounds=np.column_stack([lb, ub]),
        method="highs",
    )
    if res.status == 0:
        return float(res.fun) + milp.offset, res.x
    if res.status == 2:
        return None, None
    raise RuntimeError(f"LP relaxation failed: {res.message}")


def branch_and_bound(
    milp: MilpInstance,
    time_limit: float | None = None,
    gap_tol: float = 1e-9,
    incumbent: np.ndarray | None = None,
) -> MilpResult:
    """Best-first branch-and-bound on LP relaxations.

    Branches on the integer variable whose LP value is most fractional (ties
    to the lowest index).  A child's bound is never reported below its
    parent's.  ``incumbent`` may seed the search with a known feasible point.
    """
    start = time.perf_counter()
    best_x, best_obj = None, np.inf
    if incumbent is not None and milp.is_feasible(incumbent):
        best_x, best_obj = np.asarray(incumbent, dtype=float), milp.objective(incumbent)
    seq = itertools.count()
    trace: list[tuple[int, int, float]] = []
    bound, x = _solve_lp(milp, milp.lb, milp.ub)
    if bound is None:
        return MilpResult("infeasible", None, np.inf, np.inf, 1, [(0, -1, np.inf)])
    root = BnbNode(bound, next(seq), milp.lb.copy(), milp.ub.copy(), -1, x)
    trace.append((root.seq, -1, bound))
    heap = [root]
    nodes = 1
    global_bound = bound

    def close_enough(b):
        return best_obj - b <= gap_tol * max(1.0, abs(best_obj))

    while heap:
        node = heapq.heappop(heap)
        global_bound = node.bound
        if best_x is not None and close_enough(node.bound):
            heap.clear()
            break
        if time_limit is not None and time.perf_counter() - start > time_limit:
            heapq.heappush(heap, node)
            break
        xi = node.x[milp.integer]
        frac = np.abs(xi - np.round(xi))
        if np.all(frac <= INT_TOL):
            cand = node.x.copy()
            cand[milp.integer] = np.round(cand[milp.integer])
            obj = milp.objective(cand)
            if obj < best_obj:
                best_x, best_obj = cand, obj
            continue
        idx = np.flatnonzero(milp.integer)
        dist = np.abs((xi - np.floor(xi)) - 0.5)
        j = idx[int(np.argmin(dist))]
        v = node.x[j]
        for lo, hi in ((node.lb[j], np.floor(v)), (np.ceil(v), node.ub[j])):
            if lo > hi:
                continue
            lb, ub = node.lb.copy(), node.ub.copy()
            lb[j], ub[j] = lo, hi
            child_bound, cx = _solve_lp(milp, lb, ub)
            nodes += 1
            sid = next(seq)
            if child_bound is None:
                trace.append((sid, node.seq, np.inf))
                continue
            child_bound = max(child_bound, node.bound)
            trace.append((sid, node.seq, child_bound))
            if best_x is not None and close_enough(child_bound):
                continue
            heapq.heappush(heap, BnbNode(child_bound, sid, lb, ub, node.seq, cx))

    if heap:
        global_bound = min(global_bound, heap[0].bound)
        status = "time_limit" if best_x is not None else "no_feasible_found"
    elif best_x is None:
        return MilpResult("infeasible", None, np.inf, np.inf, nodes, trace)
    else:
        status = "optimal"
        global_bound = min(global_bound, best_obj)
    return MilpResult(status, best_x, best_obj, global_bound, nodes, trace)


# ---------------------------------------------------------------------------
# l1 projection


class ProjectionInfeasibleError(InfeasibleProblemError):
    def __init__(self, message: str, driver: int | None = None, od_period: int | None = None):
        super().__init__(message)
        self.driver = driver
        self.od_period = od_period


@dataclass
class DriverClass:
    org: int
    group: int
    bound: float
    drivers: np.ndarray
    cols: np.ndarray  # route-periods allowed by the fairness bound


@dataclass
class ProjectionResult:
    route: np.ndarray  # assigned route-period column per driver
    c: np.ndarray
    distance: float
    status: str
    gap: float
    nodes: int
    problem: ProblemInstance = field(repr=False)

    def S_dense(self, i: int) -> np.ndarray:
        drivers = self.problem.org_drivers(i)
        out = np.zeros((self.problem.num_cols, drivers.size))
        out[self.route[drivers], np.arange(drivers.size)] = 1.0
        return out

    @property
    def u(self) -> np.ndarray:
        p = self.problem
        return np.bincount(p.driver_org * p.num_cols + self.route, minlength=p.n * p.num_cols).reshape(p.n, p.num_cols).astype(float)


def driver_classes(problem: ProblemInstance) -> list[DriverClass]:
    """Interchangeable drivers: same organization, OD-period and fairness bound."""
    p = problem
    D = p.D.tocsr()
    order: dict[tuple[int, int, float], list[int]] = {}
    for j in range(p.num_drivers):
        order.setdefault((int(p.driver_org[j]), int(p.driver_group[j]), float(p.driver_bound[j])), []).append(j)
    classes = []
    for (i, g, bound), members in order.items():
        cols = np.sort(D.indices[D.indptr[g] : D.indptr[g + 1]])
        allowed = cols[p.delta[cols] <= bound * (1.0 + FAIRNESS_RTOL)]
        if allowed.size == 0:
            raise ProjectionInfeasibleError(
                f"driver {members[0]} (organization {i}, OD-period {g}): fairness bound {bound:.6g} excludes every route",
                driver=members[0],
                od_period=g,
            )
        classes.append(DriverClass(i, g, bound, np.array(members), allowed))
    return classes


def build_projection_milp(problem: ProblemInstance, u_star: np.ndarray, classes: list[DriverClass]):
    """Integer route counts per class, l1 auxiliaries per (org, route-period), costs c_i."""
    p = problem
    u_star = np.asarray(u_star, dtype=float).reshape(p.n, p.num_cols)
    xs = [(k, int(col)) for k, cl in enumerate(classes) for col in cl.cols]
    x_index = {key: j for j, key in enumerate(xs)}
    nx = len(xs)
    pairs = sorted({(classes[k].org, col) for k, col in xs})
    pair_index = {key: j for j, key in enumerate(pairs)}
    nd = len(pairs)
    # entries of u* that no class can reach contribute a constant
    reachable = np.zeros((p.n, p.num_cols), dtype=bool)
    for i, col in pairs:
        reachable[i, col] = True
    offset = float(np.abs(u_star[~reachable]).sum())
    n = p.n
    nv = nx + nd + n
    rows, cols, vals, rhs = [], [], [], []

    def add_row(entries, b):
        r = len(rhs)
        for j, v in entries:
            rows.append(r)
            cols.append(j)
            vals.append(v)
        rhs.append(b)

    members: dict[tuple[int, int], list[int]] = {}
    for (k, col), j in x_index.items():
        members.setdefault((classes[k].org, col), []).append(j)
    for (i, col), d in pair_index.items():
        xj = members[(i, col)]
        # u - u* <= d  and  u* - u <= d
        add_row([(j, 1.0) for j in xj] + [(nx + d, -1.0)], u_star[i, col])
        add_row([(j, -1.0) for j in xj] + [(nx + d, -1.0)], -u_star[i, col])
    for i in range(n):
        entries = [(j, p.alpha[i] * p.delta[col]) for (k, col), j in x_index.items() if classes[k].org == i]
        add_row(entries + [(nx + nd + i, -1.0)], p.alpha[i] * p.gamma[i])
    add_row([(nx + nd + i, 1.0) for i in range(n)], p.budget)
    A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), nv))
    b_ub = np.array(rhs)
    eq_rows = [k for k, col in xs]
    A_eq = sp.csr_matrix((np.ones(nx), (eq_rows, np.arange(nx))), shape=(len(classes), nv))
    b_eq = np.array([cl.drivers.size for cl in classes], dtype=float)
    c = np.concatenate([np.zeros(nx), np.ones(nd), np.zeros(n)])
    ub = np.concatenate([[classes[k].drivers.size for k, _ in xs], np.full(nd, np.inf), np.full(n, np.inf)])
    integer = np.concatenate([np.ones(nx, dtype=bool), np.zeros(nd + n, dtype=bool)])
    names = [f"x_{k}_{col}" for k, col in xs] + [f"d_{i}_{col}" for i, col in pairs] + [f"c_{i}" for i in range(n)]
    milp = MilpInstance(c, A_ub, b_ub, A_eq, b_eq, 0.0, ub, integer, names, offset)
    return milp, xs, pairs


def _point(milp: MilpInstance, xs, pairs, counts: np.ndarray, problem: ProblemInstance, u_star: np.ndarray, classes) -> np.ndarray:
    """Full MILP vector for given class counts: tight auxiliaries and minimal costs."""
    p = problem
    u = np.zeros((p.n, p.num_cols))
    for (k, col), x in zip(xs, counts):
        u[classes[k].org, col] += x
    d = np.array([abs(u[i, col] - u_star[i, col]) for i, col in pairs])
    c = p.alpha * np.maximum(0.0, u @ p.delta - p.gamma)
    return np.concatenate([counts, d, c])


def _rounded_counts(xs, classes, problem: ProblemInstance, u_star: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of u* within each class, then cheapest moves back under the budget."""
    p = problem
    left = np.maximum(u_star, 0.0).copy()
    counts = np.zeros(len(xs))
    pos = {key: j for j, key in enumerate(xs)}
    for k, cl in enumerate(classes):
        size = cl.drivers.size
        want = left[cl.org, cl.cols]
        if want.sum() <= 0:
            want = (p.delta[cl.cols] == p.delta[cl.cols].min()).astype(float)
        want = want * size / want.sum()
        y = np.floor(want)
        short = int(size - y.sum())
        if short > 0:
            y[np.argsort(-(want - y), kind="stable")[:short]] += 1
        left[cl.org, cl.cols] = np.maximum(left[cl.org, cl.cols] - y, 0.0)
        for col, v in zip(cl.cols, y):
            counts[pos[(k, int(col))]] = v
    org_time = np.zeros(p.n)
    for (k, col), v in zip(xs, counts):
        org_time[classes[k].org] += v * p.delta[col]
    fastest = [int(cl.cols[np.argmin(p.delta[cl.cols])]) for cl in classes]
    while True:
        c = p.alpha * np.maximum(0.0, org_time - p.gamma)
        if c.sum() <= p.budget:
            return counts
        # move one driver of the paying organization with the largest time saving per move
        best, gain = None, 0.0
        for j, (k, col) in enumerate(xs):
            i = classes[k].org
            if counts[j] > 0 and c[i] > 0 and col != fastest[k]:
                g = p.alpha[i] * (p.delta[col] - p.delta[fastest[k]])
                if g > gain:
                    best, gain = j, g
        if best is None:
            return counts
        k, col = xs[best]
        counts[best] -= 1
        counts[pos[(k, fastest[k])]] += 1
        org_time[classes[k].org] -= p.delta[col] - p.delta[fastest[k]]


def project_to_binary(
    u_star: np.ndarray,
    problem: ProblemInstance,
    time_limit: float | None = None,
    gap_tol: float = 1e-9,
    mps_path: str | Path | None = None,
) -> ProjectionResult:
    """Nearest (l1 on per-organization route counts) integer-feasible assignment.

    Among distance-optimal assignments the one with the smallest total
    incentive is returned.  Costs are re-priced from the final assignment.
    """
    p = problem
    u_star = np.asarray(u_star, dtype=float).reshape(p.n, p.num_cols)
    if not np.all(np.isfinite(u_star)):
        raise ValueError("u_star must be finite")
    classes = driver_classes(p)
    milp, xs, pairs = build_projection_milp(p, u_star, classes)
    if mps_path is not None:
        milp.write_mps(mps_path)
    # seed with the minimum-time plan: fastest admissible route for every class
    seed = np.zeros(len(xs))
    for k, cl in enumerate(classes):
        fastest = cl.cols[np.argmin(p.delta[cl.cols])]
        seed[xs.index((k, int(fastest)))] = cl.drivers.size
    incumbent = _point(milp, xs, pairs, seed, p, u_star, classes)
    rounded = _point(milp, xs, pairs, _rounded_counts(xs, classes, p, u_star), p, u_star, classes)
    if milp.is_feasible(rounded) and milp.objective(rounded) < milp.objective(incumbent):
        incumbent = rounded
    res = branch_and_bound(milp, time_limit, gap_tol, incumbent)
    if res.x is None:
        raise ProjectionInfeasibleError(f"integer projection infeasible ({res.status})")
    distance = res.objective
    # second stage: least total incentive among distance-optimal plans
    nx, nd = len(xs), len(pairs)
    if res.status == "optimal" and p.n > 0:
        row = sp.csr_matrix(np.concatenate([np.zeros(nx), np.ones(nd), np.zeros(p.n)])[None, :])
        slack = max(gap_tol, 1e-9) * max(1.0, abs(distance))
        stage2 = MilpInstance(
            np.concatenate([np.zeros(nx + nd), np.ones(p.n)]),
            sp.vstack([milp.A_ub, row]).tocsr(),
            np.concatenate([milp.b_ub, [distance - milp.offset + slack]]),
            milp.A_eq,
            milp.b_eq,
            milp.lb,
            milp.ub,
            milp.integer,
            milp.names,
        )
        res2 = branch_and_bound(stage2, time_limit, gap_tol, res.x)
        if res2.x is not None:
            res = MilpResult(res.status, res2.x, res.objective, res.bound, res.nodes + res2.nodes)
    counts = np.round(res.x[:nx]).astype(int)
    route = np.full(p.num_drivers, -1)
    fill = {k: 0 for k in range(len(classes))}
    for (k, col), x in zip(xs, counts):
        members = classes[k].drivers
        route[members[fill[k] : fill[k] + x]] = col
        fill[k] += x
    final = _point(milp, xs, pairs, counts.astype(float), p, u_star, classes)
    c = final[nx + nd :]
    distance = milp.objective(final)
    log.info("projection: distance %.6g, %d nodes, status %s", distance, res.nodes, res.status)
    return ProjectionResult(route, c, distance, res.status, res.gap, res.nodes, p)
