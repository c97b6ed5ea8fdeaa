"""ADMM for the relaxed organization-level incentive problem.

Assignment blocks (S, W, H, Z and their multipliers) are stored *packed*:
one entry per admissible (driver, route-period) pair, i.e. the routes of the
driver's OD pair at the driver's entry period.  Entries outside that set are
structural zeros and never become variables.  The ``*_update`` functions at
the bottom of the module operate on dense matrices and are what the packed
kernels reduce to when every entry is admissible.

Update order per iteration: omega, S, beta, c~ (first block), then u, W, H,
Z, beta~ (second block), then all ten multipliers.  The two groups do not
share constraints internally, so the scheme is a two-block ADMM.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.optimize import linprog

from .network import BPR_ALPHA

log = logging.getLogger(__name__)

RESIDUAL_NAMES = ("assign", "volume", "demand", "colsum", "copy_w", "fairness", "incentive", "copy_h", "budget", "copy_z")
DIVERGENCE_LIMIT = 1e6
STATE_VERSION = 1


class InfeasibleProblemError(ValueError):
    pass


class SolverDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# problem data


@dataclass
class ProblemInstance:
    R: sp.csr_matrix  # (E*T) x (P*T)
    D: sp.csr_matrix  # (K*T) x (P*T)
    delta: np.ndarray  # route-period times, minutes
    eta: np.ndarray  # OD-period minimum times, minutes
    theta0: np.ndarray  # free-flow time per link-period row, hours
    capacity: np.ndarray  # capacity per link-period row
    alpha: np.ndarray  # VOT per organization, $/min
    gamma: np.ndarray  # baseline minimum time per organization
    driver_org: np.ndarray
    driver_group: np.ndarray  # OD-period of each driver
    driver_bound: np.ndarray  # b_j * eta of the driver's OD-period
    budget: float
    background_volume: np.ndarray | None = None
    slot_driver: np.ndarray = field(init=False)
    slot_col: np.ndarray = field(init=False)
    col_group: np.ndarray = field(init=False, repr=False)
    Rt: sp.csr_matrix = field(init=False, repr=False)
    Dt: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.R = sp.csr_matrix(self.R)
        self.D = sp.csr_matrix(self.D)
        self.delta = np.asarray(self.delta, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.driver_org = np.asarray(self.driver_org, dtype=int)
        self.driver_group = np.asarray(self.driver_group, dtype=int)
        self.driver_bound = np.asarray(self.driver_bound, dtype=float)
        self.theta0 = np.broadcast_to(np.asarray(self.theta0, dtype=float), (self.R.shape[0],)).copy()
        self.capacity = np.broadcast_to(np.asarray(self.capacity, dtype=float), (self.R.shape[0],)).copy()
        if self.background_volume is None:
            self.background_volume = np.zeros(self.R.shape[0])
        self.background_volume = np.asarray(self.background_volume, dtype=float)
        if self.R.shape[1] != self.D.shape[1] or self.delta.size != self.R.shape[1]:
            raise ValueError("R, D and delta disagree on the number of route-periods")
        if self.alpha.size != self.gamma.size:
            raise ValueError("alpha and gamma must have one entry per organization")
        if self.driver_org.size and self.driver_org.max() >= self.n:
            raise ValueError("driver assigned to unknown organization")
        if np.any(np.diff(self.driver_org) < 0):
            raise ValueError("drivers must be ordered by organization")
        D = self.D.tocsr()
        drv, col = [], []
        for j, g in enumerate(self.driver_group):
            cols = D.indices[D.indptr[g] : D.indptr[g + 1]]
            if cols.size == 0:
                raise InfeasibleProblemError(f"driver {j}: OD-period {g} has no route")
            cols = np.sort(cols)
            drv.append(np.full(cols.size, j))
            col.append(cols)
        self.Rt = self.R.T.tocsr()
        self.Dt = self.D.T.tocsr()
        coo = self.D.tocoo()
        self.col_group = np.full(self.num_cols, -1)
        self.col_group[coo.col] = coo.row
        self.slot_driver = np.concatenate(drv) if drv else np.zeros(0, dtype=int)
        self.slot_col = np.concatenate(col) if col else np.zeros(0, dtype=int)

    @property
    def n(self) -> int:
        return self.alpha.size

    @property
    def num_drivers(self) -> int:
        return self.driver_org.size

    @property
    def num_slots(self) -> int:
        return self.slot_col.size

    @property
    def num_cols(self) -> int:
        return self.R.shape[1]

    @property
    def num_rows(self) -> int:
        return self.R.shape[0]

    @property
    def num_groups(self) -> int:
        return self.D.shape[0]

    @property
    def slot_org(self) -> np.ndarray:
        return self.driver_org[self.slot_driver]

    @property
    def q(self) -> np.ndarray:
        """Drivers per OD-period for every organization, shape (n, K*T)."""
        key = self.driver_org * self.num_groups + self.driver_group
        return np.bincount(key, minlength=self.n * self.num_groups).reshape(self.n, self.num_groups).astype(float)

    def org_drivers(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.driver_org == i)

    def _org_slots(self, i: int) -> tuple[np.ndarray, np.ndarray, int]:
        drivers = self.org_drivers(i)
        sel = self.driver_org[self.slot_driver] == i
        first = int(drivers[0]) if drivers.size else 0
        return sel, self.slot_driver[sel] - first, drivers.size

    def dense(self, packed: np.ndarray, i: int) -> np.ndarray:
        """Expand a packed slot vector into organization ``i``'s (P*T) x |N_i| matrix."""
        sel, local, m = self._org_slots(i)
        out = np.zeros((self.num_cols, m))
        out[self.slot_col[sel], local] = packed[sel]
        return out

    def pack(self, dense: Sequence[np.ndarray]) -> np.ndarray:
        out = np.empty(self.num_slots)
        for i, mat in enumerate(dense):
            sel, local, _ = self._org_slots(i)
            out[sel] = np.asarray(mat)[self.slot_col[sel], local]
        return out

    def row_sums(self, packed: np.ndarray) -> np.ndarray:
        """S_i 1 for every organization, shape (n, P*T)."""
        key = self.slot_org * self.num_cols + self.slot_col
        return np.bincount(key, weights=packed, minlength=self.n * self.num_cols).reshape(self.n, self.num_cols)

    def driver_sums(self, packed: np.ndarray) -> np.ndarray:
        return np.bincount(self.slot_driver, weights=packed, minlength=self.num_drivers)

    def volumes(self, u: np.ndarray) -> np.ndarray:
        return self.R @ np.asarray(u).sum(axis=0) + self.background_volume

    def travel_time(self, volumes: np.ndarray) -> float:
        v = np.maximum(volumes, 0.0)
        return float(np.sum(v * self.theta0 * (1.0 + BPR_ALPHA * (v / self.capacity) ** 4)))


# ---------------------------------------------------------------------------
# scalar / closed-form subproblems


def omega_subproblem(a, lambda2, rho: float, theta0, capacity, tol: float = 1e-9, max_iter: int = 100) -> np.ndarray:
    """argmin_{w >= 0} w*theta(w) + lambda2 (w - a) + rho/2 (w - a)^2, elementwise.

    The stationarity function is convex and increasing on w >= 0, so Newton
    from the right end of the bracket [0, max(0, a - lambda2/rho)] never
    overshoots; bisection takes over if rounding pushes a step outside.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    a, lambda2, theta0, capacity = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, lambda2, theta0, capacity)))
    scalar = a.ndim == 0
    a, lambda2, theta0, capacity = (np.atleast_1d(x).astype(float) for x in (a, lambda2, theta0, capacity))

    def grad(w):
        return theta0 * (1.0 + 5 * BPR_ALPHA * (w / capacity) ** 4) + lambda2 + rho * (w - a)

    def hess(w):
        return theta0 * 20 * BPR_ALPHA * w**3 / capacity**4 + rho

    hi = np.maximum(0.0, a - lambda2 / rho)
    lo = np.zeros_like(hi)
    active = grad(lo) < 0
    w = np.where(active, hi, 0.0)
    for _ in range(max_iter):
        if not active.any():
            break
        g = grad(w)
        done = np.abs(g) <= tol
        active &= ~done
        hi = np.where(active & (g > 0), w, hi)
        lo = np.where(active & (g < 0), w, lo)
        step = w - g / hess(w)
        outside = (step <= lo) | (step >= hi)
        step = np.where(outside, 0.5 * (lo + hi), step)
        stalled = np.abs(step - w) <= 1e-15 * np.maximum(1.0, w)
        w = np.where(active, step, w)
        active &= ~stalled
    return float(w[0]) if scalar else w


def solve_c_block(a_shift: np.ndarray, b_shift: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimizer of ||c - mu - a'||^2 + (sum(c) - b')^2 over c, mu >= 0.

    Optimal mu is max(0, c - a'); what remains is a one-dimensional search for
    the common shift y = max(0, sum(c) - b') solved at sorted breakpoints.
    """
    a_shift = np.asarray(a_shift, dtype=float)
    n = a_shift.size
    pos = np.maximum(a_shift, 0.0)
    if pos.sum() <= b_shift:
        c = pos + (b_shift - pos.sum()) / n
    else:
        s = np.sort(a_shift)[::-1]
        csum = np.concatenate(([0.0], np.cumsum(s)))
        y = 0.0
        for k in range(n + 1):
            y = (csum[k] - b_shift) / (k + 1)
            upper_ok = k == 0 or s[k - 1] > y
            lower_ok = k == n or y >= s[k]
            if upper_ok and lower_ok and y >= 0:
                break
        c = np.maximum(0.0, a_shift - y)
    mu = np.maximum(0.0, c - a_shift)
    return c, mu


def z_projection(Y: np.ndarray, rho: float, lambda_tilde: float, upper=1.0) -> np.ndarray:
    if rho > lambda_tilde:
        return np.clip(Y, 0.0, upper)
    # concave case: Y maximizes the parabola, the farther endpoint minimizes it
    return np.where(Y <= 0.5 * upper, upper, 0.0) * np.ones_like(Y)


def regularizer_value(X, lambda_tilde: float = 1.0) -> float:
    """-(lambda_tilde/2) * sum x (x - 1); zero exactly on binary matrices."""
    X = X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)
    return float(-0.5 * lambda_tilde * np.sum(X * (X - 1.0)))


# ---------------------------------------------------------------------------
# factor cache


class UFactor:
    """Solver for (I + R~^T R~ + D~^T D~ + (Delta a~)(Delta a~)^T) x = b.

    The block-diagonal part I + D^T D is the same for every organization and
    is inverted group by group; R~ and Delta a~ enter through a Woodbury
    correction whose capacitance matrix has size |E||T| + n.
    """

    def __init__(self, R: sp.csr_matrix, D: sp.csr_matrix, delta: np.ndarray, alpha: np.ndarray):
        self.R = sp.csr_matrix(R)
        self.Rt = self.R.T.tocsr()
        self.delta = np.asarray(delta, dtype=float)
        self.alpha = np.asarray(alpha, dtype=float)
        self.n = self.alpha.size
        D = sp.csc_matrix(D)
        self.col_group = np.full(D.shape[1], -1)
        counts = np.diff(D.indptr)
        if np.any(counts > 1):
            raise ValueError("each route-period must belong to one OD-period")
        has = counts == 1
        self.col_group[has] = D.indices[D.indptr[:-1][has]]
        self.group_size = np.bincount(self.col_group[has], minlength=D.shape[0]).astype(float)
        self._has_group = has
        Rt = self.R.T.toarray()
        MRt = self.apply_m(Rt.T).T
        RMRt = np.asarray(self.R @ MRt)
        Md = self.apply_m(self.delta)
        RMd = self.R @ Md
        dMd = float(self.delta @ Md)
        E = self.R.shape[0]
        C = np.eye(E + self.n)
        C[:E, :E] += self.n * RMRt
        C[:E, E:] += np.outer(RMd, self.alpha)
        C[E:, :E] += np.outer(self.alpha, RMd)
        C[E:, E:] += np.diag(self.alpha**2 * dMd)
        self.capacitance = la.cho_factor(C)

    def apply_m(self, x: np.ndarray) -> np.ndarray:
        """(I + D^T D)^{-1} along the last axis."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = flat.copy()
        G = self.group_size.size
        g = self.col_group[self._has_group]
        keys = (np.arange(flat.shape[0])[:, None] * G + g[None, :]).ravel()
        sums = np.bincount(keys, weights=flat[:, self._has_group].ravel(), minlength=flat.shape[0] * G)
        scaled = (sums.reshape(-1, G) / (1.0 + self.group_size))
        out[:, self._has_group] -= scaled[:, g]
        return out.reshape(x.shape)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = u.copy()
        G = self.group_size.size
        g = self.col_group[self._has_group]
        keys = (np.arange(self.n)[:, None] * G + g[None, :]).ravel()
        sums = np.bincount(keys, weights=u[:, self._has_group].ravel(), minlength=self.n * G).reshape(self.n, G)
        out[:, self._has_group] += sums[:, g]
        Ru = self.R @ u.sum(axis=0)
        out += (self.Rt @ Ru)[None, :]
        out += np.outer(self.alpha**2 * (u @ self.delta), self.delta)
        return out

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = self.apply_m(b)
        rhs = np.concatenate([self.R @ y.sum(axis=0), self.alpha * (y @ self.delta)])
        z = la.cho_solve(self.capacitance, rhs)
        E = self.R.shape[0]
        Uz = (self.Rt @ z[:E])[None, :] + np.outer(self.alpha * z[E:], self.delta)
        return y - self.apply_m(Uz)


@dataclass
class FactorCache:
    u: UFactor
    c_pinv: np.ndarray  # pseudo-inverse of I~^T I~ + 1~ 1~^T (singular for n >= 2)
    slot_count: np.ndarray  # admissible routes per driver
    slot_delta_sq: np.ndarray  # sum of delta^2 over each driver's admissible routes
    row_count: np.ndarray  # admissible drivers per (organization, route-period)

    @staticmethod
    def w_inverse(m: int) -> np.ndarray:
        """(1 1^T + I)^{-1} = I - 1 1^T / (1 + m)."""
        return np.eye(m) - np.ones((m, m)) / (1.0 + m)

    @staticmethod
    def h_inverse(delta: np.ndarray) -> np.ndarray:
        """(delta delta^T + I)^{-1} = I - delta delta^T / (1 + delta^T delta)."""
        delta = np.asarray(delta, dtype=float)
        return np.eye(delta.size) - np.outer(delta, delta) / (1.0 + delta @ delta)


def c_block_matrix(n: int) -> np.ndarray:
    I_t = np.hstack([np.eye(n), -np.eye(n)])
    one_t = np.concatenate([np.ones(n), np.zeros(n)])
    return I_t.T @ I_t + np.outer(one_t, one_t)


def precompute_factorizations(problem: ProblemInstance, rho: float = 1.0) -> FactorCache:
    if rho <= 0:
        raise ValueError("rho must be positive")
    p = problem
    key = p.slot_org * p.num_cols + p.slot_col
    return FactorCache(
        u=UFactor(p.R, p.D, p.delta, p.alpha),
        c_pinv=np.linalg.pinv(c_block_matrix(p.n)),
        slot_count=np.bincount(p.slot_driver, minlength=p.num_drivers).astype(float),
        slot_delta_sq=np.bincount(p.slot_driver, weights=p.delta[p.slot_col] ** 2, minlength=p.num_drivers),
        row_count=np.bincount(key, minlength=p.n * p.num_cols).astype(float),
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class SolverState:
    S: np.ndarray
    W: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    u: np.ndarray  # (n, P*T)
    omega: np.ndarray
    beta: np.ndarray  # per driver
    c: np.ndarray
    mu: np.ndarray
    beta_tilde: float
    lam1: np.ndarray  # (n, P*T)
    lam2: np.ndarray
    lam3: np.ndarray  # (n, K*T)
    lam4: np.ndarray  # per driver
    Lam5: np.ndarray  # packed
    lam6: np.ndarray  # per driver
    lam7: np.ndarray  # per organization
    Lam8: np.ndarray
    lam9: float
    Lam10: np.ndarray
    rho: float = 1.0
    lambda_tilde: float = 0.0
    iteration: int = 0

    def copy(self) -> "SolverState":
        return SolverState(**{f.name: (np.copy(v) if isinstance(v := getattr(self, f.name), np.ndarray) else v) for f in fields(self)})

    def to_json(self) -> str:
        payload = {"version": STATE_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            payload[f.name] = {"shape": list(v.shape), "data": v.ravel().tolist()} if isinstance(v, np.ndarray) else v
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "SolverState":
        payload = json.loads(text)
        if payload.pop("version", None) != STATE_VERSION:
            raise ValueError("unsupported solver state version")
        kwargs = {}
        for name, v in payload.items():
            kwargs[name] = np.array(v["data"], dtype=float).reshape(v["shape"]) if isinstance(v, dict) else v
        return cls(**kwargs)


def initial_state(problem: ProblemInstance, rho: float = 1.0, lambda_tilde: float = 0.0) -> SolverState:
    p = problem
    counts = np.bincount(p.slot_driver, minlength=p.num_drivers).astype(float)
    S = 1.0 / counts[p.slot_driver]
    u = p.row_sums(S)
    omega = p.volumes(u)
    hd = p.driver_sums(S * p.delta[p.slot_col])
    beta = np.maximum(0.0, p.driver_bound - hd)
    a = p.alpha * (u @ p.delta - p.gamma)
    c = np.maximum(0.0, a)
    mu = np.maximum(0.0, c - a)
    return SolverState(
        S=S, W=S.copy(), H=S.copy(), Z=S.copy(), u=u, omega=omega, beta=beta, c=c, mu=mu,
        beta_tilde=max(0.0, p.budget - c.sum()),
        lam1=np.zeros_like(u), lam2=np.zeros_like(omega), lam3=np.zeros((p.n, p.num_groups)),
        lam4=np.zeros(p.num_drivers), Lam5=np.zeros_like(S), lam6=np.zeros(p.num_drivers),
        lam7=np.zeros(p.n), Lam8=np.zeros_like(S), lam9=0.0, Lam10=np.zeros_like(S),
        rho=rho, lambda_tilde=lambda_tilde,
    )  # fmt: skip


# ---------------------------------------------------------------------------
# packed block updates


def _s_step(st: SolverState, p: ProblemInstance, cache: FactorCache) -> np.ndarray:
    rho = st.rho
    org, col = p.slot_org, p.slot_col
    X = -st.lam1[org, col] - st.Lam5 - st.Lam8 - st.Lam10 + rho * (st.u[org, col] + st.W + st.H + st.Z)
    key = org * p.num_cols + col
    rs = np.bincount(key, weights=X, minlength=p.n * p.num_cols)
    return (X - rs[key] / (3.0 + cache.row_count[key])) / (3.0 * rho)


def _beta_step(st: SolverState, p: ProblemInstance) -> np.ndarray:
    hd = p.driver_sums(st.H * p.delta[p.slot_col])
    return np.maximum(0.0, p.driver_bound - hd - st.lam6 / st.rho)


def _c_step(st: SolverState, p: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    a = p.alpha * (st.u @ p.delta - p.gamma)
    return solve_c_block(a + st.lam7 / st.rho, p.budget - st.beta_tilde - st.lam9 / st.rho)


def _u_step(st: SolverState, p: ProblemInstance, cache: FactorCache) -> np.ndarray:
    rho = st.rho
    shared = p.Rt @ (st.lam2 + rho * (st.omega - p.background_volume))
    inc = -st.lam7 + rho * (p.alpha * p.gamma + st.c - st.mu)
    rhs = (
        st.lam1
        + rho * p.row_sums(st.S)
        + shared[None, :]
        + (p.Dt @ (rho * p.q - st.lam3).T).T
        + np.outer(p.alpha * inc, p.delta)
    )
    return cache.u.solve(rhs / rho)


def _w_step(st: SolverState, p: ProblemInstance, cache: FactorCache) -> np.ndarray:
    rho = st.rho
    X = rho * st.S + st.Lam5 - st.lam4[p.slot_driver] + rho
    sums = p.driver_sums(X)
    return (X - (sums / (1.0 + cache.slot_count))[p.slot_driver]) / rho


def _h_step(st: SolverState, p: ProblemInstance, cache: FactorCache) -> np.ndarray:
    rho = st.rho
    d = p.delta[p.slot_col]
    j = p.slot_driver
    X = d * (-st.lam6[j] - rho * st.beta[j] + rho * p.driver_bound[j]) + st.Lam8 + rho * st.S
    dX = p.driver_sums(d * X)
    return (X - d * (dX / (1.0 + cache.slot_delta_sq))[j]) / rho


def _z_step(st: SolverState) -> np.ndarray:
    if st.rho == st.lambda_tilde:
        raise ValueError("rho equals lambda_tilde: Z-step is singular")
    Y = (st.rho * st.S + st.Lam10 - 0.5 * st.lambda_tilde) / (st.rho - st.lambda_tilde)
    return z_projection(Y, st.rho, st.lambda_tilde)


def residuals(st: SolverState, p: ProblemInstance) -> dict[str, np.ndarray]:
    """Constraint residuals of the split problem, keyed like RESIDUAL_NAMES."""
    return {
        "assign": p.row_sums(st.S) - st.u,
        "volume": st.omega - p.volumes(st.u),
        "demand": (p.D @ st.u.T).T - p.q,
        "colsum": p.driver_sums(st.W) - 1.0,
        "copy_w": st.S - st.W,
        "fairness": p.driver_sums(st.H * p.delta[p.slot_col]) + st.beta - p.driver_bound,
        "incentive": p.alpha * (st.u @ p.delta - p.gamma) - (st.c - st.mu),
        "copy_h": st.S - st.H,
        "budget": np.array([st.c.sum() + st.beta_tilde - p.budget]),
        "copy_z": st.S - st.Z,
    }


_DUAL_OF = {
    "assign": "lam1", "volume": "lam2", "demand": "lam3", "colsum": "lam4", "copy_w": "Lam5",
    "fairness": "lam6", "incentive": "lam7", "copy_h": "Lam8", "budget": "lam9", "copy_z": "Lam10",
}  # fmt: skip


def dual_ascent(duals: dict, res: dict, rho: float) -> dict:
    """Every multiplier moves by rho times the residual of its constraint."""
    out = dict(duals)
    for name, r in res.items():
        key = _DUAL_OF.get(name, name)
        out[key] = duals[key] + rho * r
    return out


def admm_iteration(st: SolverState, p: ProblemInstance, cache: FactorCache) -> dict[str, np.ndarray]:
    """One sweep in place; returns the residuals used by the multiplier step."""
    st.omega = omega_subproblem(p.volumes(st.u), st.lam2, st.rho, p.theta0, p.capacity)
    st.S = _s_step(st, p, cache)
    st.beta = _beta_step(st, p)
    st.c, st.mu = _c_step(st, p)
    st.u = _u_step(st, p, cache)
    st.W = _w_step(st, p, cache)
    st.H = _h_step(st, p, cache)
    st.Z = _z_step(st)
    st.beta_tilde = max(0.0, p.budget - st.c.sum() - st.lam9 / st.rho)
    res = residuals(st, p)
    duals = dual_ascent({k: getattr(st, k) for k in _DUAL_OF.values()}, res, st.rho)
    for name, v in duals.items():
        setattr(st, name, float(v[0]) if name == "lam9" else v)
    st.iteration += 1
    return res


# ---------------------------------------------------------------------------
# driver

_SECOND_BLOCK = ("u", "W", "H", "Z", "beta_tilde")


@dataclass
class ADMMParams:
    rho: float = 1.0
    lambda_tilde: float = 0.0
    max_iters: int = 2000
    tol: float = 1e-4
    anneal_iters: int = 200
    anneal_ratio: float = 0.5
    check_feasibility: bool = True


@dataclass
class RelaxedSolution:
    u: np.ndarray  # (n, P*T)
    S: np.ndarray  # packed
    c: np.ndarray
    objective: float
    travel_time: float
    history: list[dict]
    iterations: int
    converged: bool
    state: SolverState
    problem: ProblemInstance = field(repr=False)
    max_residual: float = float("nan")  # of the returned iterate

    def S_dense(self, i: int) -> np.ndarray:
        return self.problem.dense(self.S, i)

    def write_log(self, path: str | Path) -> None:
        cols = ["iter", "phase", "objective", *RESIDUAL_NAMES, "max_residual", "dual_residual", "wall_time"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: row[k] for k in cols})


def check_lp_feasibility(p: ProblemInstance) -> None:
    """Phase-0 LP on assignment, demand, fairness, incentive and budget rows."""
    ns, n, M = p.num_slots, p.n, p.num_drivers
    nv = ns + n
    d = p.delta[p.slot_col]
    eq = sp.csr_matrix((np.ones(ns), (p.slot_driver, np.arange(ns))), shape=(M, nv))
    key = p.slot_org * p.num_groups + p.col_group[p.slot_col]
    dem = sp.csr_matrix((np.ones(ns), (key, np.arange(ns))), shape=(n * p.num_groups, nv))
    fair = sp.csr_matrix((d, (p.slot_driver, np.arange(ns))), shape=(M, nv))
    inc = sp.hstack([sp.csr_matrix((p.alpha[p.slot_org] * d, (p.slot_org, np.arange(ns))), shape=(n, ns)), -sp.eye(n)])
    bud = sp.csr_matrix(np.concatenate([np.zeros(ns), np.ones(n)])[None, :])
    res = linprog(
        np.zeros(nv),
        A_ub=sp.vstack([fair, inc, bud]).tocsr(),
        b_ub=np.concatenate([p.driver_bound, p.alpha * p.gamma, [p.budget]]),
        A_eq=sp.vstack([eq, dem]).tocsr(),
        b_eq=np.concatenate([np.ones(M), p.q.ravel()]),
        bounds=[(0, 1)] * ns + [(0, None)] * n,
        method="highs",
    )
    if res.status == 2:
        raise InfeasibleProblemError("relaxed problem is infeasible (phase-0 LP)")


def solve_relaxed(
    problem: ProblemInstance,
    params: ADMMParams | None = None,
    state: SolverState | None = None,
    callback: Callable[[SolverState, dict], None] | None = None,
) -> RelaxedSolution:
    """Run the convex phase, then the optional binarizing phase.

    Stops a phase once every residual block is below ``tol`` in the max norm
    and the change of the second block (scaled by rho) is below ``tol`` too.
    Each phase keeps its iterate with the smallest primal residual; the
    binarizing phase replaces the convex one only if it converged or ended
    with a smaller residual.
    """
    params = params or ADMMParams()
    if params.rho <= 0:
        raise ValueError("rho must be positive")
    if params.rho == params.lambda_tilde:
        raise ValueError("rho equals lambda_tilde: Z-step is singular")
    p = problem
    if params.check_feasibility and p.num_drivers:
        check_lp_feasibility(p)
    cache = precompute_factorizations(p, params.rho)
    st = state.copy() if state is not None else initial_state(p, params.rho, params.lambda_tilde)
    st.rho, st.lambda_tilde = params.rho, params.lambda_tilde
    phases = [(params.lambda_tilde, params.max_iters)]
    if params.anneal_iters > 0 and params.lambda_tilde == 0.0 and params.anneal_ratio > 0:
        phases.append((params.anneal_ratio * params.rho, params.anneal_iters))
    history: list[dict] = []
    start = time.perf_counter()
    converged = False
    best = st.copy()
    keep, keep_res, keep_conv = st.copy(), np.inf, False
    for phase, (lam_t, iters) in enumerate(phases):
        st.lambda_tilde = lam_t
        if st.rho == lam_t:
            raise ValueError("rho equals lambda_tilde: Z-step is singular")
        best, best_res = st.copy(), np.inf
        converged = False
        if p.num_drivers == 0:
            break
        for _ in range(iters):
            prev = {k: np.copy(getattr(st, k)) for k in _SECOND_BLOCK}
            res = admm_iteration(st, p, cache)
            norms = {k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in res.items()}
            primal = max(norms.values())
            dual = st.rho * max(float(np.max(np.abs(getattr(st, k) - prev[k]), initial=0.0)) for k in _SECOND_BLOCK)
            if not np.isfinite(primal) or primal > DIVERGENCE_LIMIT:
                raise SolverDivergedError(f"residual {primal:.3g} at iteration {st.iteration}")
            objective = p.travel_time(st.omega) + regularizer_value(st.Z, lam_t)
            history.append(
                {"iter": st.iteration, "phase": phase, "objective": objective, **norms,
                 "max_residual": primal, "dual_residual": dual, "wall_time": time.perf_counter() - start}
            )  # fmt: skip
            if callback is not None:
                callback(st, res)
            if primal < best_res:
                best, best_res = st.copy(), primal
            if primal < params.tol and dual < params.tol:
                converged = True
                break
        # a later phase only replaces the kept iterate if it converged or ended closer to feasibility
        if phase == 0 or converged or best_res < keep_res:
            keep, keep_res, keep_conv = best, best_res, converged
    final = keep
    converged = keep_conv
    tt = p.travel_time(p.volumes(final.u))
    obj = tt + regularizer_value(final.Z, final.lambda_tilde)
    log.info("ADMM stopped after %d iterations (converged=%s, objective %.6g)", final.iteration, converged, obj)
    res_out = float(keep_res) if np.isfinite(keep_res) else float("nan")
    return RelaxedSolution(final.u, final.S, final.c, obj, tt, history, final.iteration, converged, final, p, res_out)


# ---------------------------------------------------------------------------
# dense forms of the block updates


def s_update(lam1, Lam5, Lam8, Lam10, W, H, Z, u, rho: float) -> np.ndarray:
    """S = (-lam1 1^T - Lam5 - Lam8 - Lam10 + rho(u 1^T + W + H + Z)) (rho 1 1^T + 3 rho I)^{-1}."""
    m = W.shape[1]
    X = -np.outer(lam1, np.ones(m)) - Lam5 - Lam8 - Lam10 + rho * (np.outer(u, np.ones(m)) + W + H + Z)
    return (X - X.sum(axis=1, keepdims=True) / (3.0 + m)) / (3.0 * rho)


def w_update(S, Lam5, lam4, rho: float) -> np.ndarray:
    P = S.shape[0]
    X = rho * S + Lam5 - np.outer(np.ones(P), lam4) + rho
    return FactorCache.w_inverse(P) @ X / rho


def h_update(S, Lam8, lam6, beta, bound, delta, rho: float) -> np.ndarray:
    X = np.outer(delta, -lam6 - rho * beta + rho * bound) + Lam8 + rho * S
    return FactorCache.h_inverse(delta) @ X / rho


def z_update(S, Lam10, rho: float, lambda_tilde: float) -> np.ndarray:
    if rho == lambda_tilde:
        raise ValueError("rho equals lambda_tilde: Z-step is singular")
    Y = (rho * np.asarray(S, dtype=float) + Lam10 - 0.5 * lambda_tilde) / (rho - lambda_tilde)
    return z_projection(Y, rho, lambda_tilde)
