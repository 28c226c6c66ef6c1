"""Dense convex QP: minimize 1/2 u'Hu + f'u subject to Gu <= g.

The solver is the Goldfarb-Idnani dual active-set method. It starts from the
unconstrained minimizer, adds the most violated constraint at each major
iteration and keeps the multipliers of the working set nonnegative, so it
needs no feasible starting point and reports infeasibility when a violated
constraint cannot be added. A previous active set can be supplied as a warm
start; it is trimmed until its multipliers are nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"

STATIONARITY_TOL = 1e-7
DUAL_TOL = 1e-9
COMPLEMENTARITY_TOL = 1e-7
PRIMAL_TOL = 1e-8


class CholeskyFailure(np.linalg.LinAlgError):
    """Cost matrix is not positive definite, even after one tiny regularization."""


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.atleast_1d(np.asarray(self.f, dtype=float))
        n = self.f.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected {(n, n)}")
        if not np.allclose(self.H, self.H.T, rtol=0.0, atol=1e-12):
            raise ValueError("H is not symmetric")
        if self.G is None:
            self.G = np.zeros((0, n))
            self.g = np.zeros(0)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        if self.G.shape[0] != self.g.shape[0]:
            raise ValueError("row count of G must equal length of g")

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def m(self) -> int:
        return self.g.shape[0]

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass
class QpSolution:
    u: np.ndarray
    lam: np.ndarray
    active_set: list[int]
    status: str
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class KktReport:
    stationarity: float
    dual_feasibility: float
    complementarity: float
    primal_feasibility: float

    def ok(
        self,
        stationarity: float = STATIONARITY_TOL,
        dual: float = DUAL_TOL,
        complementarity: float = COMPLEMENTARITY_TOL,
        primal: float = PRIMAL_TOL,
    ) -> bool:
        return (
            self.stationarity <= stationarity
            and self.dual_feasibility <= dual
            and self.complementarity <= complementarity
            and self.primal_feasibility <= primal
        )


def check_kkt(p: QpProblem, s: QpSolution) -> KktReport:
    """Largest violation of each KKT block at (u, lambda)."""
    u, lam = s.u, s.lam
    r = p.H @ u + p.f + p.G.T @ lam
    slack = p.G @ u - p.g
    return KktReport(
        stationarity=float(np.max(np.abs(r), initial=0.0)),
        dual_feasibility=float(np.max(-lam, initial=0.0)),
        complementarity=float(np.max(np.abs(lam * slack), initial=0.0)),
        primal_feasibility=float(np.max(slack, initial=0.0)),
    )


class _HInverse:
    """Applies H^{-1}; diagonal H skips the factorization."""

    def __init__(self, H: np.ndarray):
        d = np.diag(H)
        if np.count_nonzero(H - np.diag(d)) == 0:
            if np.all(d > 0):
                self._diag = d
                return
            raise CholeskyFailure("diagonal cost matrix has a nonpositive entry")
        self._diag = None
        try:
            self._cho = sla.cho_factor(H, lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            try:
                self._cho = sla.cho_factor(H + 1e-10 * np.eye(H.shape[0]), lower=True)
            except np.linalg.LinAlgError as exc:
                raise CholeskyFailure("cost matrix is not positive definite") from exc

    def __call__(self, b: np.ndarray) -> np.ndarray:
        if self._diag is not None:
            return b / (self._diag if b.ndim == 1 else self._diag[:, None])
        return sla.cho_solve(self._cho, b)


class ActiveSetQP:
    """Dual active-set QP solver that remembers the last active set."""

    def __init__(self, max_iter: int = 1000, feas_tol: float = 1e-10, warm_start: bool = True):
        self.max_iter = max_iter
        self.feas_tol = feas_tol
        self.warm_start = warm_start
        self.last_active: list[int] = []

    def reset(self):
        self.last_active = []

    def solve(self, p: QpProblem) -> QpSolution:
        hinv = _HInverse(p.H)
        # constraints in ">=" form: a_j'u >= b_j with a_j = -G_j, b_j = -g_j
        A = -p.G
        b = -p.g
        u0 = -hinv(p.f)

        start = self._warm(p, hinv, u0) if (self.warm_start and self.last_active) else None
        if start is None:
            u, active, lam = u0, [], np.zeros(0)
        else:
            u, active, lam = start

        status, it = OPTIMAL, 0
        tiny = 1e-12
        while True:
            s = A @ u - b if p.m else np.zeros(0)
            if p.m == 0 or s.min() >= -self.feas_tol:
                break
            # most violated, lowest index on ties
            viol = np.where(np.isin(np.arange(p.m), active), np.inf, s)
            q = int(np.argmin(viol))
            if viol[q] >= -self.feas_tol:
                break
            lam_q = 0.0
            ap = A[q]
            while True:
                it += 1
                if it > self.max_iter:
                    raise RuntimeError("active-set iteration limit reached")
                w = hinv(ap)
                if active:
                    N = A[active].T
                    W = hinv(N)
                    M = N.T @ W
                    r = np.linalg.solve(M, N.T @ w)
                    z = w - W @ r
                else:
                    r = np.zeros(0)
                    z = w
                za = float(z @ ap)
                # dual step: drop a working constraint whose multiplier hits zero
                t1, k = np.inf, -1
                for idx in range(len(active)):
                    if r[idx] > tiny:
                        ratio = lam[idx] / r[idx]
                        if ratio < t1:
                            t1, k = ratio, idx
                sq = float(ap @ u - b[q])
                if za <= tiny * max(1.0, float(ap @ w)):
                    t2 = np.inf
                else:
                    t2 = -sq / za
                t = min(t1, t2)
                if not np.isfinite(t):
                    status = INFEASIBLE
                    break
                if np.isfinite(t2):
                    u = u + t * z
                lam = lam - t * r
                lam_q += t
                if t2 <= t1:
                    active.append(q)
                    lam = np.append(lam, lam_q)
                    break
                del active[k]
                lam = np.delete(lam, k)
            if status == INFEASIBLE:
                break

        full = np.zeros(p.m)
        if active:
            full[active] = np.maximum(lam, 0.0) if status == OPTIMAL else lam
        if status == OPTIMAL:
            self.last_active = sorted(active)
        return QpSolution(u=u, lam=full, active_set=sorted(active), status=status, iterations=it)

    def _warm(self, p, hinv, u0):
        active = [j for j in self.last_active if j < p.m]
        A = -p.G
        b = -p.g
        while active:
            N = A[active].T
            W = hinv(N)
            M = N.T @ W
            try:
                lam = np.linalg.solve(M, b[active] - N.T @ u0)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(lam)) or np.linalg.cond(M) > 1e12:
                return None
            if lam.min() >= 0.0:
                u = u0 + W @ lam
                return u, list(active), lam
            del active[int(np.argmin(lam))]
        return None


def solve(p: QpProblem) -> QpSolution:
    """One-shot solve without warm start."""
    return ActiveSetQP(warm_start=False).solve(p)
