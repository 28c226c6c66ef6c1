"""Independent reference computations used by the tests."""

from itertools import combinations

import numpy as np


def enumerate_qp(H, f, G, g, tol=1e-9):
    """Exhaustive active-set enumeration for min 0.5 u'Hu + f'u s.t. Gu <= g.

    Every subset of at most min(m, n) rows is treated as equalities; the KKT
    system is solved directly and the best primal-feasible, dual-feasible
    point is returned. Returns None when no subset yields a feasible point.
    """
    n = H.shape[0]
    m = 0 if G is None else G.shape[0]
    best, best_obj = None, np.inf
    for k in range(min(m, n) + 1):
        for S in combinations(range(m), k):
            S = list(S)
            A = G[S] if k else np.zeros((0, n))
            K = np.block([[H, A.T], [A, np.zeros((k, k))]])
            rhs = np.concatenate([-f, g[S] if k else np.zeros(0)])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            u, lam = sol[:n], sol[n:]
            if m and np.any(G @ u - g > tol * (1 + np.abs(g))):
                continue
            if np.any(lam < -tol):
                continue
            obj = 0.5 * u @ H @ u + f @ u
            if obj < best_obj - 1e-12:
                best, best_obj = u, obj
    return best


def random_qp(rng, n, m, feasible=True):
    R = rng.normal(size=(n, n))
    H = R @ R.T + 0.5 * np.eye(n)
    f = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    if feasible:
        u0 = rng.normal(size=n)
        g = G @ u0 + rng.uniform(0.0, 1.0, size=m)
    else:
        g = rng.normal(size=m)
    return H, f, G, g


def central_jacobian(fn, x, eps=1e-5):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        cols.append((np.asarray(fn(x + e), float) - np.asarray(fn(x - e), float)) / (2 * eps))
    return np.stack(cols, axis=-1)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
