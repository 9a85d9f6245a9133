"""Independent reference computations used by the tests."""

from itertools import combinations

import numpy as np


def enumerate_affine_vi(M, q, A, b, tol=1e-10):
    """Solve VI(Mu + q, {A u <= b}) by trying every active set.

    Only meant for a handful of variables. Returns the first KKT point found;
    for strongly monotone ``M`` it is the unique solution.
    """
    n = M.shape[0]
    rows = range(A.shape[0])
    for k in range(0, min(n, A.shape[0]) + 1):
        for S in combinations(rows, k):
            S = list(S)
            As = A[S]
            K = np.block([[M, As.T], [As, np.zeros((k, k))]])
            rhs = np.concatenate([-q, b[S]])
            try:
                z = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            u, lam = z[:n], z[n:]
            if np.all(lam >= -tol) and np.all(A @ u <= b + tol):
                return u
    raise RuntimeError("no KKT point found")


def box_rows(lo, hi):
    n = lo.size
    A, b = [], []
    for j in range(n):
        if np.isfinite(hi[j]):
            e = np.zeros(n)
            e[j] = 1.0
            A.append(e)
            b.append(hi[j])
        if np.isfinite(lo[j]):
            e = np.zeros(n)
            e[j] = -1.0
            A.append(e)
            b.append(-lo[j])
    return np.array(A).reshape(-1, n), np.array(b)


def central_gradient(f, u, h=1e-5):
    g = np.zeros_like(u)
    for j in range(u.size):
        e = np.zeros_like(u)
        e[j] = h
        g[j] = (f(u + e) - f(u - e)) / (2 * h)
    return g
