"""Infinite-horizon closed-loop (feedback) Nash equilibrium.

The CL-NE solves the coupled symmetric Riccati equations

    P_i = Q_i + Abar_{-i}^T P_i Abar,   K_i = -R_i^{-1} B_i^T P_i Abar,

with ``Abar = A + sum_j B_j K_j`` and ``Abar_{-i} = Abar - B_i K_i``. Two
recursions are offered: `riccati` fixes the other agents' gains and solves
one DARE per agent; `lyapunov` rewrites each equation as the Lyapunov
equation ``P_i = Q_i + K_i^T R_i K_i + Abar^T P_i Abar``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import matrix_eq as me
from .errors import AssumptionError, ConvergenceError, ValidationError
from .olne import _closed_loop, central_lqr_gains

log = logging.getLogger(__name__)

METHODS = ("lyapunov", "riccati")


@dataclass(frozen=True, eq=False)
class ClNeSolution:
    P_cl: tuple
    K_cl: tuple
    Abar_cl: np.ndarray
    Abar_cl_minus: tuple
    residuals: tuple
    iterations: int
    method: str

    def to_dict(self):
        return {
            "method": self.method,
            "P_cl": [p.tolist() for p in self.P_cl],
            "K_cl": [k.tolist() for k in self.K_cl],
            "Abar_cl": self.Abar_cl.tolist(),
            "Abar_cl_minus": [a.tolist() for a in self.Abar_cl_minus],
            "residuals": list(self.residuals),
            "iterations": self.iterations,
        }


def _gains_from_P(game, P):
    Abar = _closed_loop(game, P)
    K = [-np.linalg.solve(r, b.T @ p @ Abar) for r, b, p in zip(game.R, game.B, P)]
    return K, Abar


def clne_residuals(game, P, K):
    Abar = game.A + sum(b @ k for b, k in zip(game.B, K))
    out = []
    for i in range(game.N):
        Am = Abar - game.B[i] @ K[i]
        out.append(float(np.linalg.norm(P[i] - game.Q[i] - Am.T @ P[i] @ Abar)))
    return tuple(out)


def _check_symmetric(P, it):
    for i, p in enumerate(P):
        if np.linalg.norm(p - p.T) > 1e-9 * max(np.linalg.norm(p), 1e-300):
            raise ConvergenceError(f"P_{i + 1} lost symmetry at iteration {it}")


def solve_clne(game, method="lyapunov", K0=None, tol=1e-10, max_iter=10000):
    """Fixed-point recursion for the coupled CL-NE Riccati equations."""
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    N = game.N
    if not me.is_stabilizable(game.A, game.B_stack):
        raise AssumptionError("Assumption 4: (A, row B_i) not stabilizable")
    if not me.is_detectable(game.A, sum(game.Q)):
        raise AssumptionError("Assumption 4: (A, sum Q_i) not detectable")
    K = central_lqr_gains(game) if K0 is None else [np.asarray(k, dtype=float).reshape(game.m, game.n) for k in K0]
    if len(K) != N:
        raise ValidationError(f"K0 needs {N} gains, got {len(K)}")
    if not me.is_schur(game.A + sum(b @ k for b, k in zip(game.B, K))):
        raise AssumptionError("initial closed loop A + sum B_i K0_i is not Schur")
    P_prev = None
    history = []
    for it in range(1, max_iter + 1):
        if method == "lyapunov":
            Abar = game.A + sum(b @ k for b, k in zip(game.B, K))
            if not me.is_schur(Abar):
                raise ConvergenceError("closed-loop iterate left the Schur region",
                                       {"iteration": it, "history": history})
            P = [me.solve_dlyap(Abar, q + k.T @ r @ k) for q, r, k in zip(game.Q, game.R, K)]
            K, _ = _gains_from_P(game, P)
        else:
            P = list(P_prev) if P_prev is not None else [None] * N
            for i in range(N):
                Am = game.A + sum(game.B[j] @ K[j] for j in range(N) if j != i)
                try:
                    P[i], K[i] = me.solve_dare(Am, game.B[i], game.Q[i], game.R[i])
                except (AssumptionError, ConvergenceError) as exc:
                    raise ConvergenceError(f"agent {i + 1} best response failed: {exc}",
                                           {"iteration": it, "history": history}) from exc
        _check_symmetric(P, it)
        if P_prev is not None:
            change = max(np.linalg.norm(p - q) / (1.0 + np.linalg.norm(q)) for p, q in zip(P, P_prev))
            history.append(change)
            if not np.isfinite(change):
                raise ConvergenceError("recursion diverged", {"iteration": it, "history": history})
            if change < tol:
                break
        P_prev = [p.copy() for p in P]
    else:
        raise ConvergenceError(f"CL-NE {method} recursion did not converge in {max_iter} iterations",
                               {"iteration": max_iter, "history": history[-20:]})
    K, Abar = _gains_from_P(game, P)
    if not me.is_schur(Abar):
        raise ConvergenceError("CL-NE closed loop is not Schur")
    minus = tuple(Abar - b @ k for b, k in zip(game.B, K))
    res = clne_residuals(game, P, K)
    log.debug("CL-NE (%s) converged in %d iterations", method, it)
    return ClNeSolution(tuple(P), tuple(K), Abar, minus, res, it, method)


def bellman_check_cl(sol, game, i, x):
    """Both sides of agent i's Bellman equation at ``x`` and the minimizer.

    Returns ``(lhs, rhs, argmin)`` where ``lhs = 0.5 x'P_i x`` and ``rhs`` is the
    minimum over ``u`` of ``l_i(x, u) + 0.5 |Abar_{-i} x + B_i u|^2_{P_i}``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    P, B, R, Q = sol.P_cl[i], game.B[i], game.R[i], game.Q[i]
    Am = sol.Abar_cl_minus[i]
    u = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ Am @ x)
    nxt = Am @ x + B @ u
    rhs = 0.5 * float(x @ Q @ x) + 0.5 * float(u @ R @ u) + 0.5 * float(nxt @ P @ nxt)
    return 0.5 * float(x @ P @ x), rhs, u
