"""Infinite-horizon open-loop Nash equilibrium (OL-NE).

The OL-NE of an LQ game solves the coupled, generally non-symmetric
Riccati system

    P_i = Q_i + A^T P_i Abar,    Abar = (I + sum_j S_j P_j)^{-1} A,
    K_i = -R_i^{-1} B_i^T P_i Abar,

which `solve_olne` computes by the Stein recursion: freeze Abar, solve N
independent Stein equations, refresh Abar. `build_cost_to_go` lifts each
agent's problem to a 2n-state regulator whose value function gives the
terminal cost used by the finite-horizon game.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import matrix_eq as me
from .errors import AssumptionError, ConvergenceError, ValidationError

log = logging.getLogger(__name__)

INV_TOL = 1e-12
RANK_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class AssumptionReport:
    A_invertible: bool
    stabilizable: tuple
    detectable: tuple
    H: np.ndarray
    stable_eig_count: int
    complementarity_ok: bool
    ambiguous: bool
    method: str
    n: int

    @property
    def overall(self):
        return (self.A_invertible and all(self.stabilizable) and all(self.detectable)
                and self.stable_eig_count == self.n and self.complementarity_ok)

    def failures(self):
        out = []
        if not self.A_invertible:
            out.append("Assumption 2(i): A is singular")
        for i, (s, d) in enumerate(zip(self.stabilizable, self.detectable)):
            if not s:
                out.append(f"Assumption 2(ii): (A, B_{i + 1}) not stabilizable")
            if not d:
                out.append(f"Assumption 2(ii): (A, C_{i + 1}) not detectable")
        if self.stable_eig_count != self.n:
            out.append(f"Assumption 3: {self.stable_eig_count} stable eigenvalues, expected {self.n}")
        elif not self.complementarity_ok:
            out.append("Assumption 3: stable subspace not complementary to Im[0; I]")
        if self.ambiguous:
            out.append("Assumption 3: eigenvalues on the unit circle make the count ambiguous")
        return out

    def to_dict(self):
        return {
            "A_invertible": self.A_invertible,
            "stabilizable": list(self.stabilizable),
            "detectable": list(self.detectable),
            "stable_eig_count": self.stable_eig_count,
            "complementarity_ok": self.complementarity_ok,
            "ambiguous": self.ambiguous,
            "method": self.method,
            "overall": self.overall,
            "H": None if self.H is None else self.H.tolist(),
            "failures": self.failures(),
        }


def is_invertible(A):
    sv = np.linalg.svd(A, compute_uv=False)
    return bool(sv.size == 0 or sv[-1] > INV_TOL * max(1.0, sv[0]))


def build_H(game):
    """The (N+1)n square matrix whose stable subspace encodes the OL-NE."""
    n, N = game.n, game.N
    AiT = np.linalg.inv(game.A).T
    S = game.S
    H = np.zeros(((N + 1) * n, (N + 1) * n))
    H[:n, :n] = game.A + sum(S[j] @ AiT @ game.Q[j] for j in range(N))
    for j in range(N):
        blk = slice((j + 1) * n, (j + 2) * n)
        H[:n, blk] = -S[j] @ AiT
        H[blk, :n] = -AiT @ game.Q[j]
        H[blk, blk] = AiT
    return H


def build_pencil(game):
    """Pencil ``(F, E)`` with ``F z = lambda E z`` equivalent to ``H`` for invertible A.

    It is obtained by multiplying the lower block rows of ``H z = lambda z``
    by ``A^T`` and stays well defined when ``A`` is singular.
    """
    n, N = game.n, game.N
    F = np.zeros(((N + 1) * n, (N + 1) * n))
    E = np.eye((N + 1) * n)
    F[:n, :n] = game.A
    for j, S in enumerate(game.S):
        blk = slice((j + 1) * n, (j + 2) * n)
        E[:n, blk] = S
        F[blk, :n] = -game.Q[j]
        F[blk, blk] = np.eye(n)
        E[blk, blk] = game.A.T
    return F, E


def _complementary(V, n):
    if V.shape[1] != n:
        return False
    sv = np.linalg.svd(V[:n, :n], compute_uv=False)
    return bool(sv[-1] > RANK_TOL)


def check_assumptions(game):
    """Evaluate invertibility, per-agent stabilizability/detectability and the H test.

    When ``A`` is singular ``H`` does not exist; the stable count and the
    complementarity check are then taken from the equivalent pencil and the
    report still fails on invertibility.
    """
    n = game.n
    inv = is_invertible(game.A)
    stab = tuple(me.is_stabilizable(game.A, b) for b in game.B)
    det = tuple(me.is_detectable(game.A, q) for q in game.Q)
    lim = 1.0 - me.EPS_SCHUR
    if inv:
        H = build_H(game)
        ev = np.linalg.eigvals(H)
        _, Z, sdim = sla.schur(H, output="real", sort=lambda re, im: np.hypot(re, im) < lim)
        count = int(np.sum(np.abs(ev) < lim))
        ambiguous = bool(np.any(np.abs(np.abs(ev) - 1.0) < me.EPS_SCHUR))
        comp = _complementary(Z[:, :sdim], n)
        method = "H"
    else:
        H = None
        F, E = build_pencil(game)

        def stable(alpha, beta):
            return np.abs(alpha) < lim * np.abs(beta)

        _, _, alpha, beta, _, Z = sla.ordqz(F, E, sort=stable, output="real")
        mask = stable(alpha, beta)
        count = int(mask.sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            mod = np.abs(alpha) / np.abs(beta)
        ambiguous = bool(np.any(np.abs(mod[np.isfinite(mod)] - 1.0) < me.EPS_SCHUR))
        comp = _complementary(Z[:, :count], n)
        method = "pencil"
    return AssumptionReport(inv, stab, det, H, count, comp, ambiguous, method, n)


def check_cl_assumptions(game):
    """Stabilizability of (A, row B_i) and detectability of (A, sum Q_i)."""
    return {
        "stabilizable": me.is_stabilizable(game.A, game.B_stack),
        "detectable": me.is_detectable(game.A, sum(game.Q)),
    }


@dataclass(frozen=True, eq=False)
class OlNeSolution:
    P_ol: tuple
    K_ol: tuple
    Abar_ol: np.ndarray
    residuals: tuple
    iterations: int

    @property
    def K_stack(self):
        return np.vstack(self.K_ol)

    def to_dict(self):
        return {
            "P_ol": [p.tolist() for p in self.P_ol],
            "K_ol": [k.tolist() for k in self.K_ol],
            "Abar_ol": self.Abar_ol.tolist(),
            "residuals": list(self.residuals),
            "iterations": self.iterations,
        }


def split_gain(K, N, m):
    return [K[i * m:(i + 1) * m] for i in range(N)]


def central_lqr_gains(game):
    """Split the gain of one centralized LQR on ``(A, row B_i)``.

    Returns zero gains when ``A`` is already Schur.
    """
    if me.is_schur(game.A):
        return [np.zeros((game.m, game.n)) for _ in range(game.N)]
    R = sla.block_diag(*game.R)
    _, K = me.solve_dare(game.A, game.B_stack, sum(game.Q), R)
    return split_gain(K, game.N, game.m)


def olne_residuals(game, P, Abar):
    return tuple(me.stein_residual(game.A, Abar, q, p) for q, p in zip(game.Q, P))


def _closed_loop(game, P):
    W = np.eye(game.n) + sum(s @ p for s, p in zip(game.S, P))
    try:
        lu = sla.lu_factor(W, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceError(f"I + sum S_j P_j is singular: {exc}") from exc
    if np.abs(np.diag(lu[0])).min() <= INV_TOL * np.abs(lu[0]).max():
        raise ConvergenceError("I + sum S_j P_j is singular")
    return sla.lu_solve(lu, game.A)


def solve_olne(game, K0=None, tol=1e-10, max_iter=10000):
    """Stein recursion for the coupled OL-NE Riccati equations.

    ``K0`` must make ``A + sum_i B_i K0_i`` Schur; by default it comes from
    `central_lqr_gains`. Raises `ConvergenceError` (with the last residuals)
    when ``max_iter`` is reached or the iterate loses the Schur property.
    """
    N = game.N
    K = central_lqr_gains(game) if K0 is None else [np.asarray(k, dtype=float).reshape(game.m, game.n) for k in K0]
    if len(K) != N:
        raise ValidationError(f"K0 needs {N} gains, got {len(K)}")
    Abar = game.A + sum(b @ k for b, k in zip(game.B, K))
    if not me.is_schur(Abar):
        raise AssumptionError("initial closed loop A + sum B_i K0_i is not Schur")
    P_prev = None
    for k in range(1, max_iter + 1):
        P = [me.solve_stein(game.A, Abar, q) for q in game.Q]
        Abar = _closed_loop(game, P)
        if not np.all(np.isfinite(Abar)) or not me.is_schur(Abar):
            raise ConvergenceError("closed-loop iterate left the Schur region",
                                   {"iteration": k, "residuals": olne_residuals(game, P, Abar)})
        if P_prev is not None:
            change = max(np.linalg.norm(p - q) / (1.0 + np.linalg.norm(q)) for p, q in zip(P, P_prev))
            if change < tol:
                break
        P_prev = P
    else:
        raise ConvergenceError(f"Stein recursion did not converge in {max_iter} iterations",
                               {"iteration": max_iter, "residuals": olne_residuals(game, P, Abar)})
    K = [-np.linalg.solve(r, b.T @ p @ Abar) for r, b, p in zip(game.R, game.B, P)]
    res = olne_residuals(game, P, Abar)
    log.debug("OL-NE converged in %d iterations, residuals %s", k, res)
    return OlNeSolution(tuple(P), tuple(K), Abar, res, k)


@dataclass(frozen=True, eq=False)
class AugmentedCostToGo:
    """Per-agent lifted regulator data; every field is a tuple over agents."""

    P_lqr: tuple
    K_lqr: tuple
    P_tilde: tuple
    K_tilde: tuple
    A_hat: tuple
    B_hat: tuple
    Q_hat: tuple
    P_hat: tuple
    K_hat: tuple
    are_residuals: tuple

    @property
    def N(self):
        return len(self.P_hat)

    def to_dict(self):
        keys = ("P_lqr", "K_lqr", "P_tilde", "K_tilde", "P_hat", "K_hat")
        out = {k: [a.tolist() for a in getattr(self, k)] for k in keys}
        out["are_residuals"] = list(self.are_residuals)
        return out


def others_feedback(game, sol, i):
    """``sum_{j != i} B_j K_j`` for the equilibrium gains."""
    return sum((game.B[j] @ sol.K_ol[j] for j in range(game.N) if j != i), np.zeros((game.n, game.n)))


def augmented_are_residual(A, B, Q, R, P):
    return me.dare_residual(A, B, Q, R, P)


def build_cost_to_go(game, sol):
    """Augmented-LQR value matrices for every agent.

    Agent i faces ``xi+ = A_hat xi + B_hat u`` with ``xi = (x, y)`` where ``y``
    replays the equilibrium closed loop and drives the other agents' inputs.
    """
    n = game.n
    Abar = sol.Abar_ol
    out = {k: [] for k in AugmentedCostToGo.__dataclass_fields__}
    for i in range(game.N):
        B, Q, R = game.B[i], game.Q[i], game.R[i]
        W = others_feedback(game, sol, i)
        P_lqr, K_lqr = me.solve_dare(game.A, B, Q, R)
        A_lqr = game.A + B @ K_lqr
        P_tilde = me.solve_sylvester_stein(A_lqr, Abar, A_lqr.T @ P_lqr @ W)
        K_tilde = -np.linalg.solve(R + B.T @ P_lqr @ B, B.T @ (P_tilde @ Abar + P_lqr @ W))
        A_hat = np.block([[game.A, W], [np.zeros((n, n)), Abar]])
        B_hat = np.vstack([B, np.zeros_like(B)])
        Q_hat = sla.block_diag(Q, np.zeros((n, n)))
        K_hat = np.hstack([K_lqr, K_tilde])
        A_cl = A_hat + B_hat @ K_hat
        if not me.is_schur(A_cl):
            raise ConvergenceError(f"agent {i + 1}: lifted closed loop is not Schur")
        full = me.solve_dlyap(A_cl, Q_hat + K_hat.T @ R @ K_hat)
        P_hat = np.block([[P_lqr, P_tilde], [P_tilde.T, full[n:, n:]]])
        P_hat = 0.5 * (P_hat + P_hat.T)
        res = augmented_are_residual(A_hat, B_hat, Q_hat, R, P_hat)
        if res > 1e-8 * (1.0 + np.linalg.norm(P_hat)):
            raise ConvergenceError(f"agent {i + 1}: augmented ARE residual {res:.3g}", {"residual": res})
        if np.linalg.eigvalsh(P_hat).min() < -1e-8 * max(1.0, np.linalg.norm(P_hat, 2)):
            raise ConvergenceError(f"agent {i + 1}: lifted value matrix is not PSD")
        for key, val in (("P_lqr", P_lqr), ("K_lqr", K_lqr), ("P_tilde", P_tilde), ("K_tilde", K_tilde),
                         ("A_hat", A_hat), ("B_hat", B_hat), ("Q_hat", Q_hat), ("P_hat", P_hat),
                         ("K_hat", K_hat), ("are_residuals", res)):
            out[key].append(val)
    return AugmentedCostToGo(**{k: tuple(v) for k, v in out.items()})


def eval_V(ctg, i, x, y):
    """``0.5 [x; y]^T P_hat_i [x; y]``."""
    z = np.concatenate([np.asarray(x, dtype=float).reshape(-1), np.asarray(y, dtype=float).reshape(-1)])
    return 0.5 * float(z @ ctg.P_hat[i] @ z)


def bellman_rhs(ctg, game, i, x, y):
    """Minimum over ``u`` of ``l_i(x, u) + V_i(A x + B_i u + W_i y, Abar y)`` and its argmin."""
    z = np.concatenate([np.asarray(x, dtype=float).reshape(-1), np.asarray(y, dtype=float).reshape(-1)])
    Ah, Bh, Ph, R = ctg.A_hat[i], ctg.B_hat[i], ctg.P_hat[i], game.R[i]
    u = -np.linalg.solve(R + Bh.T @ Ph @ Bh, Bh.T @ Ph @ Ah @ z)
    nxt = Ah @ z + Bh @ u
    val = 0.5 * float(z @ ctg.Q_hat[i] @ z) + 0.5 * float(u @ R @ u) + 0.5 * float(nxt @ Ph @ nxt)
    return val, u
