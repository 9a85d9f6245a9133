"""Ellipsoidal terminal sets for the equilibrium closed loop.

For a Schur closed loop ``Abar`` the sublevel sets of ``x'P x`` with
``P = Q + Abar'P Abar`` are forward invariant. The largest level ``r`` that
fits inside every affine constraint row ``a'x <= b`` (state rows plus the
input rows induced by the feedback gains) is ``min b^2 / (a'P^{-1}a)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import matrix_eq as me
from .errors import AssumptionError

MEMBER_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TerminalSet:
    P_lyap: np.ndarray
    r: float
    closed_loop: np.ndarray
    gains: tuple
    rows: np.ndarray
    rhs: np.ndarray
    binding: int = -1

    @property
    def bounded(self):
        return bool(np.isfinite(self.r))

    def to_dict(self):
        return {
            "P_lyap": self.P_lyap.tolist(),
            "r": None if not self.bounded else self.r,
            "closed_loop": self.closed_loop.tolist(),
            "binding_row": self.binding,
            "decrease_certificate": decrease_certificate(self),
        }


def gain_rows(spec, gains):
    """Affine rows ``a'x <= b`` on the state induced by inputs ``u_i = K_i x``."""
    rows, rhs = [], []
    for i, K in enumerate(gains):
        for k in range(K.shape[0]):
            a = K[k]
            if not np.any(a):
                continue
            if np.isfinite(spec.u_max[i, k]):
                rows.append(a)
                rhs.append(spec.u_max[i, k])
            if np.isfinite(spec.u_min[i, k]):
                rows.append(-a)
                rhs.append(-spec.u_min[i, k])
    if spec.Gu.shape[0]:
        GK = spec.Gu @ np.vstack(gains)
        for a, b in zip(GK, spec.gu):
            if np.any(a):
                rows.append(a)
                rhs.append(b)
    return rows, rhs


def compute_terminal_set(Abar, spec, gains, Q_lyap=None):
    """Largest Lyapunov sublevel set inside the constraints, for ``u_i = K_i x``."""
    Abar = np.asarray(Abar, dtype=float)
    n = Abar.shape[0]
    if not me.is_schur(Abar):
        raise AssumptionError("terminal set needs a Schur closed loop")
    Q = np.eye(n) if Q_lyap is None else np.asarray(Q_lyap, dtype=float)
    P = me.solve_dlyap(Abar, Q)
    rows = [a for a in spec.Gx]
    rhs = list(spec.gx)
    gr, gb = gain_rows(spec, gains)
    rows += gr
    rhs += gb
    if not rows:
        return TerminalSet(P, np.inf, Abar, tuple(gains), np.zeros((0, n)), np.zeros(0))
    rows = np.array(rows, dtype=float)
    rhs = np.array(rhs, dtype=float)
    if np.any(np.linalg.norm(rows, axis=1) == 0):
        raise AssumptionError("constraint row with zero normal")
    Pinv_a = np.linalg.solve(P, rows.T)
    levels = rhs ** 2 / np.einsum("ij,ji->i", rows, Pinv_a)
    j = int(np.argmin(levels))
    return TerminalSet(P, float(levels[j]), Abar, tuple(gains), rows, rhs, j)


def decrease_certificate(ts):
    """``lambda_max(Abar'P Abar - P)``; negative certifies strict decrease."""
    D = ts.closed_loop.T @ ts.P_lyap @ ts.closed_loop - ts.P_lyap
    return float(np.linalg.eigvalsh(0.5 * (D + D.T)).max())


def membership(ts, x):
    """``(inside, distance)`` with the gauge distance ``max(0, |x|_P - sqrt(r))``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    v = float(x @ ts.P_lyap @ x)
    if not ts.bounded:
        return True, 0.0
    return v <= ts.r + MEMBER_TOL, max(0.0, np.sqrt(max(v, 0.0)) - np.sqrt(ts.r))


def euclidean_distance(ts, x):
    """Euclidean distance from ``x`` to the ellipsoid."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not ts.bounded or float(x @ ts.P_lyap @ x) <= ts.r:
        return 0.0
    w, V = np.linalg.eigh(ts.P_lyap)
    z = V.T @ x

    def level(nu):
        y = z / (1.0 + nu * w)
        return float(np.sum(w * y ** 2)) - ts.r

    hi = 1.0
    while level(hi) > 0:
        hi *= 2.0
    nu = brentq(level, 0.0, hi, xtol=1e-14, rtol=1e-14)
    y = z / (1.0 + nu * w)
    return float(np.linalg.norm(z - y))
