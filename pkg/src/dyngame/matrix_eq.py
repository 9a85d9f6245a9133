"""Dense solvers for Stein, Sylvester-Stein, Lyapunov and Riccati equations.

Conventions follow the discrete-time game literature:

* Stein:            P = Q + A^T P Abar
* Sylvester-Stein:  X = M^T X N + C
* Lyapunov:         P = Q + Abar^T P Abar
* DARE:             P = Q + A^T P A - A^T P B (R + B^T P B)^{-1} B^T P A

The linear equations are solved by a complex-Schur Bartels-Stewart sweep
followed by one step of iterative refinement. The Kronecker-vectorized
form is kept as a reference (`kron_sylvester_stein`) for testing.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import AssumptionError, ConvergenceError, DimensionError, ResonanceError

EPS_SCHUR = 1e-9
HAUTUS_RANK_TOL = 1e-8


@dataclass(frozen=True)
class SpectralReport:
    eigenvalues: np.ndarray
    spectral_radius: float
    is_schur: bool


def spectrum(M):
    """Eigenvalues of ``M`` sorted by decreasing modulus, then by angle."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"spectrum needs a square matrix, got shape {M.shape}")
    if M.size == 0:
        return SpectralReport(np.zeros(0, dtype=complex), 0.0, True)
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigensolver failed: {exc}") from exc
    # rounding the keys keeps conjugate pairs adjacent despite ulp noise
    order = np.lexsort((np.round(np.angle(ev), 12), -np.round(np.abs(ev), 12)))
    ev = ev[order]
    rho = float(np.max(np.abs(ev)))
    return SpectralReport(ev, rho, rho < 1.0 - EPS_SCHUR)


def is_schur(M):
    return spectrum(M).is_schur


def _check_square(name, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got {M.shape}")
    return M


def _bartels_stewart(M, N, C):
    # X = M^T X N + C.  With M = U S U^H, N = V T V^H (complex Schur) and
    # X = conj(U) Y V^H the equation becomes Y = S^T Y T + U^T C V with S^T
    # lower and T upper triangular, solvable one column at a time.
    S, U = sla.schur(M.astype(complex), output="complex")
    T, V = sla.schur(N.astype(complex), output="complex")
    L = S.T
    Ct = U.T @ C @ V
    n, k = C.shape
    Y = np.zeros((n, k), dtype=complex)
    eye = np.eye(n)
    for j in range(k):
        rhs = Ct[:, j] + L @ (Y[:, :j] @ T[:j, j])
        lhs = eye - T[j, j] * L
        d = np.abs(np.diag(lhs))
        if d.size and d.min() < 1e3 * np.finfo(float).eps * max(1.0, np.abs(lhs).max()):
            raise ResonanceError("resonant spectra: some eig(M)*eig(N) equals 1")
        Y[:, j] = sla.solve_triangular(lhs, rhs, lower=True)
    X = np.conj(U) @ Y @ V.conj().T
    return X.real if np.isrealobj(C) else X


def solve_sylvester_stein(M, N, C):
    """Solve ``X = M^T X N + C`` for a rectangular ``X``.

    ``M`` is k-by-k and ``N`` is l-by-l, ``C`` is k-by-l. Unique whenever no
    product of an eigenvalue of ``M`` and one of ``N`` equals 1.
    """
    M = _check_square("M", M)
    N = _check_square("N", N)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape != (M.shape[0], N.shape[0]):
        raise DimensionError(f"C has shape {C.shape}, expected {(M.shape[0], N.shape[0])}")
    X = _bartels_stewart(M, N, C)
    # one refinement sweep on the residual
    res = C - (X - M.T @ X @ N)
    X = X + _bartels_stewart(M, N, res)
    return X


def solve_stein(A, Abar, Q):
    """Solve ``P = Q + A^T P Abar``."""
    return solve_sylvester_stein(A, Abar, Q)


def solve_dlyap(Abar, Q):
    """Solve ``P = Q + Abar^T P Abar`` for Schur ``Abar``; result is symmetrized."""
    Abar = _check_square("Abar", Abar)
    rep = spectrum(Abar)
    if not rep.is_schur:
        raise AssumptionError(f"Lyapunov solve needs a Schur matrix (spectral radius {rep.spectral_radius:.6g})")
    P = solve_sylvester_stein(Abar, Abar, Q)
    return 0.5 * (P + P.T)


def stein_residual(A, Abar, Q, P):
    return float(np.linalg.norm(P - Q - A.T @ P @ Abar))


def kron_sylvester_stein(M, N, C):
    """Reference solution of ``X = M^T X N + C`` by vectorization.

    vec(M^T X N) = (N^T kron M^T) vec(X) with column-major vec.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    N = np.atleast_2d(np.asarray(N, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    k, l = C.shape
    lhs = np.eye(k * l) - np.kron(N.T, M.T)
    x = np.linalg.solve(lhs, C.reshape(-1, order="F"))
    return x.reshape(k, l, order="F")


def psd_sqrt(Q):
    """Symmetric square root with negative eigenvalues clipped to zero."""
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def is_stabilizable(A, B, tol=HAUTUS_RANK_TOL):
    """Hautus test: rank [lambda I - A, B] = n for every |lambda| >= 1."""
    A = _check_square("A", A)
    B = np.atleast_2d(np.asarray(B, dtype=float)).reshape(A.shape[0], -1)
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(A, 2), np.linalg.norm(B, 2) if B.size else 0.0)
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - EPS_SCHUR:
            continue
        pencil = np.hstack([lam * np.eye(n) - A, B.astype(complex)])
        sv = np.linalg.svd(pencil, compute_uv=False)
        if sv.size < n or sv[n - 1] <= tol * scale:
            return False
    return True


def is_detectable(A, Q, tol=HAUTUS_RANK_TOL):
    """Detectability of (A, C) for any C with C^T C = Q."""
    C = psd_sqrt(np.atleast_2d(np.asarray(Q, dtype=float)))
    return is_stabilizable(np.asarray(A, dtype=float).T, C.T, tol)


def lqr_gain(A, B, R, P):
    """``K = -(R + B^T P B)^{-1} B^T P A``."""
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def dare_residual(A, B, Q, R, P):
    BtPA = B.T @ P @ A
    res = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) - P
    return float(np.linalg.norm(res))


def solve_dare(A, B, Q, R, check=True):
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Returns ``(P, K)`` with ``A + B K`` Schur. The generalized-Schur solver of
    SciPy provides the first iterate; one Newton-Kleinman step (a Lyapunov
    solve with the frozen gain) then tightens the residual.
    """
    A = _check_square("A", A)
    n = A.shape[0]
    B = np.atleast_2d(np.asarray(B, dtype=float)).reshape(n, -1)
    Q = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    R = 0.5 * (R + R.T)
    if check:
        if not is_stabilizable(A, B):
            raise AssumptionError("(A, B) is not stabilizable")
        if not is_detectable(A, Q):
            raise AssumptionError("(A, sqrt(Q)) is not detectable")
    try:
        P = sla.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceError(f"DARE solver failed: {exc}") from exc
    P = 0.5 * (P + P.T)
    K = lqr_gain(A, B, R, P)
    Acl = A + B @ K
    if not spectrum(Acl).is_schur:
        raise ConvergenceError("DARE solution is not stabilizing")
    P = solve_dlyap(Acl, Q + K.T @ R @ K)
    K = lqr_gain(A, B, R, P)
    res = dare_residual(A, B, Q, R, P)
    if res > 1e-9 * (1.0 + np.linalg.norm(P)):
        raise ConvergenceError("DARE residual above tolerance", {"residual": res})
    return P, K
