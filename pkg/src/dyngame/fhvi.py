"""Finite-horizon game as an affine variational inequality.

Decision vector ordering: ``u = col(u_1, ..., u_N)`` with each
``u_i = col(u_i[0], ..., u_i[T-1])``. The pseudo-gradient is
``F(u | x0) = M u + Wx x0``. The feasible set is a box (local input bounds),
a polyhedron (state rows and shared input rows at every step) and an
optional ellipsoid on the terminal state.

Solving follows a primal-dual splitting: the box is handled by projection
and the polyhedral rows by multipliers. Every few hundred iterations (and
once at the warm start) a primal-dual active-set step guesses the active
constraints and solves the KKT system exactly; this is what makes the
method reach residuals near machine precision in a few iterations when the
warm start is good.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq, linprog

from .errors import InfeasibleError, ValidationError

log = logging.getLogger(__name__)

KINDS = ("olne_terminal", "clne_surrogate", "no_terminal")
KIND_ALIASES = {"ol": "olne_terminal", "cl": "clne_surrogate", "none": "no_terminal"}


def prediction_matrices(A, Bs, T):
    """``Theta`` (blocks ``A^t``, t = 1..T) and one lower block-triangular ``Gamma_j`` per input."""
    n = A.shape[0]
    pw = [np.eye(n)]
    for _ in range(T):
        pw.append(A @ pw[-1])
    Theta = np.vstack(pw[1:])
    Gammas = []
    for B in Bs:
        m = B.shape[1]
        G = np.zeros((T * n, T * m))
        for r in range(T):
            for c in range(r + 1):
                G[r * n:(r + 1) * n, c * m:(c + 1) * m] = pw[r - c] @ B
        Gammas.append(G)
    return Theta, Gammas


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    """Box ``lo <= u <= hi``, rows ``G u <= h0 - Hx x0`` and an optional
    terminal ellipsoid ``|E u + Ex x0|^2_P <= r``."""

    lo: np.ndarray
    hi: np.ndarray
    G: np.ndarray
    h0: np.ndarray
    Hx: np.ndarray
    row_labels: tuple
    E: np.ndarray = None
    Ex: np.ndarray = None
    P_ell: np.ndarray = None
    r_ell: float = None

    def h(self, x0):
        return self.h0 - self.Hx @ x0

    @property
    def has_ellipsoid(self):
        return self.E is not None and self.r_ell is not None and np.isfinite(self.r_ell)

    def ellipsoid(self, x0):
        if not self.has_ellipsoid:
            return None
        return self.E, self.Ex @ x0, self.P_ell, float(self.r_ell)

    def violation(self, u, x0):
        """Largest violation over all constraints (nonpositive when feasible)."""
        parts = [np.max(self.lo - u, initial=-np.inf), np.max(u - self.hi, initial=-np.inf)]
        if self.G.shape[0]:
            parts.append(np.max(self.G @ u - self.h(x0)))
        if self.has_ellipsoid:
            xT = self.E @ u + self.Ex @ x0
            parts.append(float(xT @ self.P_ell @ xT) - self.r_ell)
        return float(max(parts))


@dataclass(frozen=True, eq=False)
class FiniteHorizonVi:
    kind: str
    T: int
    N: int
    n: int
    m: int
    M: np.ndarray
    Wx: np.ndarray
    Theta: np.ndarray
    Gamma: tuple
    agent_Theta: tuple
    agent_Gamma: tuple
    Qbar: tuple
    Rbar: tuple
    feasible: FeasibleSet
    terminal_hat: tuple = None

    def w(self, x0):
        return self.Wx @ np.asarray(x0, dtype=float).reshape(-1)

    def F(self, u, x0):
        return self.M @ u + self.w(x0)

    def block(self, i):
        k = self.T * self.m
        return slice(i * k, (i + 1) * k)

    def inputs_by_time(self, u):
        """Reshape the decision vector to (T, N*m) stacked inputs."""
        return np.asarray(u).reshape(self.N, self.T, self.m).transpose(1, 0, 2).reshape(self.T, self.N * self.m)

    def from_inputs_by_time(self, U):
        return np.asarray(U).reshape(self.T, self.N, self.m).transpose(1, 0, 2).reshape(-1)

    def states(self, u, x0):
        """Predicted ``x[1..T]`` under the true dynamics, shape (T, n)."""
        x = self.Theta @ x0 + sum(G @ u[self.block(j)] for j, G in enumerate(self.Gamma))
        return x.reshape(self.T, self.n)

    def agent_states(self, i, u, x0):
        """States predicted by agent i (differs from `states` for the surrogate game)."""
        x = self.agent_Theta[i] @ x0 + sum(G @ u[self.block(j)] for j, G in enumerate(self.agent_Gamma[i]))
        return x.reshape(self.T, self.n)

    def agent_cost(self, i, x0, u, v=None, Q0=None):
        """Agent i's finite-horizon cost when it plays ``v`` and the rest play ``u``.

        For the OL kind the terminal cost is ``V_i(x_T, y)`` with ``y`` frozen at
        the terminal state produced by ``u`` itself. ``Q0`` adds the (constant)
        stage cost of ``x0`` when given.
        """
        u = np.asarray(u, dtype=float)
        w = u.copy()
        if v is not None:
            w[self.block(i)] = v
        x = self.agent_states(i, w, x0)
        ui = w[self.block(i)]
        n = self.n
        Qb = self.Qbar[i]
        stage = 0.5 * float(ui @ self.Rbar[i] @ ui)
        xs = x.reshape(-1)
        head = xs[:-n]
        stage += 0.5 * float(head @ Qb[:-n, :-n] @ head)
        xT = x[-1]
        if self.kind == "olne_terminal" and self.terminal_hat is not None:
            y = self.agent_states(i, u, x0)[-1]
            z = np.concatenate([xT, y])
            term = 0.5 * float(z @ self.terminal_hat[i] @ z)
        else:
            term = 0.5 * float(xT @ Qb[-n:, -n:] @ xT)
        if Q0 is not None:
            stage += 0.5 * float(x0 @ Q0 @ x0)
        return stage + term


def _kind(kind):
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ValidationError(f"unknown VI kind {kind!r}")
    return kind


def build_feasible_set(game, spec, Theta, Gamma, terminal=None):
    T, N, m, n = game.T, game.N, game.m, game.n
    lo = np.concatenate([np.tile(spec.u_min[i], T) for i in range(N)])
    hi = np.concatenate([np.tile(spec.u_max[i], T) for i in range(N)])
    rows, h0, Hx, labels = [], [], [], []
    if spec.Gx.shape[0]:
        Gfull = np.hstack(Gamma)
        for t in range(T):
            blk = slice(t * n, (t + 1) * n)
            rows.append(spec.Gx @ Gfull[blk])
            h0.append(spec.gx)
            Hx.append(spec.Gx @ Theta[blk])
            labels += [("state", t + 1, j) for j in range(spec.Gx.shape[0])]
    if spec.Gu.shape[0]:
        for t in range(T):
            sel = np.zeros((N * m, N * T * m))
            for i in range(N):
                for k in range(m):
                    sel[i * m + k, i * T * m + t * m + k] = 1.0
            rows.append(spec.Gu @ sel)
            h0.append(spec.gu)
            Hx.append(np.zeros((spec.Gu.shape[0], n)))
            labels += [("coupling", t, j) for j in range(spec.Gu.shape[0])]
    G = np.vstack(rows) if rows else np.zeros((0, N * T * m))
    h0 = np.concatenate(h0) if h0 else np.zeros(0)
    Hx = np.vstack(Hx) if Hx else np.zeros((0, n))
    ell = {}
    if terminal is not None and np.isfinite(terminal.r):
        last = slice((T - 1) * n, T * n)
        ell = dict(E=np.hstack(Gamma)[last], Ex=Theta[last], P_ell=terminal.P_lyap, r_ell=float(terminal.r))
    return FeasibleSet(lo, hi, G, h0, Hx, tuple(labels), **ell)


def build_vi(game, values=None, spec=None, terminal=None, kind=None, terminal_override=None):
    """Assemble ``M``, ``Wx`` and the feasible set.

    ``values`` is an `AugmentedCostToGo` (OL kind, terminal weight
    ``P_lqr + P_tilde = P_OL``), a `ClNeSolution` (surrogate kind) or None
    (plain stage cost at T). ``terminal_override`` replaces the terminal
    weights, e.g. with perturbed copies of ``P_OL``.
    """
    from .clne import ClNeSolution
    from .olne import AugmentedCostToGo

    if kind is None:
        kind = ("olne_terminal" if isinstance(values, AugmentedCostToGo)
                else "clne_surrogate" if isinstance(values, ClNeSolution) else "no_terminal")
    kind = _kind(kind)
    if kind == "olne_terminal" and not isinstance(values, AugmentedCostToGo):
        raise ValidationError("olne_terminal needs the augmented cost-to-go")
    if kind == "clne_surrogate" and not isinstance(values, ClNeSolution):
        raise ValidationError("clne_surrogate needs a CL-NE solution")
    from .game_model import ConstraintSpec

    spec = spec or ConstraintSpec.unconstrained(game)
    T, N, m, n = game.T, game.N, game.m, game.n
    Theta, Gamma = prediction_matrices(game.A, game.B, T)
    if kind == "olne_terminal":
        term = [values.P_lqr[i] + values.P_tilde[i] for i in range(N)]
    elif kind == "clne_surrogate":
        term = list(values.P_cl)
    else:
        term = list(game.Q)
    if terminal_override is not None:
        term = [np.asarray(p, dtype=float) for p in terminal_override]
    Qbar = tuple(sla.block_diag(np.kron(np.eye(T - 1), game.Q[i]), term[i]) for i in range(N))
    Rbar = tuple(np.kron(np.eye(T), game.R[i]) for i in range(N))
    if kind == "clne_surrogate":
        aTheta, aGamma = [], []
        for i in range(N):
            Am = values.Abar_cl_minus[i]
            # shared first step, then the agent's own prediction model
            _, (Gi,) = prediction_matrices(Am, [game.B[i]], T)
            Th_i = _shift_theta(Am, game.A, T)
            gams = []
            for j in range(N):
                if j == i:
                    gams.append(Gi)
                else:
                    Gj = np.zeros((T * n, T * m))
                    Gj[:, :m] = _shift_theta(Am, game.B[j], T)
                    gams.append(Gj)
            aTheta.append(Th_i)
            aGamma.append(tuple(gams))
        aTheta, aGamma = tuple(aTheta), tuple(aGamma)
    else:
        aTheta = (Theta,) * N
        aGamma = (tuple(Gamma),) * N
    Mrows, Wrows = [], []
    for i in range(N):
        GiQ = aGamma[i][i].T @ Qbar[i]
        Mrows.append(np.hstack([GiQ @ aGamma[i][j] for j in range(N)]))
        Wrows.append(GiQ @ aTheta[i])
    M = sla.block_diag(*Rbar) + np.vstack(Mrows)
    Wx = np.vstack(Wrows)
    feas = build_feasible_set(game, spec, Theta, Gamma, terminal)
    hat = None
    if kind == "olne_terminal":
        hat = values.P_hat
        if terminal_override is not None:
            # shift the x-block so that P_lqr + P_tilde equals the override
            hat = tuple(_override_hat(values, i, term[i]) for i in range(N))
    return FiniteHorizonVi(kind, T, N, n, m, M, Wx, Theta, tuple(Gamma), aTheta, aGamma, Qbar, Rbar, feas, hat)


def _shift_theta(Am, X, T):
    """Blocks ``Am^t X`` for t = 0..T-1 stacked vertically."""
    out = [X]
    for _ in range(T - 1):
        out.append(Am @ out[-1])
    return np.vstack(out)


def _override_hat(ctg, i, P_term):
    n = P_term.shape[0]
    H = ctg.P_hat[i].copy()
    H[:n, n:] = P_term - ctg.P_lqr[i]
    H[n:, :n] = (P_term - ctg.P_lqr[i]).T
    return H


@dataclass(frozen=True)
class MonotonicityReport:
    min_eig_sym: float
    strongly_monotone: bool
    gerschgorin_bound: float
    max_block_asymmetry: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def diagnose_monotonicity(vi):
    M = vi.M
    Ms = 0.5 * (M + M.T)
    lam = float(np.linalg.eigvalsh(Ms).min())
    bounds, asym = [], 0.0
    for i in range(vi.N):
        bi = vi.block(i)
        off = sum(np.linalg.norm(Ms[bi, vi.block(j)], 2) for j in range(vi.N) if j != i)
        bounds.append(float(np.linalg.eigvalsh(Ms[bi, bi]).min()) - off)
        Mii = M[bi, bi]
        asym = max(asym, float(np.linalg.norm(Mii - Mii.T)))
    return MonotonicityReport(lam, lam > 1e-10, float(min(bounds)), asym)


# --- solver ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ViSolveResult:
    u: np.ndarray
    residual: float
    iterations: int
    converged: bool
    dual: np.ndarray
    dual_ellipsoid: float = 0.0
    kkt_residual: float = 0.0
    method: str = ""


def _power_norm(M, iters=100, seed=0):
    """Spectral norm estimate by power iteration on ``M^T M``."""
    if M.size == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        s = np.sqrt(nw)
    # power iteration underestimates; pad slightly so step sizes stay safe
    return float(s) * 1.01


class _Problem:
    """Affine VI data in solver form with unit-norm constraint rows."""

    def __init__(self, M, q, lo, hi, G, h, ell):
        self.M, self.q, self.lo, self.hi = M, q, lo, hi
        s = np.linalg.norm(G, axis=1) if G.shape[0] else np.zeros(0)
        self.scale = s
        self.G = G / s[:, None] if G.shape[0] else G
        self.h = h / s if G.shape[0] else h
        self.ell = ell
        if ell is not None:
            E, e, P, r = ell
            self.EPE = E.T @ P @ E
            self.EPe = E.T @ P @ e

    def c(self, u):
        E, e, P, r = self.ell
        x = E @ u + e
        return float(x @ P @ x) - r

    def grad_c(self, u):
        return 2.0 * (self.EPE @ u + self.EPe)

    def field(self, u, lam, mu):
        g = self.M @ u + self.q + self.G.T @ lam
        if self.ell is not None and mu:
            g = g + mu * self.grad_c(u)
        return g

    def kkt(self, u, lam, mu):
        g = self.field(u, lam, mu)
        parts = [u - np.clip(u - g, self.lo, self.hi)]
        if self.G.shape[0]:
            parts.append(np.minimum(lam, self.h - self.G @ u))
        if self.ell is not None:
            parts.append([min(mu, -self.c(u))])
        return float(np.linalg.norm(np.concatenate(parts)))

    def primal_violation(self, u):
        v = max(np.max(self.lo - u, initial=0.0), np.max(u - self.hi, initial=0.0))
        if self.G.shape[0]:
            v = max(v, float(np.max(self.G @ u - self.h)))
        if self.ell is not None:
            v = max(v, self.c(u))
        return v


def _kkt_solve(pb, lo_act, hi_act, row_act, mu):
    n = pb.M.shape[0]
    M, q = pb.M, pb.q
    if mu:
        M = M + 2.0 * mu * pb.EPE
        q = q + 2.0 * mu * pb.EPe
    u = np.zeros(n)
    u[lo_act] = pb.lo[lo_act]
    u[hi_act] = pb.hi[hi_act]
    fixed = lo_act | hi_act
    free = ~fixed
    Ga = pb.G[row_act]
    nf, na = int(free.sum()), int(row_act.sum())
    K = np.zeros((nf + na, nf + na))
    K[:nf, :nf] = M[np.ix_(free, free)]
    K[:nf, nf:] = Ga[:, free].T
    K[nf:, :nf] = Ga[:, free]
    rhs = np.concatenate([-q[free] - M[np.ix_(free, fixed)] @ u[fixed], pb.h[row_act] - Ga[:, fixed] @ u[fixed]])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    u[free] = sol[:nf]
    lam = np.zeros(pb.G.shape[0])
    lam[row_act] = sol[nf:]
    return u, lam


def _active_set_step(pb, u, lam, mu):
    """One primal-dual active-set (semismooth Newton) step."""
    g = pb.field(u, lam, mu)
    p = u - g
    lo_act = p <= pb.lo
    hi_act = (p >= pb.hi) & ~lo_act
    row_act = (lam + pb.G @ u - pb.h) > 0 if pb.G.shape[0] else np.zeros(0, dtype=bool)
    ell_act = pb.ell is not None and (mu + pb.c(u)) > 0
    key = (lo_act.tobytes(), hi_act.tobytes(), row_act.tobytes(), bool(ell_act))
    if not ell_act:
        u2, lam2 = _kkt_solve(pb, lo_act, hi_act, row_act, 0.0)
        return u2, lam2, 0.0, key

    def gap(m):
        return pb.c(_kkt_solve(pb, lo_act, hi_act, row_act, m)[0])

    u0, l0 = _kkt_solve(pb, lo_act, hi_act, row_act, 0.0)
    if pb.c(u0) <= 0:
        return u0, l0, 0.0, key
    hi_mu = max(mu, 1e-6)
    while gap(hi_mu) > 0 and hi_mu < 1e12:
        hi_mu *= 10.0
    if gap(hi_mu) > 0:
        return u0, l0, 0.0, key
    m = brentq(gap, 0.0, hi_mu, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    u2, lam2 = _kkt_solve(pb, lo_act, hi_act, row_act, m)
    return u2, lam2, m, key


def _polish(pb, u, lam, mu, tol, steps=25):
    seen = set()
    best = None
    for _ in range(steps):
        u, lam, mu, key = _active_set_step(pb, u, lam, mu)
        r = pb.kkt(u, lam, mu)
        if best is None or r < best[3]:
            best = (u, lam, mu, r)
        if r <= tol:
            return best
        if key in seen:
            break
        seen.add(key)
    return best


def _steps(pb, step, mono_min, Mnorm, Gnorm, strong):
    if strong and pb.ell is None:
        theta = mono_min / Mnorm ** 2
        alpha = 0.9 * theta if step is None else step
        if not 0 < alpha < 2 * theta:
            raise ValidationError(f"step size {alpha} outside (0, {2 * theta:.6g})")
        beta = 0.9 * (1.0 / alpha - 1.0 / (2 * theta)) / max(Gnorm ** 2, 1e-300)
        if pb.G.shape[0] and beta <= 0:
            raise ValidationError("step size too large for the dual update")
        return "pfb", alpha, beta
    L = np.sqrt(Mnorm ** 2 + Gnorm ** 2) + Gnorm if pb.G.shape[0] else Mnorm
    if pb.ell is not None:
        L = L * 2.0
    gamma = 0.9 / L if step is None else step
    if not 0 < gamma < 1.0 / L:
        raise ValidationError(f"step size {gamma} outside (0, {1.0 / L:.6g})")
    return "fbf", gamma, gamma


def solve_affine_vi(M, q, lo, hi, G, h, ell=None, u0=None, lam0=None, mu0=0.0, tol=1e-8, max_iter=200000,
                    step=None, polish_every=200, seed=0):
    """Solve the affine VI over box, polyhedron and optional ellipsoid.

    Returns ``(u, lam, mu, iterations, kkt_residual, converged, method)`` with
    ``lam`` in the caller's row scaling.
    """
    n = M.shape[0]
    if step is not None and not step > 0:
        raise ValidationError(f"step size must be positive, got {step}")
    pb = _Problem(M, q, lo, hi, G, h, ell)
    if step is not None:
        # reject a bad user step even when the first polish would finish the solve
        _step_setup(pb, step, seed)
    u = np.clip(np.zeros(n) if u0 is None else np.asarray(u0, dtype=float).copy(), lo, hi)
    lam = np.zeros(pb.G.shape[0]) if lam0 is None else np.asarray(lam0, dtype=float) * pb.scale
    mu = float(mu0)
    best = _polish(pb, u, lam, mu, tol)
    if best[3] <= tol:
        return _finish(pb, best, 0, True, "active-set")
    if best[3] < pb.kkt(u, lam, mu):
        u, lam, mu = np.clip(best[0], lo, hi), np.maximum(best[1], 0.0), max(best[2], 0.0)
    _check_polyhedron(pb)
    method, a, b = _step_setup(pb, step, seed)
    best_viol, stall = np.inf, 0
    for k in range(1, max_iter + 1):
        if method == "pfb":
            u_new = np.clip(u - a * (M @ u + q + pb.G.T @ lam), lo, hi)
            if pb.G.shape[0]:
                lam = np.maximum(lam + b * (pb.G @ (2 * u_new - u) - pb.h), 0.0)
            u = u_new
        else:
            # forward-backward-forward on the primal-dual operator
            fu = pb.field(u, lam, mu)
            fl = pb.h - pb.G @ u
            fm = -pb.c(u) if pb.ell is not None else 0.0
            u1 = np.clip(u - a * fu, lo, hi)
            l1 = np.maximum(lam - b * fl, 0.0)
            m1 = max(mu - b * fm, 0.0) if pb.ell is not None else 0.0
            fu1 = pb.field(u1, l1, m1)
            fl1 = pb.h - pb.G @ u1
            fm1 = -pb.c(u1) if pb.ell is not None else 0.0
            u = u1 - a * (fu1 - fu)
            lam = l1 - b * (fl1 - fl)
            mu = m1 - b * (fm1 - fm)
        if k % polish_every == 0 or k == max_iter:
            r = pb.kkt(u, lam, mu)
            if r < best[3]:
                best = (u.copy(), lam.copy(), mu, r)
            if r <= tol:
                return _finish(pb, best, k, True, method)
            cand = _polish(pb, u, lam, mu, tol)
            if cand[3] < best[3]:
                best = cand
            if best[3] <= tol:
                return _finish(pb, best, k, True, method + "+active-set")
            viol = pb.primal_violation(u)
            if viol < best_viol - 1e-12:
                best_viol, stall = viol, 0
            else:
                stall += polish_every
            if np.linalg.norm(lam) > 1e8 and stall >= 10000:
                raise InfeasibleError("dual multipliers diverge while primal violation stalls",
                                      {"iteration": k, "violation": viol, "dual_norm": float(np.linalg.norm(lam))})
    return _finish(pb, best, max_iter, False, method)


def _step_setup(pb, step, seed):
    M = pb.M
    mono_min = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
    Mnorm = _power_norm(M, seed=seed)
    Gnorm = _power_norm(pb.G, seed=seed) if pb.G.shape[0] else 0.0
    return _steps(pb, step, mono_min, Mnorm, Gnorm, mono_min > 1e-10)


def _check_polyhedron(pb):
    """LP feasibility of the box and polyhedral rows; the ellipsoid is left to the iteration."""
    if not pb.G.shape[0]:
        return
    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b) for a, b in zip(pb.lo, pb.hi)]
    lp = linprog(np.zeros(pb.M.shape[0]), A_ub=pb.G, b_ub=pb.h, bounds=bounds, method="highs")
    if lp.status == 2:
        raise InfeasibleError("feasible set is empty (linear program infeasible)", {"lp_message": lp.message})


def _finish(pb, best, k, ok, method):
    u, lam, mu, r = best
    lam = np.maximum(lam, 0.0)
    return u, (lam / pb.scale if pb.G.shape[0] else lam), max(mu, 0.0), k, r, ok, method


def project(C, x0, a, tol=1e-13):
    """Euclidean projection of ``a`` onto the feasible set at ``x0``."""
    n = a.size
    u, _, _, _, r, ok, _ = solve_affine_vi(np.eye(n), -a, C.lo, C.hi, C.G, C.h(x0), C.ellipsoid(x0),
                                           u0=a, tol=tol, max_iter=20000, polish_every=50)
    return u, ok


def natural_residual(vi, x0, u, gamma=1.0):
    """``|u - Pi_C(u - gamma F(u))|``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float)
    p, ok = project(vi.feasible, x0, u - gamma * vi.F(u, x0))
    return float(np.linalg.norm(u - p))


def solve_vi(vi, x0, warm=None, tol=1e-8, max_iter=200000, step=None, dual_warm=None):
    """Solve VI(F(.|x0), C). Falls back to the best iterate on non-convergence."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    C = vi.feasible
    u, lam, mu, k, kkt, ok, method = solve_affine_vi(vi.M, vi.w(x0), C.lo, C.hi, C.G, C.h(x0), C.ellipsoid(x0),
                                                     u0=warm, lam0=dual_warm, tol=0.1 * tol,
                                                     max_iter=max_iter, step=step)
    res = natural_residual(vi, x0, u)
    conv = bool(ok and res <= tol)
    if not conv:
        log.warning("VI solve stopped at residual %.3g after %d iterations", res, k)
    return ViSolveResult(u, res, k, conv, lam, mu, kkt, method)


def shifted_warm_start(prev, gains, x_terminal, T, N, m):
    """Drop the first input of every agent and append ``K_i x_T``."""
    u = np.asarray(getattr(prev, "u", prev), dtype=float).reshape(N, T, m)
    out = np.empty_like(u)
    out[:, :-1] = u[:, 1:]
    for i in range(N):
        out[i, -1] = gains[i] @ x_terminal
    return out.reshape(-1)


def ol_unconstrained_sequence(gains, Abar, x0, T):
    """``u_i[t] = K_i Abar^t x0`` in decision-vector order."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    seq = []
    for _ in range(T):
        seq.append([k @ x for k in gains])
        x = Abar @ x
    N, m = len(gains), gains[0].shape[0]
    return np.array(seq).reshape(T, N, m).transpose(1, 0, 2).reshape(-1)


def surrogate_clne_solution_checker(game, cl, x0, T=None):
    """Stationarity residual of the closed-form CL-NE sequence in the surrogate game."""
    g = game if T is None else game.replace(T=T)
    vi = build_vi(g, cl, kind="clne_surrogate")
    u = ol_unconstrained_sequence(cl.K_cl, cl.Abar_cl, x0, g.T)
    return float(np.abs(vi.F(u, np.asarray(x0, dtype=float))).max(initial=0.0))
