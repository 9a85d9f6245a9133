"""Receding-horizon loop for the finite-horizon game and its diagnostics.

At every step the finite-horizon VI is solved at the measured state
(warm-started with the shifted previous solution), the first input of every
agent is applied, and the step is logged.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InfeasibleError, ValidationError
from .fhvi import build_vi, natural_residual, ol_unconstrained_sequence, shifted_warm_start, solve_vi
from .game_model import TrajectoryLog, feasible, stage_cost
from .terminal_set import membership

log = logging.getLogger(__name__)

CONTROLLERS = ("olne", "clne_surrogate", "no_terminal")
VI_KIND = {"olne": "olne_terminal", "clne_surrogate": "clne_surrogate", "no_terminal": "no_terminal"}
ORIGIN_TOL = 1e-4
DECREASE_SLACK = 1e-6


@dataclass(frozen=True)
class PerturbationConfig:
    variances: tuple = (0.01,)
    trials: int = 100
    seed: int = 0
    n_jobs: int = 1


@dataclass(frozen=True)
class RhcConfig:
    controller_kind: str = "olne"
    steps: int = 300
    enforce_terminal: bool = False
    warm_start: bool = True
    tol: float = 1e-8
    max_iter: int = 200000
    perturbation: PerturbationConfig = None
    diagnostics: bool = True

    def __post_init__(self):
        if self.controller_kind not in CONTROLLERS:
            raise ValidationError(f"controller_kind must be one of {CONTROLLERS}")
        if self.steps < 1:
            raise ValidationError("steps must be at least 1")
        if self.perturbation is not None and min(self.perturbation.variances) < 0:
            raise ValidationError("variance must be nonnegative")


@dataclass
class DiagnosticsReport:
    cum_cost_sequence: np.ndarray
    entered_terminal_at: int
    shifted_solution_residuals: np.ndarray
    constraint_max_violation: float
    converged_to_origin: bool
    max_cost_increase_after_entry: float
    monotone_after_entry: bool
    decrease_last_50: bool
    nonconverged_steps: list = field(default_factory=list)

    def to_dict(self):
        return {
            "entered_terminal_at": self.entered_terminal_at,
            "constraint_max_violation": self.constraint_max_violation,
            "converged_to_origin": self.converged_to_origin,
            "monotone_after_entry": self.monotone_after_entry,
            "max_cost_increase_after_entry": self.max_cost_increase_after_entry,
            "decrease_last_50": self.decrease_last_50,
            "nonconverged_steps": list(self.nonconverged_steps),
            "max_shifted_residual_after_entry": shifted_after_entry(self),
        }


def shifted_after_entry(diag):
    k = diag.entered_terminal_at
    if k is None:
        return None
    post = diag.shifted_solution_residuals[k + 1:]
    post = post[np.isfinite(post)]
    return float(post.max()) if post.size else 0.0


def _values(cfg, sol, ctg):
    kind = cfg.controller_kind
    if kind == "olne":
        if ctg is None:
            raise ValidationError("OL-NE controller needs the augmented cost-to-go")
        return ctg, list(sol.K_ol), sol.Abar_ol
    if kind == "clne_surrogate":
        return sol, list(sol.K_cl), sol.Abar_cl
    if sol is None:
        return None, None, None
    if hasattr(sol, "K_ol"):
        return None, list(sol.K_ol), sol.Abar_ol
    return None, list(sol.K_cl), sol.Abar_cl


def terminal_value(vi, ctg, i, xT):
    """Terminal cost at ``x_T`` with both arguments of ``V_i`` equal."""
    if vi.kind == "olne_terminal" and vi.terminal_hat is not None:
        z = np.concatenate([xT, xT])
        return 0.5 * float(z @ vi.terminal_hat[i] @ z)
    W = vi.Qbar[i][-vi.n:, -vi.n:]
    return 0.5 * float(xT @ W @ xT)


def total_cost(game, vi, ctg, x0, u):
    """``sum_i J_i`` of a decision vector, including the stage cost at ``x0``."""
    U = vi.inputs_by_time(u)
    xs = np.vstack([x0, vi.states(u, x0)])
    tot = 0.0
    for i in range(game.N):
        for t in range(vi.T):
            tot += stage_cost(game, i, xs[t], U[t, i * game.m:(i + 1) * game.m])
        tot += terminal_value(vi, ctg, i, xs[-1])
    return tot


def run_rhc(game, spec, sol, ctg, ts, x0, cfg, terminal_override=None):
    """Closed-loop simulation; returns ``(TrajectoryLog, DiagnosticsReport)``."""
    values, gains, Abar = _values(cfg, sol, ctg)
    vi = build_vi(game, values, spec, terminal=ts if cfg.enforce_terminal else None,
                  kind=VI_KIND[cfg.controller_kind], terminal_override=terminal_override)
    x = np.asarray(x0, dtype=float).reshape(-1)
    N, m, T = game.N, game.m, game.T
    states, inputs, costs, iters, resid, dist, conv, sols = [x], [], [], [], [], [], [], []
    warm, dual = None, None
    if gains is not None and Abar is not None:
        warm = ol_unconstrained_sequence(gains, Abar, x, T)
    for k in range(cfg.steps):
        try:
            res = solve_vi(vi, x, warm=warm, tol=cfg.tol, max_iter=cfg.max_iter, dual_warm=dual)
        except InfeasibleError as exc:
            exc.partial = _log(states, inputs, costs, iters, resid, dist, conv, sols)
            raise
        u0 = vi.inputs_by_time(res.u)[0]
        xT = vi.states(res.u, x)[-1]
        costs.append([stage_cost(game, i, x, u0[i * m:(i + 1) * m]) for i in range(N)])
        inputs.append(u0)
        iters.append(res.iterations)
        resid.append(res.residual)
        conv.append(res.converged)
        dist.append(membership(ts, xT)[1] if ts is not None else np.nan)
        sols.append((res.u, xT))
        x = game.step(x, u0)
        states.append(x)
        if cfg.warm_start and gains is not None:
            warm = shifted_warm_start(res.u, gains, xT, T, N, m)
            dual = None
        else:
            warm = None
    tlog = _log(states, inputs, costs, iters, resid, dist, conv, sols)
    diag = diagnose(game, spec, vi, ctg, tlog, gains, ts, cfg) if cfg.diagnostics else None
    return tlog, diag


def _log(states, inputs, costs, iters, resid, dist, conv, sols):
    n = len(states[0])
    return TrajectoryLog(
        states=np.array(states),
        inputs=np.array(inputs) if inputs else np.zeros((0, 0)),
        stage_costs=np.array(costs) if costs else np.zeros((0, 0)),
        vi_iters=np.array(iters, dtype=int),
        vi_residual=np.array(resid, dtype=float),
        terminal_distance=np.array(dist, dtype=float),
        converged=np.array(conv, dtype=bool),
        solutions=list(sols) if n else [],
    )


def check_shifted_optimality(game, vi, tlog, gains):
    """VI natural residual of the shifted sequence at each successor state."""
    out = np.full(len(tlog.solutions), np.nan)
    for k in range(1, len(tlog.solutions)):
        u_prev, xT = tlog.solutions[k - 1]
        cand = shifted_warm_start(u_prev, gains, xT, vi.T, vi.N, vi.m)
        out[k] = natural_residual(vi, tlog.states[k], cand)
    return out


def diagnose(game, spec, vi, ctg, tlog, gains, ts, cfg):
    steps = tlog.inputs.shape[0]
    cum = np.array([total_cost(game, vi, ctg, tlog.states[k], tlog.solutions[k][0]) for k in range(steps)])
    entered = None
    for k in range(steps):
        if tlog.terminal_distance[k] == 0.0 and tlog.converged[k]:
            entered = k
            break
    shifted = check_shifted_optimality(game, vi, tlog, gains) if gains is not None else np.full(steps, np.nan)
    viol = max(feasible(spec, tlog.states[k], tlog.inputs[k]).worst for k in range(steps))
    viol = max(viol, float(np.max(spec.Gx @ tlog.states[-1] - spec.gx, initial=-np.inf)))
    incr = -np.inf
    if entered is not None:
        for k in range(entered, steps - 1):
            drop = cum[k + 1] - cum[k] + float(np.sum(tlog.stage_costs[k]))
            incr = max(incr, drop)
    tail = range(max(0, steps - 50), steps - 1)
    dec50 = all(cum[k + 1] <= cum[k] - float(np.sum(tlog.stage_costs[k])) + DECREASE_SLACK for k in tail)
    return DiagnosticsReport(
        cum_cost_sequence=cum,
        entered_terminal_at=entered,
        shifted_solution_residuals=shifted,
        constraint_max_violation=float(viol),
        converged_to_origin=bool(np.abs(tlog.states[-1]).max() < ORIGIN_TOL),
        max_cost_increase_after_entry=float(incr),
        monotone_after_entry=bool(entered is not None and incr <= DECREASE_SLACK),
        decrease_last_50=bool(dec50),
        nonconverged_steps=[int(k) for k in np.flatnonzero(~tlog.converged)],
    )


# --- perturbation experiment ---------------------------------------------

@dataclass(frozen=True)
class PerturbationRow:
    variance: float
    trial: int
    deviation: float
    stable: bool
    failed: bool = False


def _trial(game, spec, sol, ctg, ts, x0, cfg, nominal, abs_var, rel_var, seed, v_idx, trial):
    rng = np.random.default_rng([seed, v_idx, trial])
    sd = np.sqrt(abs_var)
    term = [p + sd * rng.standard_normal(p.shape) for p in sol.P_ol]
    try:
        tlog, _ = run_rhc(game, spec, sol, ctg, ts, x0, cfg, terminal_override=term)
    except (InfeasibleError, ConvergenceError) as exc:
        log.warning("trial %d at variance %g failed: %s", trial, rel_var, exc)
        return PerturbationRow(rel_var, trial, np.nan, False, True)
    scale = np.linalg.norm(nominal, axis=1).max()
    dev = np.linalg.norm(tlog.states - nominal, axis=1).max() / scale
    return PerturbationRow(rel_var, trial, float(dev), bool(np.abs(tlog.states[-1]).max() < ORIGIN_TOL))


def run_perturbation_experiment(game, spec, sol, ctg, ts, x0, cfg):
    """Re-run the loop with Gaussian noise added to the terminal ``P_OL`` copies.

    Variances are given relative to the largest entry of ``|P_OL|``. The
    deviation is ``max_t |x[t] - xhat[t]|`` over ``max_t |xhat[t]|`` where
    ``xhat`` is the nominal closed loop.
    """
    pert = cfg.perturbation
    if pert is None:
        raise ValidationError("configuration has no perturbation block")
    quiet = RhcConfig(cfg.controller_kind, cfg.steps, cfg.enforce_terminal, cfg.warm_start, cfg.tol,
                      cfg.max_iter, None, False)
    nominal, _ = run_rhc(game, spec, sol, ctg, ts, x0, quiet)
    pmax = max(float(np.abs(p).max()) for p in sol.P_ol)
    jobs = [(v, i, t) for i, v in enumerate(pert.variances) for t in range(pert.trials)]
    args = (game, spec, sol, ctg, ts, x0, quiet, nominal.states)
    if pert.n_jobs != 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=pert.n_jobs)(
            delayed(_trial)(*args, v * pmax, v, pert.seed, i, t) for v, i, t in jobs)
    else:
        rows = [_trial(*args, v * pmax, v, pert.seed, i, t) for v, i, t in jobs]
    return list(rows), nominal
