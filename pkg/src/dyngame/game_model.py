"""Problem data for constrained linear-quadratic dynamic games.

A game is the plant ``x[t+1] = A x[t] + sum_i B_i u_i[t]`` shared by N agents,
each paying ``l_i(x, u_i) = 0.5 x'Q_i x + 0.5 u_i'R_i u_i`` per step. Stacked
inputs are ordered ``col(u_1, ..., u_N)`` at every time step.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError

EPS_SYM = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _sym(M):
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class GameDefinition:
    """Immutable problem data. Q and R are symmetrized on construction."""

    A: np.ndarray
    B: tuple
    Q: tuple
    R: tuple
    T: int = 10

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValidationError(f"A must be square, got {A.shape}")
        n = A.shape[0]
        Bs = [np.asarray(b, dtype=float) for b in self.B]
        if not Bs:
            raise ValidationError("at least one agent (B matrix) is required")
        Bs = [b.reshape(n, -1) if b.ndim < 2 else b for b in Bs]
        m = Bs[0].shape[1]
        for i, b in enumerate(Bs):
            if b.shape != (n, m):
                raise ValidationError(f"B[{i}] has shape {b.shape}, expected {(n, m)}")
        N = len(Bs)
        if len(self.Q) != N or len(self.R) != N:
            raise ValidationError(f"need {N} Q and R matrices, got {len(self.Q)} and {len(self.R)}")
        Qs, Rs = [], []
        for i, (q, r) in enumerate(zip(self.Q, self.R)):
            q = np.atleast_2d(np.asarray(q, dtype=float))
            r = np.atleast_2d(np.asarray(r, dtype=float))
            if q.shape != (n, n):
                raise ValidationError(f"Q[{i}] has shape {q.shape}, expected {(n, n)}")
            if r.shape != (m, m):
                raise ValidationError(f"R[{i}] has shape {r.shape}, expected {(m, m)}")
            scale = max(1.0, np.abs(q).max())
            if np.abs(q - q.T).max() > EPS_SYM * scale:
                raise ValidationError(f"Q[{i}] not symmetric")
            q = _sym(q)
            if np.linalg.eigvalsh(q).min() < -EPS_SYM * scale:
                raise ValidationError(f"Q[{i}] not positive semidefinite")
            rscale = max(1.0, np.abs(r).max())
            if np.abs(r - r.T).max() > EPS_SYM * rscale:
                raise ValidationError(f"R[{i}] not symmetric")
            r = _sym(r)
            if np.linalg.eigvalsh(r).min() <= 0.0:
                raise ValidationError(f"R[{i}]: R not positive definite")
            Qs.append(_frozen(q))
            Rs.append(_frozen(r))
        T = int(self.T)
        if T < 1:
            raise ValidationError("horizon T must be at least 1")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", tuple(_frozen(b) for b in Bs))
        object.__setattr__(self, "Q", tuple(Qs))
        object.__setattr__(self, "R", tuple(Rs))
        object.__setattr__(self, "T", T)

    @property
    def N(self):
        return len(self.B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B[0].shape[1]

    @property
    def S(self):
        """``S_i = B_i R_i^{-1} B_i^T`` per agent."""
        return tuple(b @ np.linalg.solve(r, b.T) for b, r in zip(self.B, self.R))

    @property
    def C(self):
        """A PSD square root of each ``Q_i`` (``Q_i = C_i^T C_i``)."""
        from .matrix_eq import psd_sqrt

        return tuple(psd_sqrt(q) for q in self.Q)

    @property
    def B_stack(self):
        """``row(B_1, ..., B_N)``, the n-by-Nm input matrix of the stacked input."""
        return np.hstack(self.B)

    def split(self, u):
        """Split a stacked input ``col(u_1..u_N)`` into per-agent vectors."""
        u = np.asarray(u, dtype=float)
        return [u[..., i * self.m:(i + 1) * self.m] for i in range(self.N)]

    def step(self, x, u):
        return self.A @ x + self.B_stack @ u

    def replace(self, **changes):
        fields = {"A": self.A, "B": self.B, "Q": self.Q, "R": self.R, "T": self.T}
        fields.update(changes)
        return GameDefinition(**fields)


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Polyhedral state set, per-agent input boxes and a shared input polytope.

    ``Gx x <= gx`` for the state, ``u_min[i] <= u_i <= u_max[i]`` per agent
    (infinite entries mean unbounded) and ``Gu col(u_1..u_N) <= gu`` at every
    time step. The origin must satisfy every row strictly.
    """

    n: int
    N: int
    m: int
    Gx: np.ndarray = None
    gx: np.ndarray = None
    u_min: np.ndarray = None
    u_max: np.ndarray = None
    Gu: np.ndarray = None
    gu: np.ndarray = None

    def __post_init__(self):
        n, N, m = int(self.n), int(self.N), int(self.m)
        Gx = np.zeros((0, n)) if self.Gx is None else np.atleast_2d(np.asarray(self.Gx, dtype=float))
        gx = np.zeros(0) if self.gx is None else np.asarray(self.gx, dtype=float).reshape(-1)
        if Gx.size == 0:
            Gx = np.zeros((0, n))
        if Gx.shape[1] != n or Gx.shape[0] != gx.size:
            raise ValidationError(f"state constraint shapes {Gx.shape}, {gx.shape} do not match n={n}")
        u_min = np.full((N, m), -np.inf) if self.u_min is None else np.asarray(self.u_min, dtype=float).reshape(N, m)
        u_max = np.full((N, m), np.inf) if self.u_max is None else np.asarray(self.u_max, dtype=float).reshape(N, m)
        Gu = np.zeros((0, N * m)) if self.Gu is None else np.atleast_2d(np.asarray(self.Gu, dtype=float))
        gu = np.zeros(0) if self.gu is None else np.asarray(self.gu, dtype=float).reshape(-1)
        if Gu.size == 0:
            Gu = np.zeros((0, N * m))
        if Gu.shape[1] != N * m or Gu.shape[0] != gu.size:
            raise ValidationError(f"coupling constraint shapes {Gu.shape}, {gu.shape} do not match N*m={N * m}")
        if np.any(np.linalg.norm(Gx, axis=1) == 0) or np.any(np.linalg.norm(Gu, axis=1) == 0):
            raise ValidationError("constraint rows with zero normal")
        # Assumption 1(i): the origin is strictly feasible
        if np.any(gx <= 0):
            raise ValidationError("state constraints: origin must satisfy G_x 0 < g_x")
        if np.any(u_min >= 0) or np.any(u_max <= 0):
            raise ValidationError("input boxes: need u_min < 0 < u_max")
        if np.any(gu <= 0):
            raise ValidationError("coupling constraints: origin must satisfy G_u 0 < g_u")
        for name, val in (("n", n), ("N", N), ("m", m)):
            object.__setattr__(self, name, val)
        for name, val in (("Gx", Gx), ("gx", gx), ("u_min", u_min), ("u_max", u_max), ("Gu", Gu), ("gu", gu)):
            object.__setattr__(self, name, _frozen(val))

    @classmethod
    def unconstrained(cls, game):
        return cls(game.n, game.N, game.m)

    @property
    def has_box(self):
        return bool(np.isfinite(self.u_min).any() or np.isfinite(self.u_max).any())

    @property
    def is_unconstrained(self):
        return self.Gx.shape[0] == 0 and self.Gu.shape[0] == 0 and not self.has_box

    @property
    def lower(self):
        return self.u_min.reshape(-1)

    @property
    def upper(self):
        return self.u_max.reshape(-1)


@dataclass(frozen=True, eq=False)
class ViolationReport:
    state_slack: np.ndarray
    lower_slack: np.ndarray
    upper_slack: np.ndarray
    coupling_slack: np.ndarray

    @property
    def max_violation(self):
        """Largest violation per family; nonpositive means satisfied."""
        def worst(s):
            return float(-s.min()) if s.size else -np.inf
        return {
            "state": worst(self.state_slack),
            "input": max(worst(self.lower_slack), worst(self.upper_slack)),
            "coupling": worst(self.coupling_slack),
        }

    @property
    def worst(self):
        return max(self.max_violation.values())

    @property
    def admissible(self):
        return self.worst <= 0.0


def feasible(spec, x, u):
    """Per-row slacks of ``(x, u)``; negative slack means violation."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.size != spec.n or u.size != spec.N * spec.m:
        raise DimensionError(f"expected x of size {spec.n} and u of size {spec.N * spec.m}")
    with np.errstate(invalid="ignore"):
        lo = u - spec.lower
        hi = spec.upper - u
    lo = lo[np.isfinite(spec.lower)]
    hi = hi[np.isfinite(spec.upper)]
    return ViolationReport(spec.gx - spec.Gx @ x, lo, hi, spec.gu - spec.Gu @ u)


def propagate(game, x0, u):
    """State sequence of length L+1 driven by stacked inputs ``u`` (L by Nm)."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.size == 0:
        u = np.zeros((0, game.N * game.m))
    if x0.size != game.n:
        raise DimensionError(f"x0 has size {x0.size}, expected {game.n}")
    if u.shape[1] != game.N * game.m:
        raise DimensionError(f"inputs have width {u.shape[1]}, expected {game.N * game.m}")
    Bs = game.B_stack
    xs = np.empty((u.shape[0] + 1, game.n))
    xs[0] = x0
    for t in range(u.shape[0]):
        xs[t + 1] = game.A @ xs[t] + Bs @ u[t]
    return xs


def stage_cost(game, i, x, ui):
    """``0.5 x'Q_i x + 0.5 u_i'R_i u_i`` for agent ``i`` (0-based)."""
    if not 0 <= i < game.N:
        raise DimensionError(f"agent index {i} out of range for N={game.N}")
    x = np.asarray(x, dtype=float).reshape(-1)
    ui = np.asarray(ui, dtype=float).reshape(-1)
    if x.size != game.n or ui.size != game.m:
        raise DimensionError("state or input size mismatch")
    return 0.5 * float(x @ game.Q[i] @ x) + 0.5 * float(ui @ game.R[i] @ ui)


@dataclass
class TrajectoryLog:
    """Closed-loop record. ``states`` has one more row than ``inputs``."""

    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    vi_iters: np.ndarray
    vi_residual: np.ndarray
    terminal_distance: np.ndarray
    converged: np.ndarray = None
    solutions: list = field(default_factory=list)

    def replay_error(self, game):
        """Max relative mismatch between logged and re-propagated states."""
        ref = propagate(game, self.states[0], self.inputs)
        scale = np.maximum(1.0, np.abs(ref).max(axis=1))
        return float((np.abs(ref - self.states).max(axis=1) / scale).max())

    def to_csv(self, path, game):
        n, N, m = game.n, game.N, game.m
        header = ["t"] + [f"x_{k}" for k in range(n)]
        header += [f"u_{i + 1},{k}" for i in range(N) for k in range(m)]
        header += [f"cost_{i + 1}" for i in range(N)]
        header += ["term_dist", "vi_iters", "vi_residual"]
        nan_u = np.full(N * m, np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t in range(self.states.shape[0]):
                last = t >= self.inputs.shape[0]
                row = [t] + [fmt(v) for v in self.states[t]]
                row += [fmt(v) for v in (nan_u if last else self.inputs[t])]
                row += [fmt(v) for v in (np.full(N, np.nan) if last else self.stage_costs[t])]
                if last:
                    row += ["nan", "0", "nan"]
                else:
                    row += [fmt(self.terminal_distance[t]), str(int(self.vi_iters[t])), fmt(self.vi_residual[t])]
                w.writerow(row)


def fmt(v):
    """17 significant digits, round-trip exact for doubles."""
    return format(float(v), ".17g")


def selector(i, N):
    e = np.zeros((N, 1))
    e[i] = 1.0
    return e


def build_platooning(N=4, tau=0.1, h=0.2, d=5.0, v_ref=20.0, d_min=2.0, v_min=0.0, v_max=30.0,
                     u_min=-5.0, u_max=5.0, T=10):
    """Platoon of N vehicles in error coordinates, pre-stabilized.

    Agent 1 tracks ``v_ref``; agent i > 1 tracks the speed of agent i-1 at
    the gap ``d_i + h_i v_i``. The state of agent i is
    ``(p_{i-1} - p_i - d_i - h_i v_i, v_{i-1} - v_i)``; the leader's first
    coordinate is identically zero. Inputs are accelerations.

    Returns ``(game, spec, K_stab)`` where ``game.A = A + sum_i B_i K_stab_i``
    and the input bounds apply to the game input ``u_i`` added on top of the
    pre-stabilizing feedback.
    """
    if N < 2:
        raise ValidationError("platooning needs N >= 2")
    if tau <= 0:
        raise ValidationError("sample time must be positive")
    h = np.broadcast_to(np.asarray(h, dtype=float), (N,)).copy()
    d = np.broadcast_to(np.asarray(d, dtype=float), (N,)).copy()
    d_min = np.broadcast_to(np.asarray(d_min, dtype=float), (N,)).copy()
    lead = np.array([[0.0, 0.0], [0.0, 1.0]])
    dbl = np.array([[1.0, tau], [0.0, 1.0]])
    A = np.zeros((2 * N, 2 * N))
    A[:2, :2] = lead
    for i in range(1, N):
        A[2 * i:2 * i + 2, 2 * i:2 * i + 2] = dbl
    push = np.array([[tau ** 2 / 2], [tau]])
    B = []
    for i in range(N):
        own = np.array([[0.0], [tau]]) if i == 0 else np.array([[h[i] * tau + tau ** 2 / 2], [tau]])
        Bi = -np.kron(selector(i, N), own)
        if i < N - 1:
            Bi = Bi + np.kron(selector(i + 1, N), push)
        B.append(Bi)
    # the published gain (-1, -1) acts through u = -K x; stored here as +K
    K_stab = [np.kron(selector(i, N).T, np.array([[1.0, 1.0]])) for i in range(N)]
    A_pre = A + sum(b @ k for b, k in zip(B, K_stab))
    n = 2 * N
    game = GameDefinition(A_pre, B, [np.eye(n)] * N, [np.eye(1)] * N, T)

    # v_i = v_ref - sum_{k<=i} e_v,k
    rows, rhs = [], []
    for i in range(N):
        cum = np.zeros(n)
        for k in range(i + 1):
            cum[2 * k + 1] = 1.0
        if i > 0:
            # gap p_{i-1} - p_i = e_p,i + d_i + h_i v_i >= d_min
            r = h[i] * cum
            r[2 * i] -= 1.0
            rows.append(r)
            rhs.append(d[i] + h[i] * v_ref - d_min[i])
        rows.append(-cum)
        rhs.append(v_max - v_ref)
        rows.append(cum.copy())
        rhs.append(v_ref - v_min)
    spec = ConstraintSpec(n, N, 1, np.array(rows), np.array(rhs),
                          np.full((N, 1), u_min), np.full((N, 1), u_max))
    return game, spec, K_stab


def platoon_physical(x, v_ref, h, d, N):
    """Recover relative positions and speeds from an error-coordinate state."""
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), (N,))
    d = np.broadcast_to(np.asarray(d, dtype=float), (N,))
    ev = x[..., 1::2]
    v = v_ref - np.cumsum(ev, axis=-1)
    gaps = x[..., 0::2] + d + h * v
    p = -np.cumsum(gaps[..., 1:], axis=-1)
    p = np.concatenate([np.zeros(p.shape[:-1] + (1,)), p], axis=-1)
    return p, v


# --- scenario files -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 200000
    step_size: float = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Scenario:
    game: GameDefinition
    spec: ConstraintSpec
    solver: SolverSettings
    metadata: dict

    def __iter__(self):
        return iter((self.game, self.spec, self.solver))


def _num(v):
    return None if not np.isfinite(v) else float(v)


def scenario_to_dict(game, spec, solver=None, metadata=None):
    solver = solver or SolverSettings()
    boxes = [{"lower": [_num(v) for v in spec.u_min[i]], "upper": [_num(v) for v in spec.u_max[i]]}
             for i in range(spec.N)]
    doc = {
        "A": game.A.tolist(),
        "B": [b.tolist() for b in game.B],
        "Q": [q.tolist() for q in game.Q],
        "R": [r.tolist() for r in game.R],
        "T": game.T,
        "constraints": {
            "state": {"G": spec.Gx.tolist(), "g": spec.gx.tolist()},
            "input_boxes": boxes,
            "coupling": {"G": spec.Gu.tolist(), "g": spec.gu.tolist()},
        },
        "solver": {"tol": solver.tol, "max_iter": solver.max_iter, "step_size": solver.step_size,
                   "seed": solver.seed},
        "metadata": metadata or {},
    }
    return doc


def dump_scenario(path, game, spec, solver=None, metadata=None):
    text = json.dumps(scenario_to_dict(game, spec, solver, metadata), indent=1, sort_keys=True)
    Path(path).write_text(text + "\n")


def _mat(doc, key, where):
    try:
        a = np.array(doc, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: field '{key}' is not a numeric array") from exc
    return a


def scenario_from_dict(doc):
    if not isinstance(doc, dict):
        raise ValidationError("scenario must be a JSON object")
    for key in ("A", "B", "Q", "R"):
        if key not in doc:
            raise ValidationError(f"missing field '{key}'")
    A = np.atleast_2d(_mat(doc["A"], "A", "scenario"))
    n = A.shape[0]
    B = [_mat(b, "B", "scenario").reshape(n, -1) for b in doc["B"]]
    Q = [np.atleast_2d(_mat(q, "Q", "scenario")) for q in doc["Q"]]
    R = [np.atleast_2d(_mat(r, "R", "scenario")) for r in doc["R"]]
    try:
        game = GameDefinition(A, B, Q, R, doc.get("T", 10))
    except ValidationError as exc:
        raise ValidationError(f"invalid game data: {exc}") from exc
    cons = doc.get("constraints") or {}
    st = cons.get("state") or {}
    cp = cons.get("coupling") or {}
    N, m = game.N, game.m
    boxes = cons.get("input_boxes")
    u_min = np.full((N, m), -np.inf)
    u_max = np.full((N, m), np.inf)
    if boxes:
        if len(boxes) != N:
            raise ValidationError(f"input_boxes has {len(boxes)} entries, expected {N}")
        for i, box in enumerate(boxes):
            lo = [(-np.inf if v is None else float(v)) for v in box.get("lower", [None] * m)]
            hi = [(np.inf if v is None else float(v)) for v in box.get("upper", [None] * m)]
            u_min[i], u_max[i] = lo, hi
    Gx = _mat(st.get("G", []), "constraints.state.G", "scenario").reshape(-1, n)
    Gu = _mat(cp.get("G", []), "constraints.coupling.G", "scenario").reshape(-1, N * m)
    spec = ConstraintSpec(n, N, m, Gx, _mat(st.get("g", []), "g", "scenario"), u_min, u_max,
                          Gu, _mat(cp.get("g", []), "g", "scenario"))
    s = doc.get("solver") or {}
    solver = SolverSettings(float(s.get("tol", 1e-8)), int(s.get("max_iter", 200000)),
                            None if s.get("step_size") is None else float(s["step_size"]),
                            int(s.get("seed", 0)))
    return Scenario(game, spec, solver, dict(doc.get("metadata") or {}))


def load_scenario(path):
    """Parse and validate a scenario JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror}") from exc
    return scenario_from_dict(doc)


def bundled_scenario(name):
    """Path of a scenario shipped with the package."""
    from importlib import resources

    return resources.files("dyngame") / "scenarios" / f"{name}.json"
