import numpy as np
import pytest

from dyngame import (ConstraintSpec, GameDefinition, RhcConfig, build_cost_to_go, compute_terminal_set,
                     load_scenario, run_rhc, solve_clne, solve_olne)
from dyngame.game_model import bundled_scenario


def random_game(seed, n=3, N=2, m=1, T=4, radius=0.9, hetero=True):
    """Random stable game with heterogeneous PD weights."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    B = [rng.standard_normal((n, m)) for _ in range(N)]
    Q = []
    for _ in range(N):
        L = rng.standard_normal((n, n))
        Q.append(L @ L.T + 0.1 * np.eye(n) if hetero else np.eye(n))
    R = [np.eye(m) * (1 + i if hetero else 1) for i in range(N)]
    return GameDefinition(A, B, Q, R, T)


def scalar_game(T=4):
    return GameDefinition([[1.0]], [[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]], [[[1.0]], [[1.0]]], T)


def box(game, bound):
    b = np.full((game.N, game.m), float(bound))
    return ConstraintSpec(game.n, game.N, game.m, u_min=-b, u_max=b)


class Platoon:
    def __init__(self):
        sc = load_scenario(bundled_scenario("platooning"))
        self.scenario = sc
        self.game, self.spec = sc.game, sc.spec
        self.x0 = np.asarray(sc.metadata["x0"], dtype=float)
        self.ol = solve_olne(self.game)
        self.ctg = build_cost_to_go(self.game, self.ol)
        self.ts = compute_terminal_set(self.ol.Abar_ol, self.spec, self.ol.K_ol)
        self._cl = None
        self._run = None

    @property
    def cl(self):
        if self._cl is None:
            self._cl = solve_clne(self.game)
        return self._cl

    @property
    def run(self):
        if self._run is None:
            self._run = run_rhc(self.game, self.spec, self.ol, self.ctg, self.ts, self.x0, RhcConfig(steps=300))
        return self._run


@pytest.fixture(scope="session")
def platoon():
    return Platoon()
