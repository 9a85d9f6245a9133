import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from dyngame import ConstraintSpec, compute_terminal_set, membership
from dyngame.errors import AssumptionError
from dyngame.terminal_set import decrease_certificate, euclidean_distance


def _setup():
    Abar = np.array([[0.8, 0.3], [-0.2, 0.7]])
    K = [np.array([[0.5, -1.0]])]
    spec = ConstraintSpec(2, 1, 1, Gx=np.array([[1.0, 1.0], [0.0, -1.0]]), gx=np.array([2.0, 3.0]),
                          u_min=np.array([[-1.0]]), u_max=np.array([[0.5]]))
    return Abar, K, spec


def test_inscribed_in_every_row():
    Abar, K, spec = _setup()
    ts = compute_terminal_set(Abar, spec, K)
    Pinv = np.linalg.inv(ts.P_lyap)
    support = np.sqrt(ts.r * np.einsum("ij,jk,ik->i", ts.rows, Pinv, ts.rows))
    assert np.all(support <= ts.rhs * (1 + 1e-12))
    # the binding row touches
    assert support[ts.binding] == pytest.approx(ts.rhs[ts.binding], rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(0, 2 * np.pi), s=st.floats(0, 1))
def test_forward_invariant(theta, s):
    Abar, K, spec = _setup()
    ts = compute_terminal_set(Abar, spec, K)
    L = np.linalg.cholesky(np.linalg.inv(ts.P_lyap))
    x = np.sqrt(ts.r) * s * (L @ np.array([np.cos(theta), np.sin(theta)]))
    assert membership(ts, x)[0]
    assert membership(ts, Abar @ x)[0]
    assert np.all(ts.rows @ x <= ts.rhs + 1e-9)


def test_decrease_certificate_negative():
    Abar, K, spec = _setup()
    assert decrease_certificate(compute_terminal_set(Abar, spec, K)) < 0


def test_unconstrained_is_unbounded():
    Abar, K, _ = _setup()
    ts = compute_terminal_set(Abar, ConstraintSpec(2, 1, 1), K)
    assert not ts.bounded
    assert membership(ts, np.array([1e6, 1e6])) == (True, 0.0)


def test_requires_schur():
    _, K, spec = _setup()
    with pytest.raises(AssumptionError):
        compute_terminal_set(np.eye(2), spec, K)


def test_euclidean_distance_matches_optimizer():
    Abar, K, spec = _setup()
    ts = compute_terminal_set(Abar, spec, K)
    x = np.array([4.0, -3.0])
    d = euclidean_distance(ts, x)
    cons = {"type": "ineq", "fun": lambda y: ts.r - y @ ts.P_lyap @ y}
    ref = minimize(lambda y: np.sum((y - x) ** 2), np.zeros(2), constraints=[cons], tol=1e-14)
    assert d == pytest.approx(np.sqrt(ref.fun), rel=1e-6)
    assert euclidean_distance(ts, np.zeros(2)) == 0.0


def test_platoon_terminal_set(platoon):
    ts = platoon.ts
    assert ts.bounded and ts.r > 0
    assert decrease_certificate(ts) < 0
