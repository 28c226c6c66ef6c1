import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invprop.qp import INFEASIBLE, ActiveSetQP, CholeskyFailure, QpProblem, check_kkt, solve

from oracles import enumerate_qp, random_qp


def test_unconstrained_minimizer():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    f = np.array([1.0, -2.0])
    s = solve(QpProblem(H, f))
    assert s.optimal
    assert np.allclose(s.u, -np.linalg.solve(H, f))


def test_projection_onto_half_space():
    # min ||u - c||^2 s.t. a.u >= b has the closed form c + max(0, b - a.c) a / |a|^2
    c = np.array([1.0, 2.0])
    a = np.array([1.0, 1.0])
    b = 5.0
    s = solve(QpProblem(2 * np.eye(2), -2 * c, -a[None, :], np.array([-b])))
    expected = c + max(0.0, b - a @ c) * a / (a @ a)
    assert np.allclose(s.u, expected)
    assert s.active_set == [0]


def test_infeasible_is_reported():
    G = np.array([[1.0], [-1.0]])
    g = np.array([-1.0, -1.0])  # u <= -1 and u >= 1
    s = solve(QpProblem(np.eye(1), np.zeros(1), G, g))
    assert s.status == INFEASIBLE
    assert not s.optimal


def test_asymmetric_and_indefinite_cost_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(CholeskyFailure):
        solve(QpProblem(np.array([[1.0, 0.5], [0.5, -1.0]]), np.zeros(2)))


def test_warm_start_gives_same_answer_as_cold():
    rng = np.random.default_rng(1)
    warm = ActiveSetQP(warm_start=True)
    H, f, G, g = random_qp(rng, 6, 5)
    for _ in range(50):
        f = f + 0.05 * rng.normal(size=6)
        p = QpProblem(H, f, G, g)
        a = warm.solve(p)
        b = solve(p)
        assert np.allclose(a.u, b.u, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_matches_enumeration_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    H, f, G, g = random_qp(rng, n, m)
    p = QpProblem(H, f, G, g)
    s = solve(p)
    assert s.optimal
    assert np.allclose(s.u, enumerate_qp(H, f, G, g), atol=1e-7)
    assert check_kkt(p, s).ok()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_infeasibility_agrees_with_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    H, f, G, g = random_qp(rng, n, m, feasible=False)
    s = solve(QpProblem(H, f, G, g))
    ref = enumerate_qp(H, f, G, g)
    if ref is None:
        assert s.status == INFEASIBLE
    else:
        assert s.optimal and np.allclose(s.u, ref, atol=1e-7)


def test_diagonal_fast_path_matches_dense():
    rng = np.random.default_rng(4)
    d = rng.uniform(0.5, 3.0, size=5)
    f = rng.normal(size=5)
    G = rng.normal(size=(4, 5))
    g = rng.normal(size=4) + 2
    a = solve(QpProblem(np.diag(d), f, G, g))
    ref = enumerate_qp(np.diag(d), f, G, g)
    assert np.allclose(a.u, ref, atol=1e-9)
